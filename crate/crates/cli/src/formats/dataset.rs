//! Dataset file format (version 1, little-endian).
//!
//! Layout:
//!
//! ```text
//! magic         4 bytes  "ODDS"
//! version       u16      1
//! C_i           u16      channels per window
//! W_i           u16      window width
//! C             u16      classes
//! sample_count  u32
//! per sample:
//!   user_id     u16
//!   session_id  u16
//!   label       u16
//!   reserved    u16      0
//!   window      f32[C_i * W_i]
//! crc32         u32      over all preceding bytes
//! ```

use odtl_core::data::{Sample, WindowedDataset};
use odtl_core::tensor::Tensor;

use std::path::Path;

use super::{put_u16, put_u32, seal, unseal, FormatError, Reader};

pub const DATASET_MAGIC: &[u8; 4] = b"ODDS";
const DATASET_VERSION: u16 = 1;

/// Serialize a dataset to its byte-stream form.
pub fn encode_dataset(ds: &WindowedDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_u16(&mut buf, DATASET_VERSION);
    put_u16(&mut buf, ds.channels() as u16);
    put_u16(&mut buf, ds.width() as u16);
    put_u16(&mut buf, ds.classes() as u16);
    put_u32(&mut buf, ds.len() as u32);
    for s in ds.samples() {
        put_u16(&mut buf, s.user_id);
        put_u16(&mut buf, s.session_id);
        put_u16(&mut buf, s.label);
        put_u16(&mut buf, 0);
        super::put_f32s(&mut buf, s.window.data());
    }
    seal(buf)
}

/// Parse a dataset byte stream; verifies the checksum and every header
/// and label invariant.
pub fn decode_dataset(bytes: &[u8]) -> Result<WindowedDataset, FormatError> {
    let payload = unseal(bytes)?;
    let mut r = Reader::new(payload);
    if &r.bytes4()? != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
        });
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let channels = usize::from(r.u16()?);
    let width = usize::from(r.u16()?);
    let classes = usize::from(r.u16()?);
    let count = r.u32()? as usize;
    if channels == 0 || width == 0 || classes == 0 {
        return Err(FormatError::HeaderInvalid(format!(
            "zero dimension (channels {channels}, width {width}, classes {classes})"
        )));
    }

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let user_id = r.u16()?;
        let session_id = r.u16()?;
        let label = r.u16()?;
        let reserved = r.u16()?;
        if reserved != 0 {
            return Err(FormatError::HeaderInvalid(format!(
                "sample {i}: reserved field {reserved}"
            )));
        }
        if usize::from(label) >= classes {
            return Err(FormatError::HeaderInvalid(format!(
                "sample {i}: label {label} out of range for {classes} classes"
            )));
        }
        let mut data = Vec::new();
        r.f32_slice(channels * width, &mut data)?;
        samples.push(Sample {
            user_id,
            session_id,
            label,
            window: Tensor::from_vec(channels, width, data).map_err(FormatError::Core)?,
        });
    }
    if r.position() != payload.len() {
        return Err(FormatError::HeaderInvalid(format!(
            "{} trailing payload bytes",
            payload.len() - r.position()
        )));
    }
    WindowedDataset::new(channels, width, classes, samples).map_err(FormatError::Core)
}

pub fn write_dataset_file(path: &Path, ds: &WindowedDataset) -> Result<(), FormatError> {
    crate::atomic_write(path, &encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<WindowedDataset, FormatError> {
    decode_dataset(&std::fs::read(path)?)
}
