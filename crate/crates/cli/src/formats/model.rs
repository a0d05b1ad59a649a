//! Model file format (version 1, little-endian).
//!
//! Layout:
//!
//! ```text
//! magic    4 bytes  "ODTL" (0x4F 0x44 0x54 0x4C)
//! version  u16      1
//! C_i      u16      input channels
//! W_i      u16      input width
//! C        u16      classes
//! hidden   u8       32
//! blocks   u8       residual blocks (3 for the canonical topology)
//! numeric  u8       0 = 32-bit, 1 = truncated-16
//! reserved u8       0
//! params   f32[..]  network order: stem conv W,b; stem BN gamma, beta,
//!                   mean, var; per block three [conv W,b; BN g,b,m,v];
//!                   classifier W row-major, then bias
//! crc32    u32      over all preceding bytes
//! ```
//!
//! Parameters are always stored as 32-bit floats; the numeric tag narrows
//! them on load. A model already narrowed in memory round-trips bit-exact
//! because truncated-16 values are exactly representable 32-bit values.

use odtl_core::model::{ModelParams, Topology, HIDDEN_CHANNELS};
use odtl_core::tensor::NumericMode;

use std::path::Path;

use super::{put_u16, seal, unseal, FormatError, Reader};

pub const MODEL_MAGIC: &[u8; 4] = b"ODTL";
const MODEL_VERSION: u16 = 1;

/// Serialize a model to its byte-stream form.
pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let topo = &model.topology;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u16(&mut buf, MODEL_VERSION);
    put_u16(&mut buf, topo.input_channels as u16);
    put_u16(&mut buf, topo.input_width as u16);
    put_u16(&mut buf, topo.num_classes as u16);
    buf.push(topo.hidden_channels as u8);
    buf.push(topo.num_blocks as u8);
    buf.push(match model.numeric_mode {
        NumericMode::Full32 => 0,
        NumericMode::Truncated16 => 1,
    });
    buf.push(0); // reserved

    for layer in &model.backbone {
        super::put_f32s(&mut buf, &layer.conv.weights);
        super::put_f32s(&mut buf, &layer.conv.bias);
        super::put_f32s(&mut buf, &layer.bn.gamma);
        super::put_f32s(&mut buf, &layer.bn.beta);
        super::put_f32s(&mut buf, &layer.bn.running_mean);
        super::put_f32s(&mut buf, &layer.bn.running_var);
    }
    super::put_f32s(&mut buf, &model.classifier.weights);
    super::put_f32s(&mut buf, &model.classifier.bias);
    seal(buf)
}

struct Header {
    topology: Topology,
    numeric_mode: NumericMode,
}

fn decode_header(r: &mut Reader) -> Result<Header, FormatError> {
    if &r.bytes4()? != MODEL_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MODEL_MAGIC,
        });
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let c_i = usize::from(r.u16()?);
    let w_i = usize::from(r.u16()?);
    let c = usize::from(r.u16()?);
    let hidden = usize::from(r.u8()?);
    let blocks = usize::from(r.u8()?);
    let numeric = r.u8()?;
    let reserved = r.u8()?;

    if c_i == 0 || w_i == 0 || c == 0 {
        return Err(FormatError::HeaderInvalid(format!(
            "zero dimension (channels {c_i}, width {w_i}, classes {c})"
        )));
    }
    if hidden != HIDDEN_CHANNELS {
        return Err(FormatError::HeaderInvalid(format!(
            "hidden channel count {hidden}, expected {HIDDEN_CHANNELS}"
        )));
    }
    if blocks == 0 || blocks > 8 {
        return Err(FormatError::HeaderInvalid(format!(
            "implausible block count {blocks}"
        )));
    }
    if reserved != 0 {
        return Err(FormatError::HeaderInvalid(format!(
            "reserved byte {reserved}"
        )));
    }
    let numeric_mode = match numeric {
        0 => NumericMode::Full32,
        1 => NumericMode::Truncated16,
        other => {
            return Err(FormatError::HeaderInvalid(format!(
                "unknown numeric mode {other}"
            )))
        }
    };
    Ok(Header {
        topology: Topology::new(c_i, w_i, c).with_blocks(blocks),
        numeric_mode,
    })
}

/// Parse a model byte stream; verifies the checksum, validates the
/// header, and narrows parameters when the numeric tag asks for it.
pub fn decode_model(bytes: &[u8]) -> Result<ModelParams, FormatError> {
    let payload = unseal(bytes)?;
    let mut r = Reader::new(payload);
    let header = decode_header(&mut r)?;
    let topo = header.topology;

    // Start from a zero-seeded skeleton with the right shapes and fill
    // every parameter from the stream.
    let mut model = ModelParams::build(topo, 0).map_err(FormatError::Core)?;
    for layer in &mut model.backbone {
        for field in [
            &mut layer.conv.weights,
            &mut layer.conv.bias,
            &mut layer.bn.gamma,
            &mut layer.bn.beta,
            &mut layer.bn.running_mean,
            &mut layer.bn.running_var,
        ] {
            let n = field.len();
            field.clear();
            r.f32_slice(n, field)?;
        }
    }
    for field in [&mut model.classifier.weights, &mut model.classifier.bias] {
        let n = field.len();
        field.clear();
        r.f32_slice(n, field)?;
    }
    if r.position() != payload.len() {
        return Err(FormatError::HeaderInvalid(format!(
            "{} trailing payload bytes",
            payload.len() - r.position()
        )));
    }
    Ok(model.deployed(header.numeric_mode))
}

/// Header summary for `inspect`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSummary {
    pub version: u16,
    pub input_channels: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub hidden_channels: usize,
    pub num_blocks: usize,
    pub numeric_mode: NumericMode,
    pub param_count: usize,
}

/// Decode just enough to describe a model file.
pub fn inspect_model(bytes: &[u8]) -> Result<ModelSummary, FormatError> {
    let model = decode_model(bytes)?;
    let topo = &model.topology;
    Ok(ModelSummary {
        version: MODEL_VERSION,
        input_channels: topo.input_channels,
        input_width: topo.input_width,
        num_classes: topo.num_classes,
        hidden_channels: topo.hidden_channels,
        num_blocks: topo.num_blocks,
        numeric_mode: model.numeric_mode,
        param_count: model.param_count(),
    })
}

pub fn write_model_file(path: &Path, model: &ModelParams) -> Result<(), FormatError> {
    crate::atomic_write(path, &encode_model(model))?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<ModelParams, FormatError> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use odtl_core::rng::StreamRng;

    fn trained_like_model(seed: u64) -> ModelParams {
        let mut model = ModelParams::build(Topology::new(3, 7, 4), seed).unwrap();
        let mut rng = StreamRng::seed(seed ^ 0xF00D);
        for layer in &mut model.backbone {
            for v in layer
                .bn
                .running_mean
                .iter_mut()
                .chain(&mut layer.bn.running_var)
                .chain(&mut layer.conv.bias)
            {
                *v = rng.next_f32();
            }
        }
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = trained_like_model(5);
        let decoded = decode_model(&encode_model(&model)).unwrap();
        assert_eq!(model, decoded);
    }

    #[test]
    fn truncated_tag_round_trips_and_narrows() {
        let model = trained_like_model(6).deployed(NumericMode::Truncated16);
        let decoded = decode_model(&encode_model(&model)).unwrap();
        assert_eq!(model, decoded);
        assert_eq!(decoded.numeric_mode, NumericMode::Truncated16);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_model(&trained_like_model(7));
        bytes[0] ^= 0xFF;
        // The checksum trips first unless it is refreshed; corrupt both.
        let n = bytes.len();
        bytes[n - 1] ^= 0xFF;
        let err = decode_model(&bytes).unwrap_err();
        assert!(matches!(
            err,
            FormatError::BadMagic { .. } | FormatError::ChecksumMismatch { .. }
        ));

        // With a recomputed checksum the magic check itself must fire.
        let mut payload = encode_model(&trained_like_model(7));
        payload.truncate(payload.len() - 4);
        payload[0] ^= 0xFF;
        let sealed = super::super::seal(payload);
        assert!(matches!(
            decode_model(&sealed).unwrap_err(),
            FormatError::BadMagic { .. }
        ));
    }

    #[test]
    fn zero_class_header_is_rejected() {
        let mut payload = encode_model(&trained_like_model(8));
        payload.truncate(payload.len() - 4);
        payload[10] = 0; // classes u16 low byte
        payload[11] = 0;
        let sealed = super::super::seal(payload);
        assert!(matches!(
            decode_model(&sealed).unwrap_err(),
            FormatError::HeaderInvalid(_)
        ));
    }

    #[test]
    fn truncated_stream_is_rejected_distinctly() {
        let bytes = encode_model(&trained_like_model(9));
        let mut payload = bytes[..bytes.len() - 4].to_vec();
        payload.truncate(payload.len() - 100);
        let sealed = super::super::seal(payload);
        assert!(matches!(
            decode_model(&sealed).unwrap_err(),
            FormatError::Truncated { .. }
        ));
    }

    #[test]
    fn flipped_parameter_byte_fails_checksum() {
        let mut bytes = encode_model(&trained_like_model(10));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            decode_model(&bytes).unwrap_err(),
            FormatError::ChecksumMismatch { .. }
        ));
    }

    #[test]
    fn inspect_reports_the_header() {
        let model = trained_like_model(11);
        let summary = inspect_model(&encode_model(&model)).unwrap();
        assert_eq!(summary.input_channels, 3);
        assert_eq!(summary.input_width, 7);
        assert_eq!(summary.num_classes, 4);
        assert_eq!(summary.hidden_channels, 32);
        assert_eq!(summary.num_blocks, 3);
        assert_eq!(summary.param_count, model.param_count());
    }
}
