//! IO companion to `odtl-core`: binary file formats for models and
//! datasets, line-oriented report rendering, and atomic file writes. The
//! `odtl` binary in this crate fronts everything on the command line.

pub mod formats;
pub mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use formats::FormatError;

/// Write a file atomically: the content lands under a temporary name in
/// the same directory and is renamed into place, so a failed run never
/// leaves a partial output behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = PathBuf::from(path.as_os_str());
    let mut name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other("output path has no file name"))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);

    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
