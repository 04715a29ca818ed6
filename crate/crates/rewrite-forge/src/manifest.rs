use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use rewrite_forge_core::digest::Checksum;
use serde::Serialize;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pretty JSON with a trailing newline, replacing `path`.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    bytes.push(b'\n');
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut c = Checksum::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        c.update(&buf[..n]);
    }
    Ok(c.finish_hex())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct InputChecksum {
    /// File name only, so manifests do not depend on where a run lives.
    pub file: String,
    pub sha256: String,
}

impl InputChecksum {
    pub fn of(path: &Path) -> io::Result<Self> {
        Ok(Self {
            file: path
                .file_name()
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            sha256: file_sha256(path)?,
        })
    }
}
