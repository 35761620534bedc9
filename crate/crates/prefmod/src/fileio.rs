//! Raw tensor file format and the FNV-1a checksum used across artifacts.
//!
//! Layout: magic `PMT64\0`, u16 version, u32 ndim, ndim x u64 dims,
//! numel x f64 payload, u64 FNV-1a checksum of the payload bytes.
//! Everything little-endian; round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PMT64\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a tensor file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: String,
        found: u16,
        expected: u16,
    },
    #[error("{path}: checksum mismatch, file is corrupt")]
    Corrupt { path: String },
    #[error("{path}: truncated or malformed ({detail})")]
    Malformed { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, FileError>;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn tensor_payload_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn io_err(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.shape().len() * 8 + t.numel() * 8 + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let payload = tensor_payload_bytes(t);
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    file.sync_all().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let malformed = |detail: &str| FileError::Malformed {
        path: p.clone(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 {
        return Err(malformed("shorter than header"));
    }
    if &bytes[..6] != MAGIC {
        return Err(FileError::BadMagic { path: p });
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(FileError::Version {
            path: p,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    if bytes.len() < off + ndim * 8 {
        return Err(malformed("truncated dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + numel * 8 + 8 {
        return Err(malformed("payload length mismatch"));
    }
    let payload = &bytes[off..off + numel * 8];
    let stored = u64::from_le_bytes(bytes[off + numel * 8..].try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(FileError::Corrupt { path: p });
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| FileError::Malformed {
        path: p,
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tensor_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let mut rng = Rng::seed_from(5);
        let t = Tensor::new(vec![3, 4, 2], rng.normal_vec(24, 1.0)).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(back.bits_eq(&t));
        // writing again produces identical bytes
        let first = std::fs::read(&path).unwrap();
        write_tensor(&path, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0xff; // flip a payload byte
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(FileError::Corrupt { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0xff; // restore
        bytes[6] = 99; // flip version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(FileError::Version { .. })));
    }
}
