//! Binary tensor container used for model checkpoints (`.sslh`) and feature
//! matrices.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "SSLH" | version u32 | entry_count u32
//! per entry: name_len u32 | name utf-8 | dtype u8 (0 = f32) |
//!            rank u32 | dims u32 * rank | payload f32 * numel
//! trailer: crc32 u32 over everything after the 12-byte header
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SSLH";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic; not a container file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated or malformed at byte {offset}")]
    Truncated { offset: usize },
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("entry name is not valid utf-8")]
    BadName,
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("entry {name:?} not found")]
    MissingEntry { name: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One named f32 tensor in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: &str, dims: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorEntry { name: name.to_string(), dims: dims.to_vec(), data }
    }
}

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ u32::from(b)) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn serialize(entries: &[TensorEntry]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert(&e.name) {
            return Err(CheckpointError::DuplicateName(e.name.clone()));
        }
    }
    let mut body = Vec::new();
    for e in entries {
        body.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        body.extend_from_slice(e.name.as_bytes());
        body.push(DTYPE_F32);
        body.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_le_bytes());
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    if &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(CheckpointError::Truncated { offset: 12 + *pos });
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype(dtype));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(TensorEntry { name, dims, data });
    }
    if pos != body.len() {
        return Err(CheckpointError::Truncated { offset: 12 + pos });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let bytes = serialize(entries)?;
    let mut f = fs::File::create(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    f.write_all(&bytes)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Vec<TensorEntry>> {
    let bytes = fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    deserialize(&bytes)
}

/// Pull one entry by name out of a loaded container.
pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CheckpointError::MissingEntry { name: name.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<TensorEntry> {
        vec![
            TensorEntry::new("enc/conv0/w", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -0.125]),
            TensorEntry::new("enc/conv0/b", &[2], vec![0.5, -0.5]),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let entries = sample_entries();
        let back = deserialize(&serialize(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
        for (a, b) in back[0].data.iter().zip(&entries[0].data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flipping_a_payload_byte_fails_crc() {
        let mut bytes = serialize(&sample_entries()).unwrap();
        let mid = bytes.len() - 10;
        bytes[mid] ^= 0x40;
        assert!(matches!(deserialize(&bytes), Err(CheckpointError::CrcMismatch { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = serialize(&sample_entries()).unwrap();
        for cut in [3usize, 13, bytes.len() - 5] {
            let err = deserialize(&bytes[..cut]);
            assert!(err.is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = serialize(&sample_entries()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(deserialize(&bytes), Err(CheckpointError::BadMagic)));
        let mut bytes = serialize(&sample_entries()).unwrap();
        bytes[4] = 99;
        // version is inside the header, not covered by the body crc
        assert!(matches!(deserialize(&bytes), Err(CheckpointError::UnsupportedVersion(99))));
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let entries = vec![
            TensorEntry::new("w", &[1], vec![1.0]),
            TensorEntry::new("w", &[1], vec![2.0]),
        ];
        assert!(matches!(serialize(&entries), Err(CheckpointError::DuplicateName(_))));
    }

    #[test]
    fn crc32_known_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sslh");
        save(&path, &sample_entries()).unwrap();
        assert_eq!(load(&path).unwrap(), sample_entries());
    }
}
