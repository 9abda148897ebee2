//! `DVTE` teacher-embedding file.
//!
//! ```text
//! magic    4 bytes "DVTE"
//! version  u16     1
//! count    u32
//! dim      u32
//! records  count × (sample_id u64, dim × f32)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const TEACHER_MAGIC: &[u8; 4] = b"DVTE";
pub const TEACHER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTable {
    pub dim: usize,
    pub entries: BTreeMap<u64, Vec<f32>>,
}

impl TeacherTable {
    /// Ids of `expected` missing from the table, in the given order.
    pub fn missing(&self, expected: &[u64]) -> Vec<u64> {
        expected.iter().copied().filter(|id| !self.entries.contains_key(id)).collect()
    }

    /// Warning text when the table does not cover `expected` exactly.
    pub fn coverage_warning(&self, expected: &[u64]) -> Option<String> {
        let missing = self.missing(expected);
        if self.entries.len() == expected.len() && missing.is_empty() {
            return None;
        }
        Some(format!(
            "teacher file holds {} embeddings for {} samples; missing ids: {:?}",
            self.entries.len(),
            expected.len(),
            missing
        ))
    }
}

pub fn write_teacher_embeddings(table: &TeacherTable) -> Vec<u8> {
    let mut buf = Vec::with_capacity(14 + table.entries.len() * (8 + 4 * table.dim));
    buf.extend(TEACHER_MAGIC);
    buf.extend(TEACHER_VERSION.to_le_bytes());
    buf.extend((table.entries.len() as u32).to_le_bytes());
    buf.extend((table.dim as u32).to_le_bytes());
    for (id, row) in &table.entries {
        buf.extend(id.to_le_bytes());
        for x in row {
            buf.extend(x.to_le_bytes());
        }
    }
    buf
}

pub fn read_teacher_embeddings(bytes: &[u8]) -> Result<TeacherTable> {
    if bytes.len() < 4 || &bytes[..4] != TEACHER_MAGIC {
        return Err(Error::format("not a DVTE file (bad magic)"));
    }
    if bytes.len() < 14 {
        return Err(Error::format("truncated DVTE header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TEACHER_VERSION {
        return Err(Error::format(format!("unsupported DVTE version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format("DVTE dim must be positive"));
    }
    let rec = 8 + 4 * dim;
    let body = &bytes[14..];
    if body.len() < count * rec {
        return Err(Error::format(format!(
            "truncated DVTE file: {} records declared, {} bytes of records present",
            count,
            body.len()
        )));
    }
    if body.len() > count * rec {
        return Err(Error::format("trailing bytes after DVTE records"));
    }
    let mut entries = BTreeMap::new();
    for r in body.chunks_exact(rec) {
        let id = u64::from_le_bytes(r[..8].try_into().unwrap());
        let row = r[8..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if entries.insert(id, row).is_some() {
            return Err(Error::format(format!("duplicate sample id {id} in DVTE file")));
        }
    }
    Ok(TeacherTable { dim, entries })
}

pub fn write_teacher_file(table: &TeacherTable, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_teacher_embeddings(table))?;
    Ok(())
}

pub fn read_teacher_file(path: impl AsRef<Path>) -> Result<TeacherTable> {
    read_teacher_embeddings(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TeacherTable {
        let mut entries = BTreeMap::new();
        entries.insert(7, vec![0.5, -1.0, 2.25]);
        entries.insert(2, vec![f32::MIN_POSITIVE, 0.0, -0.0]);
        TeacherTable { dim: 3, entries }
    }

    #[test]
    fn layout_and_round_trip() {
        let bytes = write_teacher_embeddings(&table());
        assert_eq!(&bytes[..4], b"DVTE");
        assert_eq!(bytes.len(), 14 + 2 * (8 + 12));
        // Records are written in id order.
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 2);
        let back = read_teacher_embeddings(&bytes).unwrap();
        assert_eq!(write_teacher_embeddings(&back), bytes);
    }

    #[test]
    fn format_errors() {
        let bytes = write_teacher_embeddings(&table());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(read_teacher_embeddings(&bad).unwrap_err().to_string().contains("magic"));
        assert!(read_teacher_embeddings(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut dup = bytes.clone();
        dup[34..42].copy_from_slice(&2u64.to_le_bytes());
        assert!(read_teacher_embeddings(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn coverage_warning_lists_missing_ids() {
        let t = table();
        assert!(t.coverage_warning(&[2, 7]).is_none());
        let w = t.coverage_warning(&[2, 7, 11, 4]).unwrap();
        assert!(w.contains("[11, 4]"), "{w}");
    }
}
