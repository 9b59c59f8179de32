//! Append-only store journal: a sequence of length-prefixed canonical
//! `KeyEntry` records. A partially written trailing record (crash
//! mid-append) is tolerated; everything before it is recovered.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use crate::core::wire::Canonical;
use crate::core::KeyEntry;

pub fn open_append(path: &Path) -> std::io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

pub fn append_entry(file: &mut File, entry: &KeyEntry) -> std::io::Result<()> {
    let body = entry.canonical_bytes();
    file.write_all(&(body.len() as u32).to_be_bytes())?;
    file.write_all(&body)?;
    file.flush()
}

/// Read every complete, well-formed record. The bool reports whether a
/// truncated or corrupt tail was skipped.
pub fn load_entries(path: &Path) -> std::io::Result<(Vec<KeyEntry>, bool)> {
    let mut raw = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut raw)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), false)),
        Err(e) => return Err(e),
    }
    Ok(parse_records(&raw))
}

pub fn parse_records(raw: &[u8]) -> (Vec<KeyEntry>, bool) {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while raw.len() - pos >= 4 {
        let len = u32::from_be_bytes(raw[pos..pos + 4].try_into().unwrap()) as usize;
        let Some(body) = raw.get(pos + 4..pos + 4 + len) else {
            return (entries, true);
        };
        match KeyEntry::decode(body) {
            Ok(entry) => entries.push(entry),
            Err(_) => return (entries, true),
        }
        pos += 4 + len;
    }
    (entries, pos < raw.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{KeyId, KeyMaterial, NodeId, ValidityWindow};
    use crate::seclevel::{SecurityExpr, SecurityLabel};

    fn entry(i: u8) -> KeyEntry {
        KeyEntry::new(
            KeyId::from_bytes([i; 16]),
            KeyMaterial::new(vec![i; 32]).unwrap(),
            NodeId::new("d", "peer").unwrap(),
            "link:x",
            ValidityWindow::new(0, 100).unwrap(),
            SecurityExpr::atom(SecurityLabel::its(["sc"])),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_and_truncated_tail_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        let mut f = open_append(&path).unwrap();
        for i in 0..3 {
            append_entry(&mut f, &entry(i)).unwrap();
        }
        // Simulate a crash mid-append.
        f.write_all(&[0, 0, 0, 99, 1, 2, 3]).unwrap();
        f.flush().unwrap();
        drop(f);

        let (entries, truncated) = load_entries(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert!(truncated);
        assert_eq!(entries[2], entry(2));
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, truncated) = load_entries(&dir.path().join("nope")).unwrap();
        assert!(entries.is_empty());
        assert!(!truncated);
    }
}
