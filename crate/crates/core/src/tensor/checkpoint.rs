//! Tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PDT1"
//! repeat per tensor:
//!   u32  name length in bytes
//!   [u8] UTF-8 name
//!   u32  rank
//!   u32  extent, per axis
//!   [f32] payload, row-major
//! ```
//!
//! Entries are written in the order given, so a fixed parameter order yields
//! bit-identical files.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PDT1";

pub fn save_named(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let bad = |detail: &str| Error::Malformed {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("missing PDT1 magic"));
    }
    let mut cur = std::io::Cursor::new(&bytes[4..]);
    let mut entries = Vec::new();
    loop {
        let mut lenbuf = [0u8; 4];
        match cur.read_exact(&mut lenbuf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(lenbuf) as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)
            .map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        cur.read_exact(&mut lenbuf)
            .map_err(|_| bad("truncated rank"))?;
        let rank = u32::from_le_bytes(lenbuf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            cur.read_exact(&mut lenbuf)
                .map_err(|_| bad("truncated extents"))?;
            shape.push(u32::from_le_bytes(lenbuf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in data.iter_mut() {
            cur.read_exact(&mut lenbuf)
                .map_err(|_| bad("truncated payload"))?;
            *v = f32::from_le_bytes(lenbuf);
        }
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("patchpure-ckpt-{}-{}", std::process::id(), name));
        p
    }

    #[test]
    fn roundtrip() {
        let path = tmp("roundtrip.pdt");
        let entries = vec![
            (
                "enc.w".to_string(),
                Tensor::new(&[2, 3], vec![1.0, -0.5, 0.25, 3.0, 0.0, 9.5]).unwrap(),
            ),
            ("enc.b".to_string(), Tensor::new(&[2], vec![0.1, -0.1]).unwrap()),
        ];
        save_named(&path, &entries).unwrap();
        let loaded = load_named(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn exact_byte_layout() {
        let path = tmp("layout.pdt");
        let entries = vec![("ab".to_string(), Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap())];
        save_named(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"PDT1");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(bytes, want);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("badmagic.pdt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_named(&path),
            Err(Error::Malformed { .. })
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_payload_rejected() {
        let path = tmp("trunc.pdt");
        let entries = vec![("w".to_string(), Tensor::new(&[4], vec![1.0; 4]).unwrap())];
        save_named(&path, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_named(&path), Err(Error::Malformed { .. })));
        std::fs::remove_file(&path).ok();
    }
}
