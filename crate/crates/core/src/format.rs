//! Binary on-disk format for embedding sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CMCE"
//! u32     format version (currently 1)
//! u32     item count
//! u32     embedding dim
//! u16     model_id byte length, followed by that many UTF-8 bytes
//! then per item:
//!   u32       item_id
//!   u32       class_label
//!   dim x f32 coordinates
//! ```
//!
//! Coordinates are stored at f32 precision. In-memory vectors are f64 but
//! producers quantize to f32-representable values, so write-then-read is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::{EmbeddingItem, EmbeddingSet, EmbeddingVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMCE";
const VERSION: u32 = 1;

pub fn write_embedding_set(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    let id_bytes = set.model_id().as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(Error::format("model_id too long for header"));
    }
    w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
    w.write_all(id_bytes)?;
    for item in set.items() {
        w.write_all(&item.item_id.to_le_bytes())?;
        w.write_all(&item.class_label.to_le_bytes())?;
        for &v in item.vector.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_set(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if dim < 2 {
        return Err(Error::format(format!("stored dim {dim} is below 2")));
    }
    let id_len = read_u16(&mut r)? as usize;
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes)
        .map_err(|_| Error::format("truncated model_id"))?;
    let model_id =
        String::from_utf8(id_bytes).map_err(|_| Error::format("model_id is not UTF-8"))?;

    let mut set = EmbeddingSet::new(model_id, dim)?;
    let mut coord_buf = vec![0u8; dim * 4];
    for _ in 0..count {
        let item_id = read_u32(&mut r)?;
        let class_label = read_u32(&mut r)?;
        r.read_exact(&mut coord_buf)
            .map_err(|_| Error::format("truncated item payload"))?;
        let values: Vec<f64> = coord_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "non-finite coordinate in item {item_id}"
            )));
        }
        set.push(EmbeddingItem {
            item_id,
            class_label,
            vector: EmbeddingVector::new(values)?,
        })?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last item"));
    }
    Ok(set)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("unexpected end of file"))?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_set(seed: u64, n: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = EmbeddingSet::new(format!("model-{seed}"), dim).unwrap();
        for i in 0..n {
            let values: Vec<f64> = (0..dim)
                .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) as f64)
                .collect();
            set.push(EmbeddingItem {
                item_id: i as u32,
                class_label: (i / 3) as u32,
                vector: EmbeddingVector::new(values).unwrap(),
            })
            .unwrap();
        }
        set
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.cmce");
        let set = sample_set(3, 17, 8);
        write_embedding_set(&path, &set).unwrap();
        let back = read_embedding_set(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cmce");
        let p2 = dir.path().join("b.cmce");
        let set = sample_set(9, 40, 16);
        write_embedding_set(&p1, &set).unwrap();
        let back = read_embedding_set(&p1).unwrap();
        write_embedding_set(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cmce");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = read_embedding_set(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cmce");
        let set = sample_set(5, 4, 4);
        write_embedding_set(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_embedding_set(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cmce");
        let set = sample_set(6, 4, 4);
        write_embedding_set(&path, &set).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xAB);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_embedding_set(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cmce");
        let set = sample_set(7, 2, 4);
        write_embedding_set(&path, &set).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embedding_set(&path).unwrap_err(),
            Error::Format(_)
        ));
    }
}
