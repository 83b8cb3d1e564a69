//! Little-endian binary containers: image embeddings (`MFE1`), per-subject
//! FPFH caches (`MFF1`) and model checkpoints (`MFCK`).

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::descriptors::{FpfhFeatures, FPFH_DIM};
use crate::error::{Error, Result};
use crate::mesh::write_file;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MFE1";
pub const FEATURES_MAGIC: &[u8; 4] = b"MFF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";

/// Sequential reader that reports truncation against the file it came from.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(Error::format(
                path,
                format!("bad magic '{got}', expected '{}'", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Reader { path, bytes, pos: 4 })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        let v: Vec<f32> = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(self.path, format!("non-finite value in {what} at index {i}")));
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, path: &Path) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(path, format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32], path: &Path, what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(path, format!("refusing to write non-finite {what} value at index {i}")));
    }
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_embedding(v: &[f32], path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * v.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, v.len(), path)?;
    put_f32s(&mut out, v, path, "embedding")?;
    Ok(out)
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    let mut r = Reader::new(path, bytes, EMBEDDING_MAGIC)?;
    let dim = r.u32("embedding header")?;
    let v = r.f32s(dim, "embedding payload")?;
    r.finish()?;
    Ok(v)
}

pub fn write_embedding(path: &Path, v: &[f32]) -> Result<()> {
    write_file(path, &encode_embedding(v, path)?)
}

pub fn read_embedding(path: &Path) -> Result<Vec<f32>> {
    decode_embedding(&read_all(path)?, path)
}

/// One feature block per structure, canonical order.
pub fn write_features(path: &Path, features: &[FpfhFeatures]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    put_u32(&mut out, features.len(), path)?;
    put_u32(&mut out, FPFH_DIM, path)?;
    for f in features {
        put_u32(&mut out, f.num_nodes(), path)?;
        put_f32s(&mut out, f.as_slice(), path, "feature")?;
    }
    write_file(path, &out)
}

pub fn read_features(path: &Path) -> Result<Vec<FpfhFeatures>> {
    let bytes = read_all(path)?;
    let mut r = Reader::new(path, &bytes, FEATURES_MAGIC)?;
    let blocks = r.u32("feature header")?;
    let dim = r.u32("feature header")?;
    if dim != FPFH_DIM {
        return Err(Error::format(path, format!("feature width {dim}, expected {FPFH_DIM}")));
    }
    let mut out = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let n = r.u32("feature block header")?;
        let data = r.f32s(n * FPFH_DIM, "feature block")?;
        out.push(FpfhFeatures::from_raw(n, data)?);
    }
    r.finish()?;
    Ok(out)
}

/// Named tensors in name order: per entry the UTF-8 name, the rank, the
/// dimensions and the values.
pub fn encode_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, store.len(), path)?;
    for (name, t) in store.iter() {
        put_u32(&mut out, name.len(), path)?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank(), path)?;
        for &d in t.shape() {
            put_u32(&mut out, d, path)?;
        }
        put_f32s(&mut out, t.data(), path, name)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(path, bytes, CHECKPOINT_MAGIC)?;
    let count = r.u32("checkpoint header")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("entry name length")?;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32("entry rank")?;
        let shape = (0..rank).map(|_| r.u32("entry shape")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, format!("shape of '{name}' overflows")))?;
        let data = r.f32s(n, &name)?;
        store
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| Error::format(path, format!("duplicate entry '{name}'")))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_file(path, &encode_checkpoint(store, path)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), what: "model checkpoint".into() });
    }
    decode_checkpoint(&read_all(path)?, path)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn embedding_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.mfe");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f32> = (0..512).map(|_| rng.random_range(-3.0..3.0)).collect();
        write_embedding(&p, &v).unwrap();
        let back = read_embedding(&p).unwrap();
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(fs::metadata(&p).unwrap().len(), 8 + 4 * 512);
    }

    #[test]
    fn embedding_errors() {
        let p = Path::new("x.mfe");
        let good = encode_embedding(&[1.0; 512], p).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embedding(&bad_magic, p), Err(Error::Format { .. })));
        let truncated = &good[..good.len() - 4];
        let e = decode_embedding(truncated, p).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let mut nan = good.clone();
        nan[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_embedding(&nan, p).unwrap_err().to_string().contains("non-finite"));
        assert!(encode_embedding(&[f32::INFINITY], p).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        s.insert("a", Tensor::scalar(7.5)).unwrap();
        let p = Path::new("c.mfck");
        let bytes = encode_checkpoint(&s, p).unwrap();
        assert_eq!(decode_checkpoint(&bytes, p).unwrap().max_abs_diff(&s), Some(0.0));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
    }

    #[test]
    fn missing_checkpoint_is_named() {
        let e = read_checkpoint(Path::new("/nonexistent/checkpoint.mfck")).unwrap_err();
        assert!(matches!(e, Error::MissingArtifact { .. }));
    }
}
