//! Versioned binary parameter checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "DMCK" | version u32 | dtype u8 | flags u8 | step u64
//! metadata_len u32 | metadata utf-8
//! count u32
//! count x { name_len u32 | name | ndim u8 | dims u64* | values | [m values | v values] }
//! ```
//!
//! Bit 0 of `flags` marks that Adam moments follow every value block.
//! Entries are written in name order, so equal stores give equal bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::params::{Entry, ParamStore};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMCK";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u8 = 1;

pub struct Checkpoint<T> {
    pub store: ParamStore<T>,
    pub metadata: String,
    pub has_optimizer: bool,
}

pub fn to_bytes<T: Real>(store: &ParamStore<T>, include_optimizer: bool, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.push(if include_optimizer { FLAG_OPTIMIZER } else { 0 });
    out.extend_from_slice(&store.step.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for id in store.ids() {
        let e = &store.entries[id.index()];
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut blocks = vec![&e.value];
        if include_optimizer {
            blocks.push(&e.first_moment);
            blocks.push(&e.second_moment);
        }
        for t in blocks {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DiffError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<T>();
        let raw = self.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| DiffError::Checkpoint("unknown dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(DiffError::Checkpoint(format!(
            "dtype mismatch: file has {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let flags = r.u8()?;
    let has_optimizer = flags & FLAG_OPTIMIZER != 0;
    let step = r.u64()?;
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| DiffError::Checkpoint("metadata is not utf-8".into()))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    store.step = step;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DiffError::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let value = r.values::<T>(&shape)?;
        let id = store.register(&name, value)?;
        if has_optimizer {
            let m = r.values::<T>(&shape)?;
            let v = r.values::<T>(&shape)?;
            let e: &mut Entry<T> = &mut store.entries[id.index()];
            e.first_moment = m;
            e.second_moment = v;
        }
    }
    if r.pos != bytes.len() {
        return Err(DiffError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        store,
        metadata,
        has_optimizer,
    })
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| DiffError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, include_optimizer: bool, metadata: &str) -> Result<()> {
    write_atomic(path, &to_bytes(store, include_optimizer, metadata))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}

impl<T: Real> ParamStore<T> {
    /// Copies values, and optionally Adam state, from a loaded checkpoint store.
    pub fn restore_from(&mut self, other: &ParamStore<T>, include_optimizer: bool) -> Result<()> {
        self.load_values_from(other)?;
        if include_optimizer {
            for (name, &id) in &self.by_name {
                let src = other.id(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
                let e = &other.entries[src.index()];
                self.entries[id.index()].first_moment = e.first_moment.clone();
                self.entries[id.index()].second_moment = e.second_moment.clone();
            }
            self.step = other.step;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Adam;

    fn sample_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let a = s
            .register("layer.weight", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-300, -7.5, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s.register("layer.bias", Tensor::vector(vec![0.5, 0.25, -0.125])).unwrap();
        s.register("scalar", Tensor::scalar(std::f64::consts::PI)).unwrap();
        s.grad_mut(a).data_mut()[0] = 0.7;
        Adam::default().step(&mut s, 1e-3);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample_store();
        for opt in [false, true] {
            let bytes = to_bytes(&s, opt, "{\"k\":1}");
            let ck = from_bytes::<f64>(&bytes).unwrap();
            assert_eq!(ck.metadata, "{\"k\":1}");
            assert_eq!(ck.has_optimizer, opt);
            assert_eq!(to_bytes(&ck.store, opt, "{\"k\":1}"), bytes);
        }
    }

    #[test]
    fn rejects_wrong_dtype_and_corruption() {
        let s = sample_store();
        let bytes = to_bytes(&s, false, "");
        assert!(from_bytes::<f32>(&bytes).is_err());
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
    }

    #[test]
    fn restore_copies_optimizer_state() {
        let s = sample_store();
        let ck = from_bytes::<f64>(&to_bytes(&s, true, "")).unwrap();
        let mut fresh = ParamStore::new();
        fresh.register("scalar", Tensor::scalar(0.0)).unwrap();
        fresh.register("layer.bias", Tensor::vector(vec![0.0; 3])).unwrap();
        fresh
            .register("layer.weight", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap())
            .unwrap();
        fresh.restore_from(&ck.store, true).unwrap();
        assert_eq!(fresh.step_count(), 1);
        assert_eq!(to_bytes(&fresh, true, ""), to_bytes(&s, true, ""));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = sample_store();
        save(&path, &s, true, "meta").unwrap();
        let ck = load::<f64>(&path).unwrap();
        assert_eq!(to_bytes(&ck.store, true, "meta"), to_bytes(&s, true, "meta"));
    }
}
