//! Offline map-embedding cache.
//!
//! Lane-graph encoder outputs do not depend on where the map sits in the
//! world, so they can be computed once per map and reused. A cache entry is
//! keyed by the lane-graph content hash and the hash of the weights that
//! produced it; a mismatch in either is reported as stale.
//!
//! File layout (little endian):
//!
//! ```text
//! "RCMC" | version u32 | graph hash [32] | weights hash [32] | dtype u8
//! | rows u64 | cols u64 | values | sha256 of everything before [32]
//! ```

use std::path::Path;

use diffmath::checkpoint::write_atomic;
use diffmath::{DType, Real, Tape, Tensor};
use sha2::{Digest, Sha256};

use crate::encoders::{encode_lane_graph, LaneInputs};
use crate::error::{CoreError, Result};
use crate::lanegraph::LaneGraph;
use crate::model::Model;

const MAGIC: &[u8; 4] = b"RCMC";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 32 + 32 + 1 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaleReason {
    GraphChanged,
    WeightsChanged,
    DTypeChanged,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheLookup<T> {
    Hit(Tensor<T>),
    Stale(StaleReason),
    Miss,
}

impl<T> CacheLookup<T> {
    pub fn hit(self) -> Option<Tensor<T>> {
        match self {
            CacheLookup::Hit(t) => Some(t),
            _ => None,
        }
    }
}

/// Runs the lane-graph encoder and returns its output as a plain tensor.
pub fn compute_map_embedding<T: Real>(model: &Model<T>, lane: &LaneInputs) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = encode_lane_graph(&mut tape, model, lane)?;
    Ok(tape.value(v).clone())
}

pub fn to_bytes<T: Real>(graph_hash: &[u8; 32], weights_hash: &[u8; 32], emb: &Tensor<T>) -> Vec<u8> {
    let (rows, cols) = emb.dims2();
    let mut out = Vec::with_capacity(HEADER + emb.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(graph_hash);
    out.extend_from_slice(weights_hash);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in emb.data() {
        v.write_le(&mut out);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn cache_store<T: Real>(path: &Path, graph: &LaneGraph, emb: &Tensor<T>, weights_hash: &[u8; 32]) -> Result<()> {
    if emb.rows() != graph.len() {
        return Err(CoreError::Cache(format!(
            "embedding has {} rows for {} nodes",
            emb.rows(),
            graph.len()
        )));
    }
    write_atomic(path, &to_bytes(&graph.content_hash(), weights_hash, emb))?;
    Ok(())
}

fn corrupt(msg: &str) -> CoreError {
    CoreError::Cache(format!("corrupt cache file: {msg}"))
}

pub fn from_bytes<T: Real>(bytes: &[u8], graph_hash: &[u8; 32], weights_hash: &[u8; 32]) -> Result<CacheLookup<T>> {
    if bytes.len() < HEADER + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::Cache(format!("unsupported cache version {version}")));
    }
    if &body[8..40] != graph_hash {
        return Ok(CacheLookup::Stale(StaleReason::GraphChanged));
    }
    if &body[40..72] != weights_hash {
        return Ok(CacheLookup::Stale(StaleReason::WeightsChanged));
    }
    let dtype = DType::from_tag(body[72]).ok_or_else(|| corrupt("unknown dtype"))?;
    if dtype != T::DTYPE {
        return Ok(CacheLookup::Stale(StaleReason::DTypeChanged));
    }
    let rows = u64::from_le_bytes(body[73..81].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(body[81..89].try_into().unwrap()) as usize;
    let size = dtype.tag() as usize;
    let values = &body[HEADER..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(size)) != Some(values.len()) {
        return Err(corrupt("value count does not match shape"));
    }
    let data = values.chunks_exact(size).map(T::read_le).collect();
    Ok(CacheLookup::Hit(Tensor::new(vec![rows, cols], data)?))
}

/// Loads an entry, returning [`CacheLookup::Miss`] when the file is absent.
pub fn cache_load<T: Real>(path: &Path, graph: &LaneGraph, weights_hash: &[u8; 32]) -> Result<CacheLookup<T>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(CacheLookup::Miss),
        Err(e) => return Err(e.into()),
    };
    from_bytes(&bytes, &graph.content_hash(), weights_hash)
}

/// Returns the cached embedding when valid, otherwise computes and stores it.
pub fn load_or_compute<T: Real>(path: &Path, model: &Model<T>, lane: &LaneInputs) -> Result<(Tensor<T>, bool)> {
    let wh = model.checkpoint_hash();
    if let CacheLookup::Hit(t) = cache_load::<T>(path, &lane.graph, &wh)? {
        return Ok((t, true));
    }
    let emb = compute_map_embedding(model, lane)?;
    cache_store(path, &lane.graph, &emb, &wh)?;
    Ok((emb, false))
}
