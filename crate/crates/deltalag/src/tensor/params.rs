//! Named parameter sets and the on-disk checkpoint container.
//!
//! A [`ParamSet`] maps stable names to value arrays plus per-name gradient
//! accumulators. Iteration order is the name order (BTreeMap), which makes
//! optimizer updates and checkpoint layout deterministic.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic b"DLAGCKPT"
//! bytes 8..16   u64: byte length M of the JSON manifest
//! bytes 16..16+M  manifest: {"arrays":[{"name","rows","cols","offset"},...]}
//! bytes 16+M..  payload: concatenated row-major f64 values, little-endian;
//!               each entry's `offset` is its byte position in the payload
//! ```
//!
//! Save followed by load restores every value bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, NodeId};
use super::Array;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DLAGCKPT";

#[derive(Clone, Debug)]
struct ParamEntry {
    value: Array,
    grad: Array,
}

/// Named arrays with per-name gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter with a zeroed gradient accumulator.
    pub fn insert(&mut self, name: &str, value: Array) {
        let grad = Array::zeros(value.rows(), value.cols());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Mutate both value and gradient of one parameter in lockstep
    /// (used by the optimizer).
    pub(crate) fn update_each(&mut self, mut f: impl FnMut(&str, &mut Array, &mut Array)) {
        for (name, e) in self.entries.iter_mut() {
            f(name, &mut e.value, &mut e.grad);
        }
    }

    /// Create one differentiable leaf per parameter on `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, e) in &self.entries {
            ids.insert(name.clone(), graph.leaf(e.value.clone()));
        }
        BoundParams { ids }
    }

    /// Add the adjoints of the bound leaves into the gradient accumulators.
    /// Leaves that never received an adjoint (parameters off every path to
    /// the loss) contribute nothing, i.e. an exactly zero gradient.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, id) in &bound.ids {
            if let Some(g) = grads.get(*id) {
                if let Some(e) = self.entries.get_mut(name) {
                    e.grad.add_assign(g);
                }
            }
        }
    }

    /// Verify that exactly the expected names are present with the expected
    /// shapes, naming the first offending parameter.
    pub fn validate_shapes(&self, expected: &[(&str, usize, usize)]) -> Result<()> {
        for &(name, rows, cols) in expected {
            let value = self.entries.get(name).map(|e| &e.value).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if value.shape() != (rows, cols) {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected_rows: rows,
                    expected_cols: cols,
                    found_rows: value.rows(),
                    found_cols: value.cols(),
                });
            }
        }
        if self.entries.len() != expected.len() {
            let known: Vec<&str> = expected.iter().map(|&(n, _, _)| n).collect();
            let extra = self
                .names()
                .find(|n| !known.contains(n))
                .unwrap_or("?")
                .to_string();
            return Err(Error::Format(format!(
                "checkpoint has unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }
}

/// Graph leaves created for one forward pass, addressable by name.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }
}

/// Xavier/Glorot uniform init: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    sample_uniform(rows, cols, bound, rng)
}

/// Scaled uniform init for recurrent weights: U(+-1/sqrt(fan_in)).
pub fn scaled_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    let bound = 1.0 / (rows as f64).sqrt();
    sample_uniform(rows, cols, bound, rng)
}

fn sample_uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Array::from_vec(rows, cols, data)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ManifestEntry>,
}

/// Write `params` to `path` in the documented checkpoint layout.
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut manifest = Manifest { arrays: Vec::new() };
    let mut offset = 0u64;
    for (name, value) in params.iter() {
        manifest.arrays.push(ManifestEntry {
            name: name.to_string(),
            rows: value.rows(),
            cols: value.cols(),
            offset,
        });
        offset += (value.len() * 8) as u64;
    }
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode failed: {e}")))?;

    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&manifest_bytes).map_err(io_err)?;
    for (_, value) in params.iter() {
        for v in value.data() {
            file.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    file.flush().map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], restoring every value
/// bit-exactly. Gradient accumulators come back zeroed.
pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cursor = std::io::Cursor::new(&bytes);

    let mut magic = [0u8; 8];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    cursor
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("file too short for manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let manifest_start = 16;
    let payload_start = manifest_start + manifest_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("file truncated inside manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..payload_start])
        .map_err(|e| Error::Format(format!("manifest decode failed: {e}")))?;

    let payload = &bytes[payload_start..];
    let mut params = ParamSet::new();
    for entry in &manifest.arrays {
        let count = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "file truncated inside payload of `{}`",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(&entry.name, Array::from_vec(entry.rows, entry.cols, data));
    }
    Ok(params)
}
