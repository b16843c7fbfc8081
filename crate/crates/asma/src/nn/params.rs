//! Named parameter storage, initialization, and the binary checkpoint
//! format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "ASMC"
//! version  u16
//! digest   u16 length + utf-8 config digest
//! count    u32
//! count x entries:
//!   name      u16 length + utf-8
//!   learnable u8
//!   rank      u8
//!   dims      rank x u32
//!   payload   prod(dims) x f32
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;

use super::ModelError;
use crate::ad::{Tape, Tensor};
use crate::util::atomic_write;
use crate::{Real, Rng};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub values: Vec<Real>,
    pub shape: Vec<usize>,
    pub learnable: bool,
}

/// Ordered collection of named arrays: learnable weights plus non-learnable
/// state (batch-norm running statistics). Iteration order is insertion
/// order, which fixes the optimizer update order and the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, values: Vec<Real>, shape: Vec<usize>, learnable: bool) {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "{name}");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            values,
            shape,
            learnable,
        });
    }

    /// Fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as Real).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, values, shape, true);
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        &self.entries[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn values(&self, name: &str) -> &[Real] {
        &self.entry(name).values
    }

    pub fn set_values(&mut self, name: &str, values: Vec<Real>) {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(values.len(), self.entries[idx].values.len(), "{name}");
        self.entries[idx].values = values;
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn num_learnable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.values.len())
            .sum()
    }

    /// Tracked leaf tensors for every learnable entry (gradients will be
    /// deposited on them by `backward`).
    pub fn leaves(&self, tape: &Tape) -> ParamTensors {
        let map = self
            .entries
            .iter()
            .map(|e| {
                let t = if e.learnable {
                    tape.leaf(e.values.clone(), e.shape.clone())
                } else {
                    Tensor::from_vec(e.values.clone(), e.shape.clone())
                };
                (e.name.clone(), t)
            })
            .collect();
        ParamTensors { map }
    }

    /// Untracked constant tensors for a frozen forward pass.
    pub fn constants(&self) -> ParamTensors {
        let map = self
            .entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    Tensor::from_vec(e.values.clone(), e.shape.clone()),
                )
            })
            .collect();
        ParamTensors { map }
    }

    /// Order-insensitive content hash (used to verify frozen stages left
    /// weights untouched).
    pub fn content_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for v in &e.values {
                h.update((*v as f64).to_le_bytes());
            }
        }
        crate::util::hex(&h.finalize())
    }
}

/// Tensors materialized from a store for one forward/backward pass.
pub struct ParamTensors {
    map: HashMap<String, Tensor>,
}

impl ParamTensors {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    /// Replace one tensor (used to splice a tracked leaf into an otherwise
    /// constant parameter set, e.g. for gradient checks).
    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    /// Pull accumulated gradients back out, keyed by name.
    pub fn grads(&self) -> HashMap<String, Vec<Real>> {
        self.map
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

const MAGIC: &[u8; 4] = b"ASMC";
const VERSION: u16 = 1;

/// Write named parameter stores to one checkpoint file. Part names prefix
/// entry names with `<part>/`.
pub fn save_checkpoint(
    path: &Path,
    digest: &str,
    parts: &[(&str, &ParamStore)],
) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(digest.len() as u16).to_le_bytes());
    buf.extend_from_slice(digest.as_bytes());
    let count: usize = parts.iter().map(|(_, s)| s.entries.len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (part, store) in parts {
        for e in &store.entries {
            let name = format!("{part}/{}", e.name);
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(e.learnable as u8);
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    atomic_write(path, &buf)?;
    Ok(())
}

/// Read a checkpoint back into per-part stores.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(String, HashMap<String, ParamStore>), ModelError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > bytes.len() {
            return Err(ModelError::BadCheckpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let dlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let digest = String::from_utf8(take(&mut pos, dlen)?.to_vec())
        .map_err(|_| ModelError::BadCheckpoint("digest is not utf-8".into()))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut parts: HashMap<String, ParamStore> = HashMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| ModelError::BadCheckpoint("name is not utf-8".into()))?;
        let learnable = take(&mut pos, 1)?[0] != 0;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real);
        }
        let (part, entry_name) = name.split_once('/').ok_or_else(|| {
            ModelError::BadCheckpoint(format!("entry {name} has no part prefix"))
        })?;
        parts
            .entry(part.to_string())
            .or_default()
            .add(entry_name, values, shape, learnable);
    }
    if pos != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    Ok((digest, parts))
}
