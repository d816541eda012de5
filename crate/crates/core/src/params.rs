//! Named parameters, seeded initialization, Adam, and the checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "MCKP", version u16 = 1, count u32
//! per parameter: name_len u32, name utf-8, rank u32, dims rank * u32,
//!                values numel * f64
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::Tensor;
use crate::binio::{FormatError, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
}

/// Insertion-ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: vec![0.0; value.numel()],
            name,
            value,
        });
        id
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data).expect("sized"))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[n]))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.len_u32(self.params.len());
        for p in &self.params {
            w.len_u32(p.name.len());
            w.bytes(p.name.as_bytes());
            w.len_u32(p.value.shape().len());
            for &d in p.value.shape() {
                w.len_u32(d);
            }
            for &v in p.value.data() {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError {
                offset: at,
                message: format!("unsupported version {version}"),
            }
            .into());
        }
        let count = r.count("parameter count", 8)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.count("name length", 1)?;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| FormatError {
                offset: at,
                message: "name is not utf-8".into(),
            })?;
            if store.by_name.contains_key(&name) {
                return Err(FormatError {
                    offset: at,
                    message: format!("duplicate parameter {name}"),
                }
                .into());
            }
            let rank = r.count("rank", 4)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > bytes.len() - r.offset() {
                return Err(r.error(format!("truncated values for {name}")).into());
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64("value")?);
            }
            store.add(name, Tensor::new(shape, data).expect("sized"));
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Copies values for every parameter whose name satisfies `select` from
    /// `source`. Shapes must match; returns how many parameters were copied.
    pub fn load_matching(
        &mut self,
        source: &ParamStore,
        select: impl Fn(&str) -> bool,
    ) -> Result<usize, CheckpointError> {
        let mut copied = 0;
        for p in &mut self.params {
            if !select(&p.name) {
                continue;
            }
            let src = source
                .id(&p.name)
                .map(|id| source.get(id))
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.iter_mut()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * *g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * *g * *g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *g = 0.0;
            }
        }
    }
}
