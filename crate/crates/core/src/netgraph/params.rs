//! Named parameter storage with seeded initialization.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Zeros,
    Ones,
    Normal {
        std: f64,
    },
    /// He/Kaiming normal for ReLU layers, std = sqrt(2 / fan_in).
    Kaiming {
        fan_in: usize,
    },
    /// Orthogonal rows (or columns) of the `(shape[0], prod(shape[1..]))` matrix.
    Orthogonal {
        gain: f64,
    },
}

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
///
/// Layers hold clones of the `Var` handles, so both see the same storage.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names and raw values of parameters and buffers.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.params.iter().chain(&self.buffers) {
            h.update(name.as_bytes());
            let flat = v
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Snapshot of every tensor, keyed `<prefix>.<name>`; buffers get a `buffer:` marker.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() + self.buffers.len());
        for (n, v) in &self.params {
            out.push((
                format!("{prefix}.{n}"),
                v.as_detached_tensor().copy().unwrap(),
            ));
        }
        for (n, v) in &self.buffers {
            out.push((
                format!("{prefix}.buffer:{n}"),
                v.as_detached_tensor().copy().unwrap(),
            ));
        }
        out
    }

    /// Overwrites every tensor from `lookup`; shapes must match exactly.
    pub fn import(&self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let set = |key: String, var: &Var| -> Result<()> {
            let t = lookup(&key)
                .ok_or_else(|| Error::SpecMismatch(format!("checkpoint lacks tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::SpecMismatch(format!(
                    "tensor `{key}` has shape {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
            Ok(())
        };
        for (n, v) in &self.params {
            set(format!("{prefix}.{n}"), v)?;
        }
        for (n, v) in &self.buffers {
            set(format!("{prefix}.buffer:{n}"), v)?;
        }
        Ok(())
    }
}

/// Seeded builder that registers parameters under a dotted path.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Init<'_> {
        let prefix = self.path(name.as_ref());
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&mut self, shape: &[usize], kind: InitKind) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *self.rng);
                    std * z
                })
                .collect(),
            InitKind::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *self.rng);
                        std * z
                    })
                    .collect()
            }
            InitKind::Orthogonal { gain } => {
                let rows = shape[0];
                let cols = n / rows.max(1);
                orthogonal(rows, cols, self.rng)
                    .into_iter()
                    .map(|v| v * gain)
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Var> {
        let v = self.make(shape, kind)?;
        let path = self.path(name);
        self.store.params.push((path, v.clone()));
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Var> {
        let v = self.make(shape, kind)?;
        let path = self.path(name);
        self.store.buffers.push((path, v.clone()));
        Ok(v)
    }
}

/// Row-major `rows x cols` matrix whose rows (if rows <= cols) or columns are orthonormal,
/// from modified Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (k, len) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}

/// Deterministic per-role seed stream: the same `(seed, role)` always yields the same
/// initialization regardless of what else is built.
pub fn role_rng(seed: u64, role: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
