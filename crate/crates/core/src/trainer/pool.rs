//! Replay buffer of generated images shown to the discriminators.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub struct ImagePool {
    capacity: usize,
    rng: ChaCha8Rng,
    images: Vec<Tensor>,
}

/// What a checkpoint needs besides the stored images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub rng: ChaCha8Rng,
    pub len: usize,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ImagePool {
            capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per sample: while filling, store and return it; once full, with probability
    /// 1/2 return a stored image and keep the new one in its place.
    pub fn query(&mut self, batch: &Tensor) -> Result<Tensor> {
        let batch = batch.detach();
        if self.capacity == 0 {
            return Ok(batch);
        }
        let mut out = Vec::with_capacity(batch.dim(0)?);
        for i in 0..batch.dim(0)? {
            let img = batch.narrow(0, i, 1)?;
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if self.rng.gen::<f64>() < 0.5 {
                let k = self.rng.gen_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[k], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    pub fn export(&self, prefix: &str) -> (PoolState, Vec<(String, Tensor)>) {
        let tensors = self
            .images
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("{prefix}.{i}"), t.clone()))
            .collect();
        let state = PoolState {
            rng: self.rng.clone(),
            len: self.images.len(),
        };
        (state, tensors)
    }

    pub fn import(
        &mut self,
        prefix: &str,
        state: &PoolState,
        lookup: &dyn Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        let mut images = Vec::with_capacity(state.len);
        for i in 0..state.len {
            let key = format!("{prefix}.{i}");
            images.push(lookup(&key).ok_or_else(|| {
                crate::error::Error::SpecMismatch(format!("checkpoint lacks pool image `{key}`"))
            })?);
        }
        self.images = images;
        self.rng = state.rng.clone();
        Ok(())
    }
}
