use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Every weight of a model, addressable by name or position.
///
/// `trainable` entries are updated by the optimizer; `buffers` hold state
/// such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub trainable: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

impl ModelParams {
    pub fn push(&mut self, name: &str, value: Tensor) -> usize {
        self.trainable.push(NamedTensor { name: name.into(), value });
        self.trainable.len() - 1
    }

    pub fn push_buffer(&mut self, name: &str, value: Tensor) -> usize {
        self.buffers.push(NamedTensor { name: name.into(), value });
        self.buffers.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.trainable.iter().chain(&self.buffers).find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.trainable
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Total number of trainable scalars.
    pub fn flat_len(&self) -> usize {
        self.trainable.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.trainable.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            bail!(Shape, "flat vector of {} for {} parameters", flat.len(), self.flat_len());
        }
        let mut offset = 0;
        for p in &mut self.trainable {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Replaces values by name, requiring the same layout as `self`.
    pub fn load_from(&mut self, other: &ModelParams) -> Result<()> {
        for p in self.trainable.iter_mut().chain(self.buffers.iter_mut()) {
            let Some(src) = other.get(&p.name) else {
                bail!(Validation, "missing parameter {}", p.name);
            };
            if src.shape() != p.value.shape() {
                bail!(Shape, "parameter {} has shape {:?}, expected {:?}", p.name, src.shape(), p.value.shape());
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Seeded weight initializer.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `(-1/√fan_in, 1/√fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("initializer shape")
    }
}
