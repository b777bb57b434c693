//! Named parameter storage with deterministic ordering and init.

use indexmap::IndexMap;

use crate::container::Fnv1a;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// One named parameter: value, accumulated gradient, freeze flag.
#[derive(Debug, Clone)]
pub struct ParamTensor<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
}

/// Ordered name -> parameter map. Iteration order is insertion order, which
/// makes checksums and checkpoints reproducible for a fixed seed.
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, ParamTensor<S>>,
    pub rng_seed: u64,
    rng: SeededRng,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(rng_seed: u64) -> ParamStore<S> {
        ParamStore {
            params: IndexMap::new(),
            rng_seed,
            rng: SeededRng::new(SeededRng::derive(rng_seed, "param-init")),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.dims().to_vec());
        self.params.insert(
            name.to_string(),
            ParamTensor {
                name: name.to_string(),
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    /// Register a weight initialized U(-bound, +bound) from the store's RNG.
    pub fn init_uniform(&mut self, name: &str, dims: Vec<usize>, bound: f64) -> Result<()> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(self.rng.range(-bound, bound)))
            .collect();
        self.add(name, Tensor::new(dims, data)?, true)
    }

    pub fn init_const(&mut self, name: &str, dims: Vec<usize>, value: f64) -> Result<()> {
        self.add(name, Tensor::full(dims, S::from_f64(value)), true)
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<S>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<S>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    /// Add `delta` into the stored gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<S>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.dims() != delta.dims() {
            return Err(Error::Shape(format!(
                "grad dims {:?} != param dims {:?} for {name:?}",
                delta.dims(),
                p.grad.dims()
            )));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g = S::zero();
            }
        }
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.values_mut() {
            if p.name.starts_with(prefix) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    /// Clamp every element of `name` into [lo, hi].
    pub fn clamp_param(&mut self, name: &str, lo: f64, hi: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        for v in p.value.data_mut() {
            let x = v.to_f64();
            *v = S::from_f64(x.clamp(lo, hi));
        }
        Ok(())
    }

    /// FNV-1a over names, dims and raw value bytes, in insertion order.
    pub fn checksum(&self) -> u64 {
        self.checksum_filtered(|_| true)
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        self.checksum_filtered(|name| name.starts_with(prefix))
    }

    fn checksum_filtered(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h = Fnv1a::new();
        for p in self.params.values() {
            if !keep(&p.name) {
                continue;
            }
            h.update(p.name.as_bytes());
            for &d in p.value.dims() {
                h.update(&(d as u64).to_le_bytes());
            }
            h.update(&p.value.payload_bytes());
        }
        h.finish()
    }
}
