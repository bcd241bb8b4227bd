use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Named parameters in deterministic (lexicographic) order. Trainable
/// parameters receive gradients; buffers (e.g. batch-norm running
/// statistics) are updated in place by the forward pass.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    trainable: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, trainable: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if self.trainable.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Structure(format!("parameter {name} registered twice")));
        }
        Ok(())
    }

    pub fn add_trainable(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.check_new(name)?;
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.trainable.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.check_new(name)?;
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Uniform `U(-bound, bound)` initialization from the seeded generator.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut SeededRng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add_trainable(name, Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?;
        if trainable {
            self.add_trainable(name, t)
        } else {
            self.add_buffer(name, t)
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.trainable.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.trainable.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains_key(name)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.values().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor (trainable first, then buffers), each in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.trainable
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.trainable.len() + self.buffers.len();
        if values.len() != expected {
            return Err(Error::Structure(format!("expected {expected} tensors, got {}", values.len())));
        }
        for (name, var) in self.trainable.iter().chain(self.buffers.iter()) {
            let v = values.get(name).ok_or_else(|| Error::Structure(format!("missing tensor {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::Structure(format!("tensor {name}: shape {:?} != {:?}", v.dims(), var.dims())));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_matching_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.trainable.iter().chain(self.buffers.iter()) {
            let src = other.get(name).ok_or_else(|| Error::Structure(format!("source lacks {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Structure(format!("tensor {name}: shape {:?} != {:?}", src.dims(), var.dims())));
            }
            var.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of every tensor.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
