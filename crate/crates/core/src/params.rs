//! Named parameter storage shared by the tokenizer and the transformer.
//!
//! Parameter values are kept in `f64` for computation but always hold values
//! exactly representable in `f32` (initialization and every optimizer step
//! round to single precision), so the 32-bit checkpoint format is lossless.

use rand::Rng;

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::tensor::{MatMut, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[inline]
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
        decay: bool,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter size mismatch");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value: value.into_iter().map(round_f32).collect(),
            decay,
        });
        id
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Rank-2 parameter as a matrix view.
    pub fn mat(&self, id: ParamId) -> MatRef<'_> {
        let p = &self.params[id.0];
        let (r, c) = match p.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => panic!("parameter {} is not a matrix", p.name),
        };
        MatRef::from_slice(&p.value, r, c)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self
                .params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                dims: p.shape.iter().map(|&d| d as u32).collect(),
                data: p.value.iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }

    /// Overwrite every parameter from checkpoint tensors of matching name and shape.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
            if dims != p.shape {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, dims, p.shape
                )));
            }
            p.value = t.data.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId, rows: usize, cols: usize) -> MatMut<'_> {
        MatMut::from_slice(&mut self.data[id.0], rows, cols)
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_are_f32_representable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = store.add_uniform("w", vec![4, 5], 4, &mut rng);
        for &v in store.value(id) {
            assert_eq!(v, v as f32 as f64);
            assert!(v.abs() <= 0.5);
        }
    }

    #[test]
    fn tensor_round_trip_restores_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store.add_uniform("a", vec![3, 2], 3, &mut rng);
        store.add("b", vec![2], vec![0.1, -0.2], false);
        let tensors = store.to_tensors();
        let mut other = store.clone();
        for p in other.params.iter_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_tensors(&tensors).unwrap();
        assert_eq!(other, store);
    }
}
