//! Named parameter tensors and matching gradient buffers.

use rand::Rng;

use crate::error::{Error, Result};

/// A named tensor of single-precision parameters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ParamSet { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    #[inline]
    pub fn data(&self, index: usize) -> &[f32] {
        &self.tensors[index].data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Fills every tensor uniformly in `[-scale, scale]`.
    pub fn init_uniform(&mut self, scale: f32, rng: &mut impl Rng) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }

    /// Checks that `other` has the same tensor names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::dimension(
                "parameter tensor count",
                self.tensors.len(),
                other.tensors.len(),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::dimension(
                    "parameter tensor",
                    format!("{} {:?}", a.name, a.shape),
                    format!("{} {:?}", b.name, b.shape),
                ));
            }
        }
        Ok(())
    }
}

/// Double-precision gradient buffers laid out like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    buffers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            buffers: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    #[inline]
    pub fn buf_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.buffers[index]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.buffers
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.buffers.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers.iter().flatten().copied().collect()
    }
}
