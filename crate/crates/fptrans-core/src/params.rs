//! Parameter storage shared by the encoder, the upsampler, and the token
//! pool. Parameters live outside any tape as plain buffers; each training
//! step binds them onto a fresh tape as leaves.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A named parameter's raw storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        ParamTensor {
            data: vec![1.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    return z * std;
                }
            })
            .collect();
        ParamTensor {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<TensorId> {
        tape.leaf(self.data.clone(), &self.shape, trainable)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Visitor over the named parameters of a model component. Names are
/// hierarchical (`vit.block0.attn.wq`) and enumeration order is fixed.
pub trait ParamGroup {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, _| out.push(name.to_string()));
        out
    }

    fn total_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }
}
