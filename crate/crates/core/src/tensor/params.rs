use std::ops::Index;

use rand::Rng;

use super::array::NdArray;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<NdArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdArray] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn load_values(&mut self, named: Vec<(String, NdArray)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != self.names[i] || value.shape() != self.values[i].shape() {
                return Err(Error::contract(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    value.shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Rounds every value to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// The tape nodes a [`ParamSet`] was bound to.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradient per parameter, zeros where a parameter was unused.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> Vec<NdArray> {
        self.0
            .iter()
            .zip(params.values())
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Initial values for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
}

impl Init {
    pub(crate) fn build<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> NdArray {
        match self {
            Init::Zeros => NdArray::zeros(shape),
            Init::Normal(std) => NdArray::randn(shape, std, rng),
            Init::FanIn => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1);
                NdArray::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
            }
        }
    }
}

/// Affine map `x W + b` over the last dimension.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), init.build(&[in_dim, out_dim], rng));
        let bias = params.add(format!("{name}.bias"), NdArray::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        tape.add_bias(y, bound[self.bias])
    }
}

/// Broadcasts a `[1, h]` row to `[rows, h]` through an explicit
/// `ones[rows, 1] x v` product.
pub fn repeat_row(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    let ones = tape.constant(NdArray::ones(&[rows, 1]));
    tape.matmul(ones, v)
}
