//! Parameterized building blocks: affine maps, layer norm, and the
//! two-layer GELU projector.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.add_normal(&format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = store.add_const(&format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_const(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// `linear → GELU → linear`, mapping `input` channels to `output` through
/// a hidden width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub first: Linear,
    pub second: Linear,
}

impl Projector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Projector {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, 1.0, rng)?,
            second: Linear::new(store, &format!("{name}.2"), hidden, output, 1.0, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.first.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.second.fan_out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.second.forward(tape, store, h)
    }
}
