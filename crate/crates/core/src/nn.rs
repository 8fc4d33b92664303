//! Dense feed-forward network with exact reverse-mode gradients.
//!
//! All parameters live in one contiguous `Vec<f64>`. Each layer occupies a
//! row-major weight block of shape `(out, in)` followed by its bias of length
//! `out`. Hidden layers use a rectifier; the final layer emits raw logits.
//! Because the storage is already flat, `flatten` is a copy and `unflatten`
//! is a length check.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            // subgradient 0 at exactly 0
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }
}

/// A dense network `f_θ(x)` producing raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    shapes: Vec<LayerShape>,
    /// Start of each layer's block in `params`.
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Gradients of a scalar loss with respect to parameters and input.
///
/// `params` uses the same layout as [`Model::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn check_chain(shapes: &[LayerShape]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Shape("model needs at least one layer".into()));
    }
    for (k, s) in shapes.iter().enumerate() {
        if s.inputs == 0 || s.outputs == 0 {
            return Err(Error::Shape(format!("layer {k} has a zero dimension")));
        }
    }
    for (k, pair) in shapes.windows(2).enumerate() {
        if pair[0].outputs != pair[1].inputs {
            return Err(Error::Shape(format!(
                "layer {k} emits {} values but layer {} expects {}",
                pair[0].outputs,
                k + 1,
                pair[1].inputs
            )));
        }
    }
    Ok(())
}

fn offsets_for(shapes: &[LayerShape]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut total = 0;
    for s in shapes {
        offsets.push(total);
        total += s.param_count();
    }
    (offsets, total)
}

/// Layer shapes for an MLP `dims[0] -> dims[1] -> ... -> dims[last]` with
/// rectified hidden layers and a linear output.
pub fn mlp_shapes(dims: &[usize]) -> Vec<LayerShape> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|k| LayerShape {
            inputs: dims[k],
            outputs: dims[k + 1],
            activation: if k + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            },
        })
        .collect()
}

impl Model {
    /// Builds a model from shapes and a flat parameter vector.
    pub fn from_parts(shapes: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        check_chain(&shapes)?;
        let (offsets, total) = offsets_for(&shapes);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            shapes,
            offsets,
            params,
        })
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self> {
        let (_, total) = offsets_for(&shapes);
        Self::from_parts(shapes, vec![0.0; total])
    }

    /// He-scaled Gaussian weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn he_init<R: Rng + ?Sized>(shapes: Vec<LayerShape>, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(shapes)?;
        for k in 0..model.shapes.len() {
            let s = model.shapes[k];
            let normal = Normal::new(0.0, (2.0 / s.inputs as f64).sqrt())
                .map_err(|e| Error::Numeric(e.to_string()))?;
            let off = model.offsets[k];
            for w in &mut model.params[off..off + s.outputs * s.inputs] {
                *w = normal.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// Rebuilds a model with this model's architecture from a flat vector.
    pub fn unflatten(&self, flat: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.shapes.clone(), flat)
    }

    /// `true` when both models have identical layer shapes.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.shapes == other.shapes
    }

    /// Row-major weights of layer `k`.
    pub fn weights(&self, k: usize) -> &[f64] {
        let s = self.shapes[k];
        let off = self.offsets[k];
        &self.params[off..off + s.outputs * s.inputs]
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        let s = self.shapes[k];
        let off = self.offsets[k] + s.outputs * s.inputs;
        &self.params[off..off + s.outputs]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw logits `f_θ(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        for k in 0..self.shapes.len() {
            let s = self.shapes[k];
            let w = self.weights(k);
            let b = self.bias(k);
            act = (0..s.outputs)
                .map(|o| {
                    let row = &w[o * s.inputs..(o + 1) * s.inputs];
                    s.activation.apply(dot(row, &act) + b[o])
                })
                .collect();
        }
        Ok(act)
    }

    /// Forward pass keeping every layer's input and pre-activation, for a
    /// later [`Model::backward_from`].
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(self.shapes.len());
        inputs.push(x.to_vec());
        for k in 0..self.shapes.len() {
            let s = self.shapes[k];
            let w = self.weights(k);
            let b = self.bias(k);
            let a = &inputs[k];
            let z: Vec<f64> = (0..s.outputs)
                .map(|o| dot(&w[o * s.inputs..(o + 1) * s.inputs], a) + b[o])
                .collect();
            inputs.push(z.iter().map(|&v| s.activation.apply(v)).collect());
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    fn check_dlogits(&self, dlogits: &[f64]) -> Result<()> {
        if dlogits.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, model emits {}",
                dlogits.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar loss whose logit-gradient is
    /// `dlogits`.
    pub fn backward(&self, x: &[f64], dlogits: &[f64]) -> Result<GradientBundle> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(x, dlogits, Some(&mut params))?;
        Ok(GradientBundle { params, input })
    }

    /// Like [`Model::backward`] but only the input gradient is produced.
    pub fn input_gradient(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>> {
        self.backward_into(x, dlogits, None)
    }

    /// Runs the backward pass, *adding* parameter gradients into `acc` when
    /// given. Returns the input gradient.
    pub fn backward_into(
        &self,
        x: &[f64],
        dlogits: &[f64],
        acc: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let trace = self.trace(x)?;
        self.backward_from(&trace, dlogits, acc)
    }

    /// Backward pass reusing a recorded forward [`Trace`].
    pub fn backward_from(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mut acc: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        self.check_dlogits(dlogits)?;
        if trace.pre.len() != self.shapes.len() || trace.inputs[0].len() != self.input_dim() {
            return Err(Error::Shape("trace was recorded on another architecture".into()));
        }
        if let Some(a) = acc.as_deref() {
            if a.len() != self.params.len() {
                return Err(Error::Shape("gradient accumulator length".into()));
            }
        }
        let (inputs, pre) = (&trace.inputs, &trace.pre);
        let mut delta: Vec<f64> = dlogits.to_vec();
        for k in (0..self.shapes.len()).rev() {
            let s = self.shapes[k];
            for (d, &z) in delta.iter_mut().zip(&pre[k]) {
                *d *= s.activation.derivative(z);
            }
            if let Some(a) = acc.as_deref_mut() {
                let off = self.offsets[k];
                let a_in = &inputs[k];
                for o in 0..s.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut a[off + o * s.inputs..off + (o + 1) * s.inputs];
                    for (g, &v) in row.iter_mut().zip(a_in) {
                        *g += d * v;
                    }
                }
                let boff = off + s.outputs * s.inputs;
                for (g, &d) in a[boff..boff + s.outputs].iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            let w = self.weights(k);
            let mut prev = vec![0.0; s.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * s.inputs..(o + 1) * s.inputs];
                for (p, &wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        &self.inputs[self.inputs.len() - 1]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Result<Self> {
        validate_optimizer(lr, momentum)?;
        Ok(Self {
            lr,
            momentum,
            velocity: vec![0.0; model.param_count()],
        })
    }
}

pub fn validate_optimizer(lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

/// Applies one momentum step in place. `grads` must already be averaged over
/// the mini-batch.
pub fn sgd_step(model: &mut Model, grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    validate_optimizer(state.lr, state.momentum)?;
    if grads.len() != model.param_count() || state.velocity.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "optimizer expects {} parameters, got gradient {} / buffer {}",
            model.param_count(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, v), &g) in model
        .params
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grads)
    {
        *v = state.momentum * *v + g;
        *p -= state.lr * *v;
    }
    Ok(())
}
