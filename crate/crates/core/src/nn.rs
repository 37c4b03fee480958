//! Network architectures: dense MLPs, scalar critics, and an affine coupling
//! flow. Parameters are plain `Vec<Tensor>` values; forward passes bind them
//! into a [`Graph`] as leaves.
//!
//! Dense layers store weights as `[d_in, d_out]` so that a batch `[B, d_in]`
//! maps through `x · W + b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::rng::Prng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[input, hidden.., output]`.
    pub widths: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    pub final_activation: Activation,
}

impl MlpSpec {
    /// Same activation on every hidden layer, identity output.
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Result<Self, NnError> {
        let n = widths.len().saturating_sub(2);
        let spec = Self {
            widths,
            activations: vec![hidden; n],
            final_activation: Activation::Identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.widths.len() < 3 {
            return Err(NnError::Spec(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(NnError::Spec(format!("zero width in {:?}", self.widths)));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(NnError::Spec(format!(
                "{} hidden layers but {} activations",
                self.widths.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Parameter shapes in storage order `W0, b0, W1, b1, ..`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

/// LeCun-style uniform bound `sqrt(3 / fan_in)`, giving weights of variance
/// `1 / fan_in`.
pub fn init_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Weights uniform in `±init_bound(fan_in)`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Vec<Tensor> {
    let mut rng = Prng::new(seed);
    spec.param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 2 {
                let b = init_bound(shape[0]);
                Tensor::from_fn(&shape, |_| rng.uniform_range(-b, b))
            } else {
                Tensor::zeros(&shape)
            }
        })
        .collect()
}

/// Binds parameter tensors into a graph, tracked or not.
pub fn bind(g: &mut Graph, params: &[Tensor], tracked: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if tracked { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect()
}

fn check_params(spec: &MlpSpec, g: &Graph, params: &[Var]) -> Result<(), NnError> {
    let shapes = spec.param_shapes();
    if shapes.len() != params.len() {
        return Err(NnError::Spec(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
    }
    for (s, p) in shapes.iter().zip(params) {
        if g.shape(*p) != s.as_slice() {
            return Err(NnError::Spec(format!("parameter shape {:?}, expected {s:?}", g.shape(*p))));
        }
    }
    Ok(())
}

pub fn mlp_forward(g: &mut Graph, spec: &MlpSpec, params: &[Var], input: Var) -> Result<Var, NnError> {
    check_params(spec, g, params)?;
    let shape = g.shape(input);
    if shape.len() != 2 || shape[1] != spec.d_in() {
        return Err(TensorError::Shape {
            op: "mlp_forward",
            detail: format!("input {:?}, expected [batch, {}]", shape, spec.d_in()),
        }
        .into());
    }
    let mut h = input;
    for layer in 0..spec.n_layers() {
        let w = params[2 * layer];
        let b = params[2 * layer + 1];
        let lin = g.matmul(h, w)?;
        h = g.add(lin, b)?;
        let act = if layer + 1 == spec.n_layers() {
            spec.final_activation
        } else {
            spec.activations[layer]
        };
        h = act.apply(g, h);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Logit output, trained as a real/fake classifier.
    Logistic,
    /// Raw score with weights clamped to `[-clip, clip]` after each step.
    Clipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub mlp: MlpSpec,
    pub mode: CriticMode,
    pub clip: f64,
}

impl CriticSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        self.mlp.validate()?;
        if self.mlp.d_out() != 1 {
            return Err(NnError::Spec(format!("critic output width must be 1, got {}", self.mlp.d_out())));
        }
        if self.mode == CriticMode::Clipped && !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(NnError::Spec(format!("clip bound must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// One score per row, shape `[batch]`.
pub fn critic_forward(g: &mut Graph, spec: &CriticSpec, params: &[Var], input: Var) -> Result<Var, NnError> {
    let out = mlp_forward(g, &spec.mlp, params, input)?;
    Ok(g.sum_axis(out, 1)?)
}

/// Clamps every critic parameter into `[-clip, clip]`.
pub fn clip_params(params: &mut [Tensor], clip: f64) {
    for p in params {
        for v in p.data_mut() {
            *v = v.clamp(-clip, clip);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlowSpec {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Log-scales are `scale_bound · tanh(raw)`.
    pub scale_bound: f64,
}

impl CouplingFlowSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(NnError::Spec(format!("flow dimension must be even and ≥ 2, got {}", self.dim)));
        }
        if self.blocks == 0 {
            return Err(NnError::Spec("flow needs at least one coupling block".into()));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound.is_finite()) {
            return Err(NnError::Spec(format!("scale_bound must be positive, got {}", self.scale_bound)));
        }
        self.conditioner().validate()
    }

    /// Conditioner for one block: `d/2 -> hidden -> d`, emitting the raw
    /// log-scale for the transformed half followed by its shift.
    pub fn conditioner(&self) -> MlpSpec {
        let half = self.dim / 2;
        let mut widths = vec![half];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        MlpSpec {
            activations: vec![self.activation; widths.len().saturating_sub(2)],
            widths,
            final_activation: Activation::Identity,
        }
    }

    pub fn params_per_block(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let one = self.conditioner().param_shapes();
        (0..self.blocks).flat_map(|_| one.clone()).collect()
    }
}

/// Hidden layers as [`init_params`]; every output layer zero, so a fresh
/// flow is the identity map.
pub fn init_flow_params(spec: &CouplingFlowSpec, seed: u64) -> Vec<Tensor> {
    let cond = spec.conditioner();
    let mut out = Vec::new();
    for b in 0..spec.blocks {
        let mut p = init_params(&cond, crate::rng::derive_seed(seed, 0x666c6f77, b as u64));
        let n = p.len();
        p[n - 2] = Tensor::zeros(p[n - 2].shape());
        out.extend(p);
    }
    out
}

/// Halves for block `k`: `(conditioning offset, transformed offset)`.
fn halves(spec: &CouplingFlowSpec, block: usize) -> (usize, usize) {
    let half = spec.dim / 2;
    if block.is_multiple_of(2) {
        (0, half)
    } else {
        (half, 0)
    }
}

/// `(s, t)` for one block given the conditioning half.
fn block_st(g: &mut Graph, spec: &CouplingFlowSpec, params: &[Var], cond_in: Var) -> Result<(Var, Var), NnError> {
    let half = spec.dim / 2;
    let h = mlp_forward(g, &spec.conditioner(), params, cond_in)?;
    let raw = g.slice(h, 1, 0, half)?;
    let t = g.slice(h, 1, half, half)?;
    let th = g.tanh(raw);
    let s = g.scale(th, spec.scale_bound);
    Ok((s, t))
}

fn check_flow(spec: &CouplingFlowSpec, g: &Graph, params: &[Var], input: Var) -> Result<(), NnError> {
    let expected = spec.blocks * spec.params_per_block();
    if params.len() != expected {
        return Err(NnError::Spec(format!("flow expects {expected} parameter tensors, got {}", params.len())));
    }
    let shape = g.shape(input);
    if shape.len() != 2 || shape[1] != spec.dim {
        return Err(TensorError::Shape {
            op: "coupling",
            detail: format!("input {:?}, expected [batch, {}]", shape, spec.dim),
        }
        .into());
    }
    Ok(())
}

fn assemble(g: &mut Graph, first: Var, second: Var, cond_off: usize) -> Result<Var, NnError> {
    let parts = if cond_off == 0 { [first, second] } else { [second, first] };
    Ok(g.concat(&parts, 1)?)
}

/// Latent to data. Returns `(x, log_det)` with `log_det` of shape `[batch]`.
pub fn coupling_forward(g: &mut Graph, spec: &CouplingFlowSpec, params: &[Var], z: Var) -> Result<(Var, Var), NnError> {
    check_flow(spec, g, params, z)?;
    let half = spec.dim / 2;
    let per = spec.params_per_block();
    let mut h = z;
    let mut log_det: Option<Var> = None;
    for b in 0..spec.blocks {
        let (ca, cb) = halves(spec, b);
        let a = g.slice(h, 1, ca, half)?;
        let xb = g.slice(h, 1, cb, half)?;
        let (s, t) = block_st(g, spec, &params[b * per..(b + 1) * per], a)?;
        let es = g.exp(s)?;
        let scaled = g.mul(xb, es)?;
        let yb = g.add(scaled, t)?;
        h = assemble(g, a, yb, ca)?;
        let ld = g.sum_axis(s, 1)?;
        log_det = Some(match log_det {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        });
    }
    Ok((h, log_det.expect("at least one block")))
}

/// Data to latent. Returns `(z, log_det_inverse)`.
pub fn coupling_inverse(g: &mut Graph, spec: &CouplingFlowSpec, params: &[Var], x: Var) -> Result<(Var, Var), NnError> {
    check_flow(spec, g, params, x)?;
    let half = spec.dim / 2;
    let per = spec.params_per_block();
    let mut h = x;
    let mut log_det: Option<Var> = None;
    for b in (0..spec.blocks).rev() {
        let (ca, cb) = halves(spec, b);
        let a = g.slice(h, 1, ca, half)?;
        let yb = g.slice(h, 1, cb, half)?;
        let (s, t) = block_st(g, spec, &params[b * per..(b + 1) * per], a)?;
        let shifted = g.sub(yb, t)?;
        let neg_s = g.neg(s);
        let es = g.exp(neg_s)?;
        let zb = g.mul(shifted, es)?;
        h = assemble(g, a, zb, ca)?;
        let ld = g.sum_axis(neg_s, 1)?;
        log_det = Some(match log_det {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        });
    }
    Ok((h, log_det.expect("at least one block")))
}
