//! Training loop for all presets.
//!
//! Each step first updates every critic, then takes one Adam step on the
//! joint encoder/decoder parameters against the weighted sum of active
//! terms. All randomness at step `k` is drawn from
//! `derive_seed(seed, stream, k)`, so a run resumed from a checkpoint
//! replays the same trajectory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Optimizer, Tensor, TensorError, Var};
use crate::checkpoint::{checkpoint_path, latest_checkpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{sample, DataError, PairedBatch};
use crate::losses::{adv_loss_critic, adv_loss_generator, flow_nll, gaussian_kld_standard, recon_loss, AdvConfig, Surrogate};
use crate::metrics::{evaluate_run, MetricsRecord};
use crate::nn::{
    bind, clip_params, coupling_forward, coupling_inverse, init_flow_params, init_params, mlp_forward, CouplingFlowSpec,
    CriticMode, CriticSpec, MlpSpec, NnError,
};
use crate::preset::{PresetConfig, PresetKind, Space, TrainTerm};
use crate::rng::{derive_seed, Prng};

pub const STREAM_BATCH: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_EPS: u64 = 3;
/// Critic iteration `j > 0` draws its batch from stream `STREAM_CRITIC_BATCH + j`.
pub const STREAM_CRITIC_BATCH: u64 = 10;
const STREAM_CRITIC_NOISE: u64 = 1000;
const STREAM_INIT: u64 = 77;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {term} = {value} at step {step}")]
    NonFinite { step: usize, term: String, value: f64 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Network shapes for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dx: usize,
    pub dz: usize,
    pub enc: Option<MlpSpec>,
    pub dec: Option<MlpSpec>,
    /// Set for FLOW: `dec` is the flow and `enc` its exact inverse.
    pub flow: Option<CouplingFlowSpec>,
    /// Encoder emits `[mean, log-variance]` and samples its latent.
    pub variational: bool,
    pub noise_dim: usize,
}

impl Model {
    pub fn has_encoder(&self) -> bool {
        self.enc.is_some() || self.flow.is_some()
    }

    pub fn has_decoder(&self) -> bool {
        self.dec.is_some() || self.flow.is_some()
    }

    fn n_enc_params(&self) -> usize {
        self.enc.as_ref().map_or(0, |s| s.param_shapes().len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub space: Space,
    pub spec: CriticSpec,
    pub adv: AdvConfig,
    pub params: Vec<Tensor>,
    pub opt: Optimizer,
}

/// Losses at one step. `terms` holds unweighted values; `direct`,
/// `reverse` and `total` are weighted sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub terms: BTreeMap<TrainTerm, f64>,
    pub direct: f64,
    pub reverse: f64,
    pub total: f64,
    pub critic_latent: Option<f64>,
    pub critic_data: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Resolved config.
    pub config: TrainConfig,
    pub preset: PresetConfig,
    pub model: Model,
    pub step: usize,
    /// Encoder parameters followed by decoder parameters, or the flow's.
    pub gen: Vec<Tensor>,
    pub gen_opt: Optimizer,
    pub critics: Vec<CriticState>,
    pub history: Vec<StepRecord>,
}

impl RunState {
    pub fn critic(&self, space: Space) -> Option<&CriticState> {
        self.critics.iter().find(|c| c.space == space)
    }

    pub fn encoder_params(&self) -> &[Tensor] {
        &self.gen[..self.model.n_enc_params()]
    }

    pub fn decoder_params(&self) -> &[Tensor] {
        &self.gen[self.model.n_enc_params()..]
    }
}

/// Initialised networks and optimizers for a config.
pub fn build_run(config: &TrainConfig) -> Result<RunState, TrainError> {
    config.validate()?;
    let config = config.resolve();
    let preset = config.preset_config();
    let (dx, dz) = config.data.dims();
    let m = &config.model;
    let seed = config.run.seed;
    let init_seed = |i| derive_seed(seed, STREAM_INIT, i);

    let mut gen = Vec::new();
    let model = if preset.preset == PresetKind::Flow {
        let spec = CouplingFlowSpec {
            dim: dx,
            blocks: m.flow_blocks,
            hidden: m.flow_hidden.clone(),
            activation: m.activation,
            scale_bound: m.flow_scale_bound,
        };
        spec.validate()?;
        gen.extend(init_flow_params(&spec, init_seed(0)));
        Model {
            dx,
            dz,
            enc: None,
            dec: None,
            flow: Some(spec),
            variational: false,
            noise_dim: 0,
        }
    } else {
        let variational = preset.preset == PresetKind::VaeLike;
        let widths = |d_in: usize, d_out: usize| {
            let mut w = vec![d_in];
            w.extend(&m.hidden);
            w.push(d_out);
            w
        };
        let enc = if preset.needs_encoder() {
            let out = if variational { 2 * dz } else { dz };
            Some(MlpSpec::new(widths(dx, out), m.activation)?)
        } else {
            None
        };
        let dec = if preset.needs_decoder() {
            Some(MlpSpec::new(widths(dz + m.noise_dim, dx), m.activation)?)
        } else {
            None
        };
        if let Some(s) = &enc {
            gen.extend(init_params(s, init_seed(1)));
        }
        if let Some(s) = &dec {
            gen.extend(init_params(s, init_seed(2)));
        }
        Model {
            dx,
            dz,
            enc,
            dec,
            flow: None,
            variational,
            noise_dim: m.noise_dim,
        }
    };

    let mut critics = Vec::new();
    for (i, space) in [Space::Latent, Space::Data].into_iter().enumerate() {
        if !preset.needs_critic(space) {
            continue;
        }
        let adv = preset.critic_adv(space).expect("active adversarial term has settings");
        let d_in = if space == Space::Latent { dz } else { dx };
        let mut w = vec![d_in];
        w.extend(&config.critic.hidden);
        w.push(1);
        let spec = CriticSpec {
            mlp: MlpSpec::new(w, config.critic.activation)?,
            mode: match adv.surrogate {
                Surrogate::LogisticNonsaturating => CriticMode::Logistic,
                Surrogate::WassersteinClipped => CriticMode::Clipped,
            },
            clip: adv.clip,
        };
        spec.validate()?;
        let mut params = init_params(&spec.mlp, init_seed(3 + i as u64));
        if spec.mode == CriticMode::Clipped {
            clip_params(&mut params, spec.clip);
        }
        let opt = Optimizer::new(config.optim.critic(), &params);
        critics.push(CriticState {
            space,
            spec,
            adv,
            params,
            opt,
        });
    }

    let gen_opt = Optimizer::new(config.optim.generator(), &gen);
    Ok(RunState {
        config,
        preset,
        model,
        step: 0,
        gen,
        gen_opt,
        critics,
        history: Vec::new(),
    })
}

/// Random sources for one forward pass.
pub struct Draws {
    pub noise: Prng,
    pub eps: Prng,
}

impl Draws {
    pub fn new(noise_seed: u64, eps_seed: u64) -> Self {
        Self {
            noise: Prng::new(noise_seed),
            eps: Prng::new(eps_seed),
        }
    }
}

fn normal_tensor(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.normal())
}

/// Encoder and decoder bound into one graph.
pub struct GenView<'a> {
    pub model: &'a Model,
    pub params: &'a [Var],
}

/// Output of the encoder: the latent, plus `(mean, log-variance)` when
/// the encoder is variational.
pub struct Encoded {
    pub z: Var,
    pub stats: Option<(Var, Var)>,
}

impl GenView<'_> {
    pub fn encode(&self, g: &mut Graph, x: Var, draws: &mut Draws) -> Result<Encoded, TrainError> {
        let m = self.model;
        if let Some(flow) = &m.flow {
            let (z, _) = coupling_inverse(g, flow, self.params, x)?;
            return Ok(Encoded { z, stats: None });
        }
        let spec = m.enc.as_ref().ok_or_else(|| TrainError::Invalid("no encoder in this preset".into()))?;
        let out = mlp_forward(g, spec, &self.params[..m.n_enc_params()], x)?;
        if !m.variational {
            return Ok(Encoded { z: out, stats: None });
        }
        let rows = g.shape(out)[0];
        let mu = g.slice(out, 1, 0, m.dz)?;
        let logvar = g.slice(out, 1, m.dz, m.dz)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half)?;
        let eps = g.constant(normal_tensor(&mut draws.eps, rows, m.dz));
        let spread = g.mul(std, eps)?;
        let z = g.add(mu, spread)?;
        Ok(Encoded {
            z,
            stats: Some((mu, logvar)),
        })
    }

    pub fn decode(&self, g: &mut Graph, z: Var, draws: &mut Draws) -> Result<Var, TrainError> {
        let m = self.model;
        if let Some(flow) = &m.flow {
            return Ok(coupling_forward(g, flow, self.params, z)?.0);
        }
        let spec = m.dec.as_ref().ok_or_else(|| TrainError::Invalid("no decoder in this preset".into()))?;
        let input = if m.noise_dim > 0 {
            let rows = g.shape(z)[0];
            let n = g.constant(normal_tensor(&mut draws.noise, rows, m.noise_dim));
            g.concat(&[z, n], 1)?
        } else {
            z
        };
        Ok(mlp_forward(g, spec, &self.params[m.n_enc_params()..], input)?)
    }
}

/// Lazily built direct (`x → z̃ → x̂`) and reverse (`z → x̃ → ẑ`) paths.
struct Paths {
    x: Var,
    z: Var,
    z_tilde: Option<Encoded>,
    x_hat: Option<Var>,
    x_tilde: Option<Var>,
    z_hat: Option<Var>,
}

impl Paths {
    fn new(x: Var, z: Var) -> Self {
        Self {
            x,
            z,
            z_tilde: None,
            x_hat: None,
            x_tilde: None,
            z_hat: None,
        }
    }

    fn z_tilde(&mut self, v: &GenView, g: &mut Graph, d: &mut Draws) -> Result<Var, TrainError> {
        if self.z_tilde.is_none() {
            self.z_tilde = Some(v.encode(g, self.x, d)?);
        }
        Ok(self.z_tilde.as_ref().unwrap().z)
    }

    fn x_hat(&mut self, v: &GenView, g: &mut Graph, d: &mut Draws) -> Result<Var, TrainError> {
        if self.x_hat.is_none() {
            let zt = self.z_tilde(v, g, d)?;
            self.x_hat = Some(v.decode(g, zt, d)?);
        }
        Ok(self.x_hat.unwrap())
    }

    fn x_tilde(&mut self, v: &GenView, g: &mut Graph, d: &mut Draws) -> Result<Var, TrainError> {
        if self.x_tilde.is_none() {
            self.x_tilde = Some(v.decode(g, self.z, d)?);
        }
        Ok(self.x_tilde.unwrap())
    }

    fn z_hat(&mut self, v: &GenView, g: &mut Graph, d: &mut Draws) -> Result<Var, TrainError> {
        if self.z_hat.is_none() {
            let xt = self.x_tilde(v, g, d)?;
            self.z_hat = Some(v.encode(g, xt, d)?.z);
        }
        Ok(self.z_hat.unwrap())
    }

    /// `(real, fake)` samples the critic compares for an adversarial term.
    fn adversarial_pair(&mut self, t: TrainTerm, v: &GenView, g: &mut Graph, d: &mut Draws) -> Result<(Var, Var), TrainError> {
        Ok(match t {
            TrainTerm::Dzt => (self.z, self.z_tilde(v, g, d)?),
            TrainTerm::Dzh => (self.z, self.z_hat(v, g, d)?),
            TrainTerm::Alae => {
                let real = self.z_tilde(v, g, d)?;
                let real = g.detach(real);
                (real, self.z_hat(v, g, d)?)
            }
            TrainTerm::Dxh => (self.x, self.x_hat(v, g, d)?),
            TrainTerm::Dxt => (self.x, self.x_tilde(v, g, d)?),
            other => return Err(TrainError::Invalid(format!("{other} has no critic"))),
        })
    }
}

/// Builds every active term and their weighted sum. `critics` holds the
/// bound critic parameters in the order of `state.critics`.
pub fn composite_loss(
    g: &mut Graph,
    state: &RunState,
    gen: &[Var],
    critics: &[Vec<Var>],
    x: Var,
    z: Var,
    draws: &mut Draws,
) -> Result<(Var, Vec<(TrainTerm, Var)>), TrainError> {
    let view = GenView {
        model: &state.model,
        params: gen,
    };
    let pc = &state.preset;
    let mut p = Paths::new(x, z);
    let mut terms = Vec::new();
    for &(t, _) in &pc.coefficients {
        let loss = match t {
            TrainTerm::Lzt => {
                let out = p.z_tilde(&view, g, draws)?;
                recon_loss(g, &pc.recon[&t], z, out)?
            }
            TrainTerm::Lxh => {
                let out = p.x_hat(&view, g, draws)?;
                recon_loss(g, &pc.recon[&t], x, out)?
            }
            TrainTerm::Lxt => {
                let out = p.x_tilde(&view, g, draws)?;
                recon_loss(g, &pc.recon[&t], x, out)?
            }
            TrainTerm::Lzh => {
                let out = p.z_hat(&view, g, draws)?;
                recon_loss(g, &pc.recon[&t], z, out)?
            }
            TrainTerm::Dxt if state.model.flow.is_some() => {
                flow_nll(g, state.model.flow.as_ref().unwrap(), gen, x)?
            }
            TrainTerm::VaeKld => {
                p.z_tilde(&view, g, draws)?;
                let (mu, logvar) = p.z_tilde.as_ref().unwrap().stats.expect("variational encoder");
                gaussian_kld_standard(g, mu, logvar)?
            }
            _ => {
                let space = t.critic_space().expect("adversarial term");
                let i = state
                    .critics
                    .iter()
                    .position(|c| c.space == space)
                    .ok_or_else(|| TrainError::Invalid(format!("no critic for {t}")))?;
                let c = &state.critics[i];
                let (_, fake) = p.adversarial_pair(t, &view, g, draws)?;
                adv_loss_generator(g, &c.adv, &c.spec, &critics[i], fake)?
            }
        };
        terms.push((t, loss));
    }
    let mut total: Option<Var> = None;
    for &(t, loss) in &terms {
        let w = g.scale(loss, pc.coefficient(t));
        total = Some(match total {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    Ok((total.expect("at least one term"), terms))
}

fn critic_loss(
    g: &mut Graph,
    state: &RunState,
    index: usize,
    params: &[Var],
    batch: &PairedBatch,
    draws: &mut Draws,
) -> Result<Var, TrainError> {
    let gen = bind(g, &state.gen, false);
    let view = GenView {
        model: &state.model,
        params: &gen,
    };
    let c = &state.critics[index];
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let mut p = Paths::new(x, z);
    let mut parts = Vec::new();
    for t in state.preset.mask() {
        if t.critic_space() != Some(c.space) {
            continue;
        }
        let (real, fake) = p.adversarial_pair(t, &view, g, draws)?;
        parts.push(adv_loss_critic(g, &c.adv, &c.spec, params, real, fake)?);
    }
    let n = parts.len() as f64;
    let mut acc = parts[0];
    for &v in &parts[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / n))
}

fn guard(step: usize, term: &str, value: f64) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            step,
            term: term.to_string(),
            value,
        })
    }
}

/// Batch for step `k` (1-based).
pub fn step_batch(state: &RunState, k: usize) -> Result<PairedBatch, TrainError> {
    let c = &state.config;
    Ok(sample(&c.data, c.run.batch_size, derive_seed(c.run.seed, STREAM_BATCH, k as u64))?)
}

/// One critic phase and one generator update on `batch`.
pub fn train_step_on(state: &mut RunState, batch: &PairedBatch) -> Result<StepRecord, TrainError> {
    let (dx, dz) = (state.model.dx, state.model.dz);
    if batch.x.shape().len() != 2 || batch.x.cols() != dx || batch.z.cols() != dz || batch.x.rows() != batch.z.rows() {
        return Err(TrainError::Invalid(format!(
            "batch shapes x {:?}, z {:?} do not match widths {dx}, {dz}",
            batch.x.shape(),
            batch.z.shape()
        )));
    }
    let k = state.step + 1;
    let seed = state.config.run.seed;
    let mut critic_losses = [None, None];

    for i in 0..state.critics.len() {
        let space = state.critics[i].space;
        let slot = if space == Space::Latent { 0 } else { 1 };
        for j in 0..state.critics[i].adv.critic_steps {
            let extra;
            let b = if j == 0 {
                batch
            } else {
                extra = sample(
                    &state.config.data,
                    state.config.run.batch_size,
                    derive_seed(seed, STREAM_CRITIC_BATCH + j as u64, k as u64),
                )?;
                &extra
            };
            let stream = STREAM_CRITIC_NOISE + 100 * slot as u64 + j as u64;
            let mut draws = Draws::new(derive_seed(seed, stream, k as u64), derive_seed(seed, stream + 50, k as u64));
            let mut g = Graph::new();
            let params = bind(&mut g, &state.critics[i].params, true);
            let loss = critic_loss(&mut g, state, i, &params, b, &mut draws)?;
            let name = if slot == 0 { "critic_latent" } else { "critic_data" };
            critic_losses[slot] = Some(guard(k, name, g.value(loss).item())?);
            let grads = g.backward(loss)?;
            let c = &mut state.critics[i];
            let gs: Vec<Tensor> = params.iter().zip(&c.params).map(|(v, p)| grads.get_or_zeros(*v, p.shape())).collect();
            c.opt.step(&mut c.params, &gs)?;
            if c.spec.mode == CriticMode::Clipped {
                clip_params(&mut c.params, c.spec.clip);
            }
        }
    }

    let mut g = Graph::new();
    let gen = bind(&mut g, &state.gen, true);
    let critics: Vec<Vec<Var>> = state.critics.iter().map(|c| bind(&mut g, &c.params, false)).collect();
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let mut draws = Draws::new(derive_seed(seed, STREAM_NOISE, k as u64), derive_seed(seed, STREAM_EPS, k as u64));
    let (total, terms) = composite_loss(&mut g, state, &gen, &critics, x, z, &mut draws)?;

    let mut record = StepRecord {
        step: k,
        terms: BTreeMap::new(),
        direct: 0.0,
        reverse: 0.0,
        total: 0.0,
        critic_latent: critic_losses[0],
        critic_data: critic_losses[1],
    };
    for &(t, v) in &terms {
        let value = guard(k, t.name(), g.value(v).item())?;
        record.terms.insert(t, value);
        let w = state.preset.coefficient(t) * value;
        if t.is_direct() {
            record.direct += w;
        } else {
            record.reverse += w;
        }
    }
    record.total = guard(k, "total", g.value(total).item())?;

    let grads = g.backward(total)?;
    let gs: Vec<Tensor> = gen.iter().zip(&state.gen).map(|(v, p)| grads.get_or_zeros(*v, p.shape())).collect();
    for (i, t) in gs.iter().enumerate() {
        if !t.is_finite() {
            return Err(TrainError::NonFinite {
                step: k,
                term: format!("gradient of generator tensor {i}"),
                value: f64::NAN,
            });
        }
    }
    state.gen_opt.step(&mut state.gen, &gs)?;
    state.step = k;
    Ok(record)
}

/// One step on the step's own fresh batch.
pub fn train_step(state: &mut RunState) -> Result<StepRecord, TrainError> {
    let batch = step_batch(state, state.step + 1)?;
    train_step_on(state, &batch)
}

fn should_log(state: &RunState, k: usize) -> bool {
    k == 1 || k.is_multiple_of(state.config.run.log_interval) || k == state.config.run.steps
}

/// `steps` more steps in memory, appending logged records to the history.
pub fn train(state: &mut RunState, steps: usize) -> Result<(), TrainError> {
    if steps == 0 {
        return Err(TrainError::Invalid("steps must be at least 1".into()));
    }
    for _ in 0..steps {
        let r = train_step(state)?;
        if should_log(state, r.step) {
            state.history.push(r);
        }
    }
    Ok(())
}

pub fn checkpoint(state: &RunState) -> Checkpoint {
    let mut ck = Checkpoint::new(state.step);
    let put_opt = |ck: &mut Checkpoint, name: &str, params: &[Tensor], opt: &Optimizer| {
        ck.insert(name, params.to_vec());
        ck.insert(&format!("{name}.m"), opt.m.clone());
        ck.insert(&format!("{name}.v"), opt.v.clone());
        ck.insert(&format!("{name}.t"), vec![Tensor::scalar(opt.t as f64)]);
    };
    put_opt(&mut ck, "gen", &state.gen, &state.gen_opt);
    for c in &state.critics {
        put_opt(&mut ck, &format!("critic_{}", space_name(c.space)), &c.params, &c.opt);
    }
    ck
}

fn space_name(s: Space) -> &'static str {
    match s {
        Space::Latent => "latent",
        Space::Data => "data",
    }
}

fn restore_into(mut ck: Checkpoint, state: &mut RunState) -> Result<(), TrainError> {
    fn take(ck: &mut Checkpoint, name: &str, like: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, u64), TrainError> {
        let params = ck.take(name)?;
        let m = ck.take(&format!("{name}.m"))?;
        let v = ck.take(&format!("{name}.v"))?;
        let t = ck.take(&format!("{name}.t"))?;
        let same = |a: &[Tensor]| a.len() == like.len() && a.iter().zip(like).all(|(a, b)| a.shape() == b.shape());
        if !same(&params) || (!m.is_empty() && !same(&m)) || (!v.is_empty() && !same(&v)) || t.len() != 1 {
            return Err(TrainError::Invalid(format!("checkpoint group '{name}' does not match the model")));
        }
        Ok((params, m, v, t[0].item() as u64))
    }
    let (p, m, v, t) = take(&mut ck, "gen", &state.gen)?;
    state.gen = p;
    state.gen_opt.m = m;
    state.gen_opt.v = v;
    state.gen_opt.t = t;
    for c in &mut state.critics {
        let (p, m, v, t) = take(&mut ck, &format!("critic_{}", space_name(c.space)), &c.params)?;
        c.params = p;
        c.opt.m = m;
        c.opt.v = v;
        c.opt.t = t;
    }
    state.step = ck.step;
    Ok(())
}

/// Rebuilds the run from its config and loads checkpointed tensors.
pub fn restore(config: &TrainConfig, ck: Checkpoint) -> Result<RunState, TrainError> {
    let mut state = build_run(config)?;
    restore_into(ck, &mut state)?;
    Ok(state)
}

const TAIL_COLUMNS: [&str; 5] = ["direct", "reverse", "total", "critic_latent", "critic_data"];

pub fn metrics_header() -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend(TrainTerm::ALL.iter().map(|t| t.name().to_string()));
    cols.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
    cols.join(",")
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn metrics_row(r: &StepRecord) -> String {
    let mut s = r.step.to_string();
    for t in TrainTerm::ALL {
        write!(s, ",{}", cell(r.terms.get(&t).copied())).unwrap();
    }
    for v in [Some(r.direct), Some(r.reverse), Some(r.total), r.critic_latent, r.critic_data] {
        write!(s, ",{}", cell(v)).unwrap();
    }
    s
}

/// Parses a metrics file written by [`train_run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
    if header.join(",") != metrics_header() {
        return Err(io_err(path, "unexpected metrics header"));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| io_err(path, e))?;
        let num = |i: usize| -> Result<Option<f64>, TrainError> {
            let s = row.get(i).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| io_err(path, format!("bad value '{s}'")))
            }
        };
        let step = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| io_err(path, "bad step"))?;
        let mut terms = BTreeMap::new();
        for (i, t) in TrainTerm::ALL.iter().enumerate() {
            if let Some(v) = num(1 + i)? {
                terms.insert(*t, v);
            }
        }
        let base = 1 + TrainTerm::ALL.len();
        out.push(StepRecord {
            step,
            terms,
            direct: num(base)?.unwrap_or(0.0),
            reverse: num(base + 1)?.unwrap_or(0.0),
            total: num(base + 2)?.unwrap_or(0.0),
            critic_latent: num(base + 3)?,
            critic_data: num(base + 4)?,
        });
    }
    Ok(out)
}

fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<(), TrainError> {
    let mut s = metrics_header();
    s.push('\n');
    for r in records {
        s.push_str(&metrics_row(r));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this global step even if the config asks for more.
    pub max_steps: Option<usize>,
    /// Allow writing into a non-empty directory.
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: PresetKind,
    pub family: String,
    pub seed: u64,
    pub steps: usize,
    pub paired: bool,
    pub last: Option<StepRecord>,
    #[serde(rename = "final")]
    pub final_metrics: MetricsRecord,
    pub baseline: MetricsRecord,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: RunState,
    /// Set when the configured step count was reached.
    pub summary: Option<RunSummary>,
    pub dir: PathBuf,
}

/// Trains into a run directory: echoes the resolved config, appends to
/// `metrics.csv`, writes checkpoints, and on completion writes
/// `eval.json` and `summary.json`.
pub fn train_run(config: Option<&TrainConfig>, dir: &Path, opts: &RunOptions) -> Result<RunOutcome, TrainError> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let metrics_path = dir.join(METRICS_FILE);
    let mut state = if opts.resume {
        let echoed = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        if let Some(c) = config {
            if c.resolve() != echoed {
                return Err(TrainError::Invalid(format!(
                    "config differs from the one recorded in {}",
                    dir.join(CONFIG_FILE).display()
                )));
            }
        }
        let mut state = match latest_checkpoint(&ckpt_dir) {
            Some((_, path)) => restore(&echoed, Checkpoint::load(&path)?)?,
            None => build_run(&echoed)?,
        };
        let kept: Vec<StepRecord> = if metrics_path.exists() {
            read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= state.step).collect()
        } else {
            Vec::new()
        };
        write_metrics(&metrics_path, &kept)?;
        state.history = kept;
        state
    } else {
        let config = config.ok_or_else(|| TrainError::Invalid("a config is required unless resuming".into()))?;
        if dir.exists() {
            let non_empty = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
            if non_empty && !opts.overwrite {
                return Err(io_err(dir, "output directory is not empty (pass --overwrite to reuse it)"));
            }
            if non_empty {
                for name in [METRICS_FILE, CONFIG_FILE, EVAL_FILE, SUMMARY_FILE] {
                    let _ = std::fs::remove_file(dir.join(name));
                }
                let _ = std::fs::remove_dir_all(&ckpt_dir);
            }
        }
        let state = build_run(config)?;
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cpath = dir.join(CONFIG_FILE);
        std::fs::write(&cpath, state.config.to_toml()).map_err(|e| io_err(&cpath, e))?;
        write_metrics(&metrics_path, &[])?;
        state
    };
    let interval = state.config.run.checkpoint_interval;
    if interval > 0 {
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    }

    let target = opts.max_steps.map_or(state.config.run.steps, |m| m.min(state.config.run.steps));
    let mut log = OpenOptions::new().append(true).open(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    while state.step < target {
        let r = train_step(&mut state)?;
        if should_log(&state, r.step) {
            writeln!(log, "{}", metrics_row(&r)).map_err(|e| io_err(&metrics_path, e))?;
            state.history.push(r);
        }
        let at_interval = interval > 0 && state.step % interval == 0;
        if at_interval || (state.step == target && target < state.config.run.steps) {
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
            checkpoint(&state).save(&checkpoint_path(&ckpt_dir, state.step))?;
        }
    }
    drop(log);

    let summary = if state.step >= state.config.run.steps {
        let summary = summarize(&state)?;
        write_json(&dir.join(EVAL_FILE), &summary.final_metrics)?;
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        Some(summary)
    } else {
        None
    };
    Ok(RunOutcome {
        state,
        summary,
        dir: dir.to_path_buf(),
    })
}

/// Final metrics plus the same metrics at the untrained initialisation.
pub fn summarize(state: &RunState) -> Result<RunSummary, TrainError> {
    let c = &state.config;
    let final_metrics = evaluate_run(state, &c.eval)?;
    let baseline = evaluate_run(&build_run(c)?, &c.eval)?;
    Ok(RunSummary {
        preset: c.run.preset,
        family: c.data.family_name().to_string(),
        seed: c.run.seed,
        steps: state.step,
        paired: c.data.paired(),
        last: state.history.last().cloned(),
        final_metrics,
        baseline,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Reads `summary.json` from a finished run directory.
pub fn load_summary(dir: &Path) -> Result<RunSummary, TrainError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

/// Loads the run in `dir` at its latest checkpoint, or at initialisation
/// if none exists.
pub fn load_run(dir: &Path) -> Result<RunState, TrainError> {
    if !dir.is_dir() {
        return Err(io_err(dir, "run directory does not exist"));
    }
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    match latest_checkpoint(&dir.join(CHECKPOINT_DIR)) {
        Some((_, path)) => restore(&config, Checkpoint::load(&path)?),
        None => build_run(&config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(preset: &str, extra: &str) -> TrainConfig {
        TrainConfig::from_toml(&format!(
            r#"
[run]
preset = "{preset}"
steps = 5
batch_size = 32
log_interval = 1
checkpoint_interval = 2

[data]
family = "linear-gaussian"
a = [[0.8, 0.3], [-0.4, 0.7]]
b = [0.2, -0.1]
sigma = 0.3
sigma_z = [[1.0, 0.0], [0.0, 1.0]]

[model]
hidden = [8]

[critic]
hidden = [8]

[eval]
samples = 200
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn components_follow_the_mask() {
        let s = build_run(&cfg("AAE", "")).unwrap();
        assert!(s.model.has_encoder() && s.model.has_decoder());
        assert_eq!(s.critics.len(), 1);
        assert_eq!(s.critics[0].space, Space::Latent);

        let s = build_run(&cfg("GAN", "")).unwrap();
        assert!(!s.model.has_encoder());
        assert_eq!(s.critics.iter().map(|c| c.space).collect::<Vec<_>>(), vec![Space::Data]);

        let s = build_run(&cfg("TURBO_FULL", "")).unwrap();
        assert!(s.model.has_encoder() && s.model.has_decoder());
        assert_eq!(s.critics.len(), 2);

        let s = build_run(&cfg("FLOW", "")).unwrap();
        assert!(s.model.flow.is_some() && s.critics.is_empty());
    }

    #[test]
    fn every_preset_takes_finite_steps() {
        for p in PresetKind::ALL {
            let extra = if p == PresetKind::Custom { "[terms]\nL_xh = 1.0\nD_zh = 0.5" } else { "" };
            let mut s = build_run(&cfg(p.name(), extra)).unwrap();
            train(&mut s, 3).unwrap();
            let r = s.history.last().unwrap();
            assert_eq!(r.step, 3);
            assert!(r.total.is_finite(), "{p}");
            assert_eq!(r.terms.len(), s.preset.coefficients.len(), "{p}");
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let mut s = build_run(&cfg("AAE", "")).unwrap();
        assert!(train(&mut s, 0).is_err());
    }

    #[test]
    fn checkpoint_restores_exactly() {
        let c = cfg("TURBO_FULL", "");
        let mut a = build_run(&c).unwrap();
        train(&mut a, 2).unwrap();
        let ck = Checkpoint::parse(&checkpoint(&a).to_text()).unwrap();
        let mut b = restore(&c, ck).unwrap();
        b.history = a.history.clone();
        assert_eq!(a, b);
        train(&mut a, 2).unwrap();
        train(&mut b, 2).unwrap();
        assert_eq!(a.gen, b.gen);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn metrics_rows_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = build_run(&cfg("CYCLEGAN", "")).unwrap();
        train(&mut s, 3).unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &s.history).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), s.history);
    }
}
