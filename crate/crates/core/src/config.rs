//! Training run configuration (TOML).
//!
//! ```toml
//! [run]
//! preset = "TURBO_FULL"
//! seed = 7
//! steps = 4000
//!
//! [data]
//! family = "linear-gaussian"
//! a = [[0.8, 0.3], [-0.4, 0.7]]
//! b = [0.2, -0.1]
//! sigma = 0.1
//! sigma_z = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [adv.D_xt]
//! surrogate = "logistic_nonsaturating"
//! ```
//!
//! Every omitted field takes a default; [`TrainConfig::resolve`] fills
//! them all in so the echoed file is self-contained.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::OptimizerConfig;
use crate::data::DatasetSpec;
use crate::losses::{AdvConfig, ReconConfig, Surrogate};
use crate::nn::Activation;
use crate::oracle::TurboWeights;
use crate::preset::{PresetConfig, PresetKind, Space, TrainTerm};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub preset: PresetKind,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_log")]
    pub log_interval: usize,
    /// 0 disables checkpoints.
    #[serde(default = "d_ckpt")]
    pub checkpoint_interval: usize,
}

fn d_batch() -> usize {
    256
}
fn d_log() -> usize {
    100
}
fn d_ckpt() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Extra standard-normal inputs appended to the decoder input.
    #[serde(default)]
    pub noise_dim: usize,
    #[serde(default = "d_blocks")]
    pub flow_blocks: usize,
    #[serde(default = "d_flow_hidden")]
    pub flow_hidden: Vec<usize>,
    #[serde(default = "d_scale_bound")]
    pub flow_scale_bound: f64,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_blocks() -> usize {
    4
}
fn d_flow_hidden() -> Vec<usize> {
    vec![32]
}
fn d_scale_bound() -> f64 {
    2.0
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            activation: Activation::default(),
            noise_dim: 0,
            flow_blocks: d_blocks(),
            flow_hidden: d_flow_hidden(),
            flow_scale_bound: d_scale_bound(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_critic_act")]
    pub activation: Activation,
}

fn d_critic_act() -> Activation {
    Activation::Relu
}

impl Default for CriticSection {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            activation: d_critic_act(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "d_gen_lr")]
    pub gen_lr: f64,
    #[serde(default = "d_critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_gen_lr() -> f64 {
    1e-3
}
fn d_critic_lr() -> f64 {
    2e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            gen_lr: d_gen_lr(),
            critic_lr: d_critic_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

impl OptimSection {
    pub fn generator(&self) -> OptimizerConfig {
        self.adam(self.gen_lr)
    }

    pub fn critic(&self) -> OptimizerConfig {
        self.adam(self.critic_lr)
    }

    fn adam(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig::Adam {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Partial adversarial settings; omitted fields come from the preset's
/// surrogate defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<Surrogate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl AdvSection {
    fn resolve(&self, preset: PresetKind) -> AdvConfig {
        let mut c = AdvConfig::for_surrogate(self.surrogate.unwrap_or(preset.default_surrogate()));
        if let Some(s) = self.critic_steps {
            c.critic_steps = s;
        }
        if let Some(v) = self.clip {
            c.clip = v;
        }
        c
    }
}

impl From<AdvConfig> for AdvSection {
    fn from(c: AdvConfig) -> Self {
        Self {
            surrogate: Some(c.surrogate),
            critic_steps: Some(c.critic_steps),
            clip: Some(c.clip),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_eval_samples")]
    pub samples: usize,
    #[serde(default = "d_eval_seed")]
    pub seed: u64,
    /// Mode-coverage ball radius; defaults to three component std devs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_radius: Option<f64>,
}

fn d_eval_samples() -> usize {
    10_000
}
fn d_eval_seed() -> u64 {
    0x5eed_e7a1
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: d_eval_samples(),
            seed: d_eval_seed(),
            coverage_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    #[serde(default)]
    pub weights: TurboWeights,
    /// Term coefficients, read only by the `CUSTOM` preset.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub terms: BTreeMap<TrainTerm, f64>,
    pub data: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub critic: CriticSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub recon: BTreeMap<TrainTerm, ReconConfig>,
    #[serde(default)]
    pub adv: BTreeMap<TrainTerm, AdvSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// The preset's active terms with resolved surrogate settings.
    pub fn preset_config(&self) -> PresetConfig {
        let preset = self.run.preset;
        let coefficients = preset.coefficients(&self.weights, &self.terms);
        let mut recon = BTreeMap::new();
        let mut adv = BTreeMap::new();
        for (t, _) in &coefficients {
            if t.is_reconstruction() {
                recon.insert(*t, self.recon.get(t).copied().unwrap_or_default());
            }
            if t.critic_space().is_some() {
                adv.insert(*t, self.adv.get(t).copied().unwrap_or_default().resolve(preset));
            }
        }
        PresetConfig {
            preset,
            weights: self.weights,
            coefficients,
            recon,
            adv,
        }
    }

    /// Copy with every default written out.
    pub fn resolve(&self) -> Self {
        let pc = self.preset_config();
        let mut out = self.clone();
        out.recon = pc.recon.clone();
        out.adv = pc.adv.iter().map(|(t, a)| (*t, AdvSection::from(*a))).collect();
        if out.eval.coverage_radius.is_none() {
            if let DatasetSpec::GaussianRing { std, .. } = &self.data {
                out.eval.coverage_radius = Some(3.0 * std);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        if r.steps == 0 {
            return Err(field("run.steps", "must be at least 1"));
        }
        if r.batch_size == 0 {
            return Err(field("run.batch_size", "must be at least 1"));
        }
        if r.log_interval == 0 {
            return Err(field("run.log_interval", "must be at least 1"));
        }
        self.weights.validate().map_err(|e| field("weights", e.to_string()))?;
        if r.preset == PresetKind::Custom {
            if self.terms.is_empty() {
                return Err(field("terms", "CUSTOM preset needs at least one term"));
            }
            for (t, c) in &self.terms {
                if t.as_term().is_none() {
                    return Err(field(format!("terms.{t}"), "only the eight path terms may be used"));
                }
                if !c.is_finite() || *c < 0.0 {
                    return Err(field(format!("terms.{t}"), format!("coefficient must be finite and >= 0, got {c}")));
                }
            }
        } else if !self.terms.is_empty() {
            return Err(field("terms", format!("only allowed with preset CUSTOM, not {}", r.preset)));
        }
        self.data.validate().map_err(|e| field("data", e.to_string()))?;
        let (dx, dz) = self.data.dims();

        let m = &self.model;
        if m.hidden.is_empty() || m.hidden.contains(&0) {
            return Err(field("model.hidden", "needs at least one layer, all widths >= 1"));
        }
        if self.critic.hidden.is_empty() || self.critic.hidden.contains(&0) {
            return Err(field("critic.hidden", "needs at least one layer, all widths >= 1"));
        }
        if r.preset == PresetKind::Flow {
            if dx != dz {
                return Err(field("data", format!("FLOW needs equal data and latent widths, got {dx} and {dz}")));
            }
            if dx < 2 || dx % 2 != 0 {
                return Err(field("data", format!("FLOW needs an even width >= 2, got {dx}")));
            }
            if m.flow_blocks == 0 {
                return Err(field("model.flow_blocks", "must be at least 1"));
            }
            if m.flow_hidden.is_empty() || m.flow_hidden.contains(&0) {
                return Err(field("model.flow_hidden", "needs at least one layer, all widths >= 1"));
            }
            if !(m.flow_scale_bound > 0.0 && m.flow_scale_bound.is_finite()) {
                return Err(field("model.flow_scale_bound", "must be positive"));
            }
            if m.noise_dim != 0 {
                return Err(field("model.noise_dim", "FLOW is invertible and takes no extra noise"));
            }
        }

        let o = &self.optim;
        for (name, v) in [("optim.gen_lr", o.gen_lr), ("optim.critic_lr", o.critic_lr), ("optim.eps", o.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0, 1), got {v}")));
            }
        }

        let pc = self.preset_config();
        for t in self.recon.keys() {
            if !t.is_reconstruction() {
                return Err(field(format!("recon.{t}"), "not a reconstruction term"));
            }
        }
        for t in self.adv.keys() {
            if t.critic_space().is_none() {
                return Err(field(format!("adv.{t}"), "not an adversarial term"));
            }
        }
        for (t, c) in &pc.recon {
            c.validate().map_err(|e| field(format!("recon.{t}"), e))?;
        }
        for (t, c) in &pc.adv {
            c.validate().map_err(|e| field(format!("adv.{t}"), e))?;
        }
        // One critic per space: terms that share it must agree on its settings.
        for space in [Space::Latent, Space::Data] {
            let mut seen: Option<(TrainTerm, AdvConfig)> = None;
            for (t, c) in pc.adv.iter().filter(|(t, _)| t.critic_space() == Some(space)) {
                match seen {
                    Some((u, prev)) if prev != *c => {
                        return Err(field(
                            format!("adv.{t}"),
                            format!("shares the {space:?} critic with {u} but has different settings"),
                        ));
                    }
                    None => seen = Some((*t, *c)),
                    _ => {}
                }
            }
        }
        if r.preset == PresetKind::Gan || r.preset == PresetKind::Wgan {
            let want = r.preset.default_surrogate();
            if let Some(c) = pc.adv.get(&TrainTerm::Dxt) {
                if c.surrogate != want {
                    return Err(field("adv.D_xt.surrogate", format!("{} requires {want:?}", r.preset)));
                }
            }
        }
        if !self.data.paired() {
            if let Some(t) = pc.mask().into_iter().find(|t| t.needs_pairing()) {
                return Err(field("data.paired", format!("term {t} needs paired data")));
            }
        }
        if r.preset == PresetKind::VaeLike && m.noise_dim != 0 {
            return Err(field("model.noise_dim", "VAE_LIKE samples its latent and takes no extra noise"));
        }

        let e = &self.eval;
        if e.samples == 0 {
            return Err(field("eval.samples", "must be at least 1"));
        }
        if e.seed == r.seed {
            return Err(field("eval.seed", "must differ from run.seed"));
        }
        if let Some(v) = e.coverage_radius {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field("eval.coverage_radius", "must be positive"));
            }
        }
        Ok(())
    }
}
