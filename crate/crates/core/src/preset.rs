//! Named weight configurations for the trainable objective.
//!
//! Each preset is a signed selection of surrogate terms. The coefficients
//! mirror the discrete [`crate::oracle::DiscretePreset`] definitions; the
//! full objective uses the direct path plus `λ_T` times the reverse path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::{AdvConfig, ReconConfig, Surrogate};
use crate::oracle::{Term, TurboWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PresetKind {
    #[serde(rename = "AAE")]
    Aae,
    #[serde(rename = "GAN")]
    Gan,
    #[serde(rename = "WGAN")]
    Wgan,
    #[serde(rename = "PIX2PIX")]
    Pix2pix,
    #[serde(rename = "CYCLEGAN")]
    CycleGan,
    #[serde(rename = "FLOW")]
    Flow,
    #[serde(rename = "ALAE")]
    Alae,
    #[serde(rename = "TURBO_FULL")]
    TurboFull,
    #[serde(rename = "VAE_LIKE")]
    VaeLike,
    #[serde(rename = "CUSTOM")]
    Custom,
}

impl PresetKind {
    pub const ALL: [PresetKind; 10] = [
        Self::Aae,
        Self::Gan,
        Self::Wgan,
        Self::Pix2pix,
        Self::CycleGan,
        Self::Flow,
        Self::Alae,
        Self::TurboFull,
        Self::VaeLike,
        Self::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Aae => "AAE",
            Self::Gan => "GAN",
            Self::Wgan => "WGAN",
            Self::Pix2pix => "PIX2PIX",
            Self::CycleGan => "CYCLEGAN",
            Self::Flow => "FLOW",
            Self::Alae => "ALAE",
            Self::TurboFull => "TURBO_FULL",
            Self::VaeLike => "VAE_LIKE",
            Self::Custom => "CUSTOM",
        }
    }

    pub fn default_surrogate(self) -> Surrogate {
        match self {
            Self::Wgan => Surrogate::WassersteinClipped,
            _ => Surrogate::LogisticNonsaturating,
        }
    }

    /// Signed term coefficients. `custom` is only read for `CUSTOM`.
    pub fn coefficients(self, w: &TurboWeights, custom: &BTreeMap<TrainTerm, f64>) -> Vec<(TrainTerm, f64)> {
        use TrainTerm::*;
        let mut v = match self {
            Self::Aae => vec![(Dzt, 1.0), (Lxh, w.lambda_d)],
            Self::Gan | Self::Wgan | Self::Flow => vec![(Dxt, 1.0)],
            Self::Pix2pix => vec![(Lxt, 1.0), (Dxt, 1.0)],
            Self::CycleGan => vec![
                (Dzt, 1.0),
                (Lxh, w.lambda_d),
                (Dxt, w.lambda_t),
                (Lzh, w.lambda_t * w.lambda_r),
            ],
            Self::Alae => vec![(Lzh, 1.0), (Alae, 1.0)],
            Self::TurboFull => vec![
                (Lzt, 1.0),
                (Dzt, 1.0),
                (Lxh, w.lambda_d),
                (Dxh, w.lambda_d),
                (Lxt, w.lambda_t),
                (Dxt, w.lambda_t),
                (Lzh, w.lambda_t * w.lambda_r),
                (Dzh, w.lambda_t * w.lambda_r),
            ],
            Self::VaeLike => vec![(VaeKld, 1.0), (Lxh, w.lambda_d)],
            Self::Custom => custom.iter().map(|(t, c)| (*t, *c)).collect(),
        };
        v.sort_by_key(|(t, _)| *t);
        v
    }
}

impl fmt::Display for PresetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PresetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset '{s}'"))
    }
}

/// A trainable loss term: one of the eight, the latent-marginal
/// adversarial term of ALAE, or the closed-form Gaussian prior KLD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrainTerm {
    Lzt,
    Dzt,
    Lxh,
    Dxh,
    Lxt,
    Dxt,
    Lzh,
    Dzh,
    Alae,
    VaeKld,
}

/// Which marginal a critic compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Latent,
    Data,
}

impl TrainTerm {
    pub const ALL: [TrainTerm; 10] = [
        Self::Lzt,
        Self::Dzt,
        Self::Lxh,
        Self::Dxh,
        Self::Lxt,
        Self::Dxt,
        Self::Lzh,
        Self::Dzh,
        Self::Alae,
        Self::VaeKld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Alae => "alae",
            Self::VaeKld => "vae_kld",
            t => t.as_term().expect("one of the eight").name(),
        }
    }

    pub fn as_term(self) -> Option<Term> {
        Some(match self {
            Self::Lzt => Term::Lzt,
            Self::Dzt => Term::Dzt,
            Self::Lxh => Term::Lxh,
            Self::Dxh => Term::Dxh,
            Self::Lxt => Term::Lxt,
            Self::Dxt => Term::Dxt,
            Self::Lzh => Term::Lzh,
            Self::Dzh => Term::Dzh,
            Self::Alae | Self::VaeKld => return None,
        })
    }

    pub fn from_term(t: Term) -> Self {
        match t {
            Term::Lzt => Self::Lzt,
            Term::Dzt => Self::Dzt,
            Term::Lxh => Self::Lxh,
            Term::Dxh => Self::Dxh,
            Term::Lxt => Self::Lxt,
            Term::Dxt => Self::Dxt,
            Term::Lzh => Self::Lzh,
            Term::Dzh => Self::Dzh,
        }
    }

    pub fn is_reconstruction(self) -> bool {
        matches!(self, Self::Lzt | Self::Lxh | Self::Lxt | Self::Lzh)
    }

    pub fn needs_pairing(self) -> bool {
        matches!(self, Self::Lzt | Self::Lxt)
    }

    pub fn critic_space(self) -> Option<Space> {
        match self {
            Self::Dzt | Self::Dzh | Self::Alae => Some(Space::Latent),
            Self::Dxh | Self::Dxt => Some(Space::Data),
            _ => None,
        }
    }

    /// Direct-path terms start from real `x`; the rest start from real `z`.
    pub fn is_direct(self) -> bool {
        matches!(self, Self::Lzt | Self::Dzt | Self::Lxh | Self::Dxh | Self::VaeKld)
    }

    pub fn needs_encoder(self) -> bool {
        !matches!(self, Self::Lxt | Self::Dxt)
    }

    pub fn needs_decoder(self) -> bool {
        !matches!(self, Self::Lzt | Self::Dzt)
    }
}

impl fmt::Display for TrainTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainTerm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown loss term '{s}'"))
    }
}

impl TryFrom<String> for TrainTerm {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TrainTerm> for String {
    fn from(t: TrainTerm) -> String {
        t.name().to_string()
    }
}

/// Resolved preset: active terms with coefficients and per-term surrogate
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetConfig {
    pub preset: PresetKind,
    pub weights: TurboWeights,
    pub coefficients: Vec<(TrainTerm, f64)>,
    pub recon: BTreeMap<TrainTerm, ReconConfig>,
    pub adv: BTreeMap<TrainTerm, AdvConfig>,
}

impl PresetConfig {
    pub fn mask(&self) -> Vec<TrainTerm> {
        self.coefficients.iter().map(|(t, _)| *t).collect()
    }

    pub fn is_active(&self, t: TrainTerm) -> bool {
        self.coefficients.iter().any(|(u, _)| *u == t)
    }

    pub fn coefficient(&self, t: TrainTerm) -> f64 {
        self.coefficients.iter().find(|(u, _)| *u == t).map_or(0.0, |(_, c)| *c)
    }

    pub fn needs_encoder(&self) -> bool {
        self.preset != PresetKind::Flow && self.mask().iter().any(|t| t.needs_encoder())
    }

    pub fn needs_decoder(&self) -> bool {
        self.mask().iter().any(|t| t.needs_decoder())
    }

    /// A critic is built for each space that some active adversarial
    /// term compares; the flow preset uses its exact likelihood instead.
    pub fn needs_critic(&self, space: Space) -> bool {
        self.preset != PresetKind::Flow && self.mask().iter().any(|t| t.critic_space() == Some(space))
    }

    /// Settings of the critic for `space`, taken from its first active term.
    pub fn critic_adv(&self, space: Space) -> Option<AdvConfig> {
        self.mask()
            .into_iter()
            .filter(|t| t.critic_space() == Some(space))
            .find_map(|t| self.adv.get(&t).copied())
    }
}
