//! Randomised property battery over the exact oracle.
//!
//! Each trial draws one random system (alphabet sizes uniform in
//! `min_size..=max_size`, full-support joint and kernels, random weights)
//! from its own derived seed, so any failing trial can be replayed from the
//! `worst_seed` recorded in the report.

use serde::Serialize;

use crate::finite_prob::{kld, push_forward, Conditioning, FiniteJoint, StochasticKernel, ZeroMassPolicy};
use crate::oracle::{
    alae_term, bibae_loss, bibae_loss_via_bound, eight_terms, preset_loss, saturation_check, turbo_direct,
    turbo_reverse, BoundKind, DiscretePreset, IbnWeights, OracleError, TurboSystem, TurboWeights,
};
use crate::rng::{derive_seed, Prng};

pub const BOUND_TOL: f64 = 1e-9;
pub const BIBAE_TOL: f64 = 1e-10;
pub const DECOMPOSITION_TOL: f64 = 1e-12;

/// Deliberate corruption used to check that the battery can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Replace the encoder with three times the true conditional before the
    /// bound-chain check. Rows then sum to 3, which lifts `B_direct_enc` by
    /// `2 log 3 > log 8 ≥ H(Z)` above `I(X; Z)`.
    InflatedEncoder,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub min_size: usize,
    pub max_size: usize,
    /// Perturbations per saturation check.
    pub perturbations: usize,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            min_size: 2,
            max_size: 8,
            perturbations: 100,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub tolerance: f64,
    /// Largest observed violation. For inequalities this is the signed
    /// excess (negative means slack); for identities the absolute gap.
    pub max_violation: f64,
    pub worst_trial: usize,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub perturbations: usize,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

struct Tracker {
    name: &'static str,
    tol: f64,
    max: f64,
    worst_trial: usize,
    worst_seed: u64,
    trials: usize,
}

impl Tracker {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            max: f64::NEG_INFINITY,
            worst_trial: 0,
            worst_seed: 0,
            trials: 0,
        }
    }

    fn record(&mut self, v: f64, trial: usize, seed: u64) {
        self.trials += 1;
        // NaN counts as the worst possible outcome
        if v.is_nan() || v > self.max {
            self.max = if v.is_nan() { f64::INFINITY } else { v };
            self.worst_trial = trial;
            self.worst_seed = seed;
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name.to_string(),
            passed: self.trials > 0 && self.max <= self.tol,
            trials: self.trials,
            tolerance: self.tol,
            max_violation: self.max,
            worst_trial: self.worst_trial,
            worst_seed: self.worst_seed,
        }
    }
}

/// One random system with weights, reproducible from `seed`.
pub fn random_trial(seed: u64, min_size: usize, max_size: usize) -> (TurboSystem, TurboWeights, IbnWeights) {
    let mut rng = Prng::new(seed);
    let span = max_size - min_size + 1;
    let n_x = min_size + rng.below(span);
    let n_z = min_size + rng.below(span);
    let sys = TurboSystem::random(&mut rng, n_x, n_z);
    let tw = TurboWeights {
        lambda_d: rng.uniform_range(0.0, 2.0),
        lambda_r: rng.uniform_range(0.0, 2.0),
        lambda_t: rng.uniform_range(0.0, 2.0),
    };
    let iw = IbnWeights {
        lambda_b: rng.uniform_range(0.0, 2.0),
        lambda_info: rng.uniform_range(-1.0, 2.0),
        lambda_s: rng.uniform_range(0.0, 2.0),
    };
    (sys, tw, iw)
}

fn inflate_encoder(sys: &TurboSystem) -> Result<TurboSystem, OracleError> {
    let truth = sys.joint().conditional(Conditioning::ZGivenX, ZeroMassPolicy::Uniform)?;
    let data: Vec<f64> = truth.rows().flatten().map(|v| 3.0 * v).collect();
    let bad = StochasticKernel::from_rows_unchecked(truth.n_in(), truth.n_out(), data);
    sys.with_enc(bad)
}

/// Same joint, permutation decoder; the only system FLOW accepts.
fn flow_system(sys: &TurboSystem, seed: u64) -> Result<TurboSystem, OracleError> {
    let n = sys.joint().n_x().min(sys.joint().n_z());
    let mut rng = Prng::new(seed);
    let joint = FiniteJoint::random(&mut rng, n, n);
    let perm = rng.permutation(n);
    let dec = StochasticKernel::permutation(&perm)?;
    let enc = StochasticKernel::random(&mut rng, n, n);
    TurboSystem::new(joint, enc, dec)
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport, OracleError> {
    if cfg.trials == 0 {
        return Err(OracleError::Inconsistent("trials must be at least 1".into()));
    }
    if cfg.min_size < 1 || cfg.min_size > cfg.max_size {
        return Err(OracleError::Inconsistent(format!(
            "invalid size range {}..={}",
            cfg.min_size, cfg.max_size
        )));
    }

    let mut bound_chain = Tracker::new("bound_chain", BOUND_TOL);
    let mut nonneg = Tracker::new("divergence_nonnegativity", 0.0);
    let mut bibae = Tracker::new("bibae_dual_form", BIBAE_TOL);
    let mut path_bounds = Tracker::new("path_bound_form", DECOMPOSITION_TOL);
    let mut transposition = Tracker::new("reverse_transposition", DECOMPOSITION_TOL);
    let mut presets = Tracker::new("preset_decomposition", DECOMPOSITION_TOL);
    let mut cyclegan = Tracker::new("cyclegan_original_form", DECOMPOSITION_TOL);
    let mut saturation: Vec<Tracker> = BoundKind::ALL
        .iter()
        .map(|b| {
            let name = match b {
                BoundKind::DirectEnc => "saturation_direct_enc",
                BoundKind::DirectDec => "saturation_direct_dec",
                BoundKind::ReverseDec => "saturation_reverse_dec",
                BoundKind::ReverseEnc => "saturation_reverse_enc",
            };
            Tracker::new(name, BOUND_TOL)
        })
        .collect();

    for trial in 0..cfg.trials {
        let seed = derive_seed(cfg.seed, 0, trial as u64);
        let (sys, tw, iw) = random_trial(seed, cfg.min_size, cfg.max_size);

        let chain_sys = match cfg.fault {
            Some(Fault::InflatedEncoder) => inflate_encoder(&sys)?,
            None => sys.clone(),
        };
        let tb = eight_terms(&chain_sys)?;
        bound_chain.record(tb.max_bound_violation(), trial, seed);
        let neg = [tb.d_zt, tb.d_xh, tb.d_xt, tb.d_zh].into_iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
        nonneg.record(neg, trial, seed);

        let tb = if cfg.fault.is_some() { eight_terms(&sys)? } else { tb };

        let a = bibae_loss(&sys, &iw)?;
        let b = bibae_loss_via_bound(&sys, &iw)?;
        bibae.record((a - b).abs(), trial, seed);

        let direct = turbo_direct(&sys, &tw)?;
        let reverse = turbo_reverse(&sys, &tw)?;
        let gap_d = (direct - (-tb.b_direct_enc - tw.lambda_d * tb.b_direct_dec)).abs();
        let gap_r = (reverse - (-tb.b_reverse_dec - tw.lambda_r * tb.b_reverse_enc)).abs();
        path_bounds.record(gap_d.max(gap_r), trial, seed);

        let mirrored_w = TurboWeights {
            lambda_d: tw.lambda_r,
            ..tw
        };
        let mirrored = turbo_direct(&sys.transposed(), &mirrored_w)?;
        transposition.record((reverse - mirrored).abs(), trial, seed);

        // signed sums written out from the breakdown fields
        let mut worst: f64 = 0.0;
        for preset in DiscretePreset::ALL {
            let (got, expected) = match preset {
                DiscretePreset::Aae => (preset_loss(&sys, preset, &tw)?, tb.d_zt + tw.lambda_d * tb.l_xh),
                DiscretePreset::Gan => (preset_loss(&sys, preset, &tw)?, tb.d_xt),
                DiscretePreset::Pix2pix => (preset_loss(&sys, preset, &tw)?, tb.l_xt + tb.d_xt),
                DiscretePreset::CycleGan => (
                    preset_loss(&sys, preset, &tw)?,
                    tb.d_zt + tw.lambda_d * tb.l_xh + tw.lambda_t * tb.d_xt + tw.lambda_t * tw.lambda_r * tb.l_zh,
                ),
                DiscretePreset::Alae => (preset_loss(&sys, preset, &tw)?, tb.l_zh + alae_term(&sys)?),
                DiscretePreset::Flow => {
                    let fs = flow_system(&sys, derive_seed(seed, 1, 0))?;
                    let (p_x, p_z) = fs.joint().marginals();
                    let d_xt = kld(&p_x, &push_forward(&p_z, fs.dec())?)?;
                    (preset_loss(&fs, preset, &tw)?, d_xt)
                }
            };
            worst = worst.max((got - expected).abs());
        }
        presets.record(worst, trial, seed);

        let lam = tw.lambda_d;
        let original = TurboWeights {
            lambda_d: lam,
            lambda_r: lam,
            lambda_t: 1.0,
        };
        let got = preset_loss(&sys, DiscretePreset::CycleGan, &original)?;
        let expected = tb.d_zt + lam * tb.l_xh + tb.d_xt + lam * tb.l_zh;
        cyclegan.record((got - expected).abs(), trial, seed);

        for (k, (which, tracker)) in BoundKind::ALL.iter().zip(saturation.iter_mut()).enumerate() {
            let r = saturation_check(sys.joint(), *which, cfg.perturbations, derive_seed(seed, 2 + k as u64, 0))?;
            tracker.record(r.identity_error().max(r.max_excess), trial, seed);
        }
    }

    let mut properties = vec![
        bound_chain.finish(),
        nonneg.finish(),
        bibae.finish(),
        path_bounds.finish(),
        transposition.finish(),
        presets.finish(),
        cyclegan.finish(),
    ];
    properties.extend(saturation.into_iter().map(Tracker::finish));
    let passed = properties.iter().all(|p| p.passed);
    Ok(VerifyReport {
        seed: cfg.seed,
        trials: cfg.trials,
        min_size: cfg.min_size,
        max_size: cfg.max_size,
        perturbations: cfg.perturbations,
        passed,
        properties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_battery_passes() {
        let r = run_verify(&VerifyConfig {
            trials: 30,
            perturbations: 20,
            ..Default::default()
        })
        .unwrap();
        for p in &r.properties {
            assert!(p.passed, "{p:?}");
        }
        assert!(r.passed);
    }

    #[test]
    fn fault_is_detected() {
        let r = run_verify(&VerifyConfig {
            trials: 5,
            perturbations: 4,
            fault: Some(Fault::InflatedEncoder),
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed);
        let names: Vec<_> = r.failed().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["bound_chain"]);
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = VerifyConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(run_verify(&cfg).is_err());
    }

    #[test]
    fn trials_are_replayable() {
        let a = random_trial(99, 2, 8);
        let b = random_trial(99, 2, 8);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
