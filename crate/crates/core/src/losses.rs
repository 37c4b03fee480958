//! Differentiable surrogates for the eight loss terms.
//!
//! Reconstruction terms assume exponential deviations, so `-log p(x|z)`
//! becomes `α ‖x̂ - x‖_p^p` up to a dropped normalising constant.
//! Divergence terms are replaced by a critic: either a logistic real/fake
//! classifier (density-ratio estimate) or a weight-clipped Wasserstein
//! critic. Neither surrogate keeps the forward-KL asymmetry of the exact
//! terms; only the discrete oracle computes the forward divergence itself.
//! The flow likelihood is exact.
//!
//! Constants dropped per surrogate:
//!
//! | surrogate | dropped |
//! |---|---|
//! | reconstruction | normaliser `C` of the exponential family |
//! | flow NLL | the data entropy `H(X)` (NLL = `D_xt + H(X)`) |
//! | logistic critic | none in the loss; the KLD is only estimated |

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorError, Var};
use crate::nn::{coupling_inverse, critic_forward, CouplingFlowSpec, CriticSpec, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default)]
    pub norm: Norm,
    #[serde(default = "one")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            norm: Norm::L2,
            alpha: 1.0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    #[default]
    LogisticNonsaturating,
    WassersteinClipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvConfig {
    pub surrogate: Surrogate,
    pub critic_steps: usize,
    pub clip: f64,
}

impl AdvConfig {
    /// Defaults per surrogate: one critic step for the logistic classifier,
    /// five for the clipped critic with bound 0.01.
    pub fn for_surrogate(surrogate: Surrogate) -> Self {
        match surrogate {
            Surrogate::LogisticNonsaturating => Self {
                surrogate,
                critic_steps: 1,
                clip: 0.01,
            },
            Surrogate::WassersteinClipped => Self {
                surrogate,
                critic_steps: 5,
                clip: 0.01,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.critic_steps == 0 {
            return Err("critic_steps must be at least 1".into());
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(format!("clip must be positive, got {}", self.clip));
        }
        Ok(())
    }
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self::for_surrogate(Surrogate::LogisticNonsaturating)
    }
}

/// `α · mean_batch ‖output - target‖_p^p`.
pub fn recon_loss(g: &mut Graph, cfg: &ReconConfig, target: Var, output: Var) -> Result<Var, TensorError> {
    let (ts, os) = (g.shape(target).to_vec(), g.shape(output).to_vec());
    if ts != os || ts.len() != 2 {
        return Err(TensorError::Shape {
            op: "recon_loss",
            detail: format!("target {ts:?} vs output {os:?}"),
        });
    }
    let diff = g.sub(output, target)?;
    let per = match cfg.norm {
        Norm::L2 => g.square(diff),
        Norm::L1 => g.abs(diff),
    };
    let total = g.sum(per);
    Ok(g.scale(total, cfg.alpha / ts[0] as f64))
}

/// Critic objective from precomputed scores.
pub fn critic_loss_from_scores(g: &mut Graph, surrogate: Surrogate, real: Var, fake: Var) -> Result<Var, TensorError> {
    match surrogate {
        Surrogate::LogisticNonsaturating => {
            // -log σ(s) = softplus(-s), -log(1 - σ(s)) = softplus(s)
            let nr = g.neg(real);
            let lr = g.softplus(nr);
            let lf = g.softplus(fake);
            let mr = g.mean(lr);
            let mf = g.mean(lf);
            let s = g.add(mr, mf)?;
            Ok(g.scale(s, 0.5))
        }
        Surrogate::WassersteinClipped => {
            let mr = g.mean(real);
            let mf = g.mean(fake);
            g.sub(mf, mr)
        }
    }
}

/// Generator objective from precomputed scores on fakes.
pub fn generator_loss_from_scores(g: &mut Graph, surrogate: Surrogate, fake: Var) -> Var {
    match surrogate {
        Surrogate::LogisticNonsaturating => {
            let nf = g.neg(fake);
            let l = g.softplus(nf);
            g.mean(l)
        }
        Surrogate::WassersteinClipped => {
            let m = g.mean(fake);
            g.neg(m)
        }
    }
}

fn check_widths(g: &Graph, a: Var, b: Var) -> Result<(), TensorError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(TensorError::Shape {
            op: "adv_loss",
            detail: format!("real {sa:?} vs fake {sb:?}"),
        });
    }
    Ok(())
}

/// Minimised in the critic parameters.
pub fn adv_loss_critic(
    g: &mut Graph,
    cfg: &AdvConfig,
    critic: &CriticSpec,
    params: &[Var],
    real: Var,
    fake: Var,
) -> Result<Var, NnError> {
    check_widths(g, real, fake)?;
    let sr = critic_forward(g, critic, params, real)?;
    let sf = critic_forward(g, critic, params, fake)?;
    Ok(critic_loss_from_scores(g, cfg.surrogate, sr, sf)?)
}

/// Minimised in the generator parameters. Pass the critic parameters as
/// constants so no gradient reaches them.
pub fn adv_loss_generator(
    g: &mut Graph,
    cfg: &AdvConfig,
    critic: &CriticSpec,
    params: &[Var],
    fake: Var,
) -> Result<Var, NnError> {
    let sf = critic_forward(g, critic, params, fake)?;
    Ok(generator_loss_from_scores(g, cfg.surrogate, sf))
}

/// `0.5 · d · log(2π)`.
pub fn gaussian_log_norm(d: usize) -> f64 {
    0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Mean negative log-likelihood of `x` under the flow with a standard
/// normal base.
pub fn flow_nll(g: &mut Graph, spec: &CouplingFlowSpec, params: &[Var], x: Var) -> Result<Var, NnError> {
    let (z, ldi) = coupling_inverse(g, spec, params, x)?;
    let sq = g.square(z);
    let half_sq = g.sum_axis(sq, 1)?;
    let base = g.affine(half_sq, 0.5, gaussian_log_norm(spec.dim));
    let per = g.sub(base, ldi)?;
    Ok(g.mean(per))
}

/// Closed-form `mean_batch KL(N(μ, diag e^{logvar}) ‖ N(0, I))`.
pub fn gaussian_kld_standard(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var, TensorError> {
    let rows = g.shape(mu)[0] as f64;
    let mu2 = g.square(mu);
    let var = g.exp(logvar)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b);
    // Σ(μ² + σ² - logσ² - 1) / 2 per row
    let d = g.shape(mu).iter().product::<usize>() as f64;
    let shifted = g.affine(s, 1.0, -d);
    Ok(g.scale(shifted, 0.5 / rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, Tensor};
    use crate::nn::{bind, init_flow_params, Activation};
    use crate::rng::Prng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn recon_examples() {
        let cfg = ReconConfig::default();
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let l = recon_loss(&mut g, &cfg, t, t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let a = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let l = recon_loss(&mut g, &cfg, a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let bad = g.constant(Tensor::zeros(&[1, 2]));
        assert!(recon_loss(&mut g, &cfg, a, bad).is_err());
    }

    #[test]
    fn recon_gradient_closed_form() {
        let mut rng = Prng::new(3);
        let alpha = 0.7;
        let cfg = ReconConfig { norm: Norm::L2, alpha };
        let target = Tensor::from_fn(&[4, 3], |_| rng.normal());
        let output = Tensor::from_fn(&[4, 3], |_| rng.normal());
        let r = check_gradients(&[output.clone()], 1e-5, |g, v| {
            let t = g.constant(target.clone());
            recon_loss(g, &cfg, t, v[0])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4);
        for ((a, o), t) in r.analytic[0].data().iter().zip(output.data()).zip(target.data()) {
            assert!((a - 2.0 * alpha * (o - t) / 4.0).abs() < 1e-14);
        }

        let l1 = ReconConfig { norm: Norm::L1, alpha };
        let r = check_gradients(&[output], 1e-5, |g, v| {
            let t = g.constant(target.clone());
            recon_loss(g, &l1, t, v[0])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn uninformative_critic_is_log2() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[5]));
        let l = critic_loss_from_scores(&mut g, Surrogate::LogisticNonsaturating, zeros, zeros).unwrap();
        assert!((g.value(l).item() - LN2).abs() < 1e-15);

        let s = g.constant(Tensor::from_fn(&[5], |i| i as f64));
        let l = critic_loss_from_scores(&mut g, Surrogate::WassersteinClipped, s, s).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn generator_examples() {
        let mut g = Graph::new();
        // probability 1 on fakes: logits → +inf
        let sure = g.constant(Tensor::full(&[4], 800.0));
        let l = generator_loss_from_scores(&mut g, Surrogate::LogisticNonsaturating, sure);
        assert_eq!(g.value(l).item(), 0.0);
        let zero = g.constant(Tensor::zeros(&[4]));
        let l = generator_loss_from_scores(&mut g, Surrogate::WassersteinClipped, zero);
        assert_eq!(g.value(l).item(), 0.0);
    }

    /// Two real atoms at 0 and 1 with masses 0.8 / 0.2, fakes uniform over
    /// the same atoms. The optimal discriminator is `p_r / (p_r + p_f)`.
    #[test]
    fn optimal_discriminator_two_point_toy() {
        let p_real = [0.8f64, 0.2];
        let p_fake = [0.5f64, 0.5];
        let logit = |k: usize| (p_real[k] / p_fake[k]).ln();
        let loss_with = |n_at_0: usize, n: usize| {
            let scores: Vec<f64> = (0..n).map(|i| if i < n_at_0 { logit(0) } else { logit(1) }).collect();
            let mut g = Graph::new();
            let s = g.constant(Tensor::new(vec![n], scores).unwrap());
            let l = generator_loss_from_scores(&mut g, Surrogate::LogisticNonsaturating, s);
            g.value(l).item()
        };
        let n = 10;
        for k in 0..n {
            // moving one fake toward the denser real atom lowers the loss
            assert!(loss_with(k + 1, n) < loss_with(k, n));
        }
        let expected = 0.5 * (1.0 + (p_fake[0] / p_real[0])).ln() + 0.5 * (1.0 + (p_fake[1] / p_real[1])).ln();
        assert!((loss_with(5, n) - expected).abs() < 1e-14);
    }

    #[test]
    fn identity_flow_nll() {
        let spec = CouplingFlowSpec {
            dim: 2,
            blocks: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            scale_bound: 2.0,
        };
        let params = init_flow_params(&spec, 0);
        let mut rng = Prng::new(4);
        let x = Tensor::from_fn(&[50, 2], |_| rng.normal());
        let mut g = Graph::new();
        let p = bind(&mut g, &params, false);
        let xv = g.constant(x.clone());
        let l = flow_nll(&mut g, &spec, &p, xv).unwrap();
        let expected: f64 = (0..50)
            .map(|i| gaussian_log_norm(2) + 0.5 * x.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 50.0;
        assert!((g.value(l).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn gaussian_kld_examples() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::zeros(&[3, 2]));
        let lv = g.constant(Tensor::zeros(&[3, 2]));
        let k = gaussian_kld_standard(&mut g, mu, lv).unwrap();
        assert!(g.value(k).item().abs() < 1e-15);

        // one row, one dim: μ = 1, σ² = e → 0.5(1 + e - 1 - 1)
        let mu = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let lv = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let k = gaussian_kld_standard(&mut g, mu, lv).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(k).item() - 0.5 * (e - 1.0)).abs() < 1e-15);
    }
}
