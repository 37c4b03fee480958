//! Evaluation of trained runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::config::EvalSection;
use crate::data::{analytic_reference, sample, DatasetSpec};
use crate::losses::flow_nll;
use crate::nn::bind;
use crate::rng::derive_seed;
use crate::train::{Draws, GenView, RunState, TrainError, STREAM_EPS, STREAM_NOISE};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0} sample set is empty")]
    Empty(&'static str),
    #[error("samples contain NaN")]
    Nan,
    #[error("radius must be positive, got {0}")]
    Radius(f64),
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty("first"));
    }
    if b.is_empty() {
        return Err(MetricsError::Empty("second"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(MetricsError::Nan);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Fraction of rows whose nearest centre lies within `radius`, per centre.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<Vec<f64>, MetricsError> {
    if !(radius > 0.0) {
        return Err(MetricsError::Radius(radius));
    }
    let mut counts = vec![0usize; centers.len()];
    let n = samples.rows();
    for i in 0..n {
        let p = samples.row(i);
        let nearest = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (p[0] - c[0]).hypot(p[1] - c[1])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, dist)) = nearest {
            if dist <= radius {
                counts[k] += 1;
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / n.max(1) as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub samples: usize,
    /// Per-dimension KS distance against the real marginal, keyed by the
    /// generated quantity: `x_tilde`, `z_tilde`, `x_hat`, `z_hat`.
    pub ks: BTreeMap<String, Vec<f64>>,
    /// Mean squared error per entry: `paired_z` (z̃ vs z), `paired_x`
    /// (x̃ vs x), `cycle_x` (x̂ vs x), `cycle_z` (ẑ vs z).
    pub mse: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_radius: Option<f64>,
    /// Held-out flow NLL in nats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll_gap: Option<f64>,
}

impl MetricsRecord {
    /// Flat `name -> value` view used by `report`.
    pub fn flatten(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.ks {
            out.insert(format!("ks_{k}_max"), v.iter().copied().fold(0.0, f64::max));
            for (i, d) in v.iter().enumerate() {
                out.insert(format!("ks_{k}_{i}"), *d);
            }
        }
        for (k, v) in &self.mse {
            out.insert(format!("mse_{k}"), *v);
        }
        if let Some(c) = &self.coverage {
            out.insert("coverage_min".into(), c.iter().copied().fold(f64::INFINITY, f64::min));
        }
        for (k, v) in [("nll", self.nll), ("nll_gap", self.nll_gap)] {
            if let Some(v) = v {
                out.insert(k.into(), v);
            }
        }
        out
    }
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.cols()).map(|j| t.column(j)).collect()
}

fn ks_columns(gen: &Tensor, real: &Tensor) -> Result<Vec<f64>, TrainError> {
    columns(gen)
        .iter()
        .zip(columns(real))
        .map(|(a, b)| ks_distance(a, &b).map_err(|e| TrainError::Invalid(e.to_string())))
        .collect()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64
}

/// Held-out evaluation of every direction the preset produces.
pub fn evaluate_run(state: &RunState, eval: &EvalSection) -> Result<MetricsRecord, TrainError> {
    let spec = &state.config.data;
    let batch = sample(spec, eval.samples, eval.seed)?;
    let mut g = Graph::new();
    let params = bind(&mut g, &state.gen, false);
    let view = GenView {
        model: &state.model,
        params: &params,
    };
    let mut draws = Draws::new(derive_seed(eval.seed, STREAM_NOISE, 0), derive_seed(eval.seed, STREAM_EPS, 0));
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let m = &state.model;

    let mut rec = MetricsRecord {
        seed: eval.seed,
        samples: eval.samples,
        ks: BTreeMap::new(),
        mse: BTreeMap::new(),
        coverage: None,
        coverage_radius: None,
        nll: None,
        entropy_x: None,
        nll_gap: None,
    };

    let z_tilde = if m.has_encoder() { Some(view.encode(&mut g, x, &mut draws)?.z) } else { None };
    let x_tilde = if m.has_decoder() { Some(view.decode(&mut g, z, &mut draws)?) } else { None };
    if let Some(zt) = z_tilde {
        let v = g.value(zt).clone();
        rec.ks.insert("z_tilde".into(), ks_columns(&v, &batch.z)?);
        if batch.paired {
            rec.mse.insert("paired_z".into(), mse(&v, &batch.z));
        }
    }
    if let Some(xt) = x_tilde {
        let v = g.value(xt).clone();
        rec.ks.insert("x_tilde".into(), ks_columns(&v, &batch.x)?);
        if batch.paired {
            rec.mse.insert("paired_x".into(), mse(&v, &batch.x));
        }
        if let (DatasetSpec::GaussianRing { std, .. }, Some(centers)) = (spec, spec.ring_centers()) {
            let r = eval.coverage_radius.unwrap_or(3.0 * std);
            rec.coverage = Some(mode_coverage(&v, &centers, r).map_err(|e| TrainError::Invalid(e.to_string()))?);
            rec.coverage_radius = Some(r);
        }
    }
    if let (Some(zt), Some(xt)) = (z_tilde, x_tilde) {
        let x_hat = view.decode(&mut g, zt, &mut draws)?;
        let z_hat = view.encode(&mut g, xt, &mut draws)?.z;
        let (xh, zh) = (g.value(x_hat).clone(), g.value(z_hat).clone());
        rec.ks.insert("x_hat".into(), ks_columns(&xh, &batch.x)?);
        rec.ks.insert("z_hat".into(), ks_columns(&zh, &batch.z)?);
        rec.mse.insert("cycle_x".into(), mse(&xh, &batch.x));
        rec.mse.insert("cycle_z".into(), mse(&zh, &batch.z));
    }
    if let Some(flow) = &m.flow {
        let nll = flow_nll(&mut g, flow, &params, x)?;
        let nll = g.value(nll).item();
        rec.nll = Some(nll);
        if let Ok(r) = analytic_reference(spec) {
            rec.entropy_x = Some(r.h_x);
            rec.nll_gap = Some(nll - r.h_x);
        }
    }
    Ok(rec)
}
