//! Synthetic paired and unpaired 2-D datasets with known ground truth.
//!
//! * `linear-gaussian`: `z ~ N(0, Σ_z)`, `x = A z + b + ε`, `ε ~ N(0, σ² I)`.
//!   Both conditionals are Gaussian, so `I(X; Z)`, `H(X)` and `H(Z)` have
//!   closed forms ([`analytic_reference`]).
//! * `two-moons-map`: `z` is the classic two-moons set, standardised to
//!   roughly zero mean and unit variance per axis, plus noise; `x` is a
//!   rotated and scaled copy of `z` plus noise.
//! * `gaussian-ring`: `x` is a mixture of Gaussians with centres evenly
//!   spaced on a circle; `z ~ N(0, I)` is generator input only.
//!
//! Sampling is a pure function of `(spec, n, seed)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::Prng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
    #[error("{0} has no analytic reference")]
    Unsupported(&'static str),
    #[error("degenerate channel: {0}")]
    Degenerate(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Centre of the raw two-moons point set.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];
/// Per-axis standard deviation of the raw two-moons point set.
pub const MOONS_SCALE: [f64; 2] = [0.866, 0.495];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    LinearGaussian {
        /// `d_x × d_z` mixing matrix.
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        sigma: f64,
        /// Latent covariance `Σ_z`, `d_z × d_z`.
        sigma_z: Vec<Vec<f64>>,
        #[serde(default = "yes")]
        paired: bool,
    },
    TwoMoonsMap {
        noise_z: f64,
        angle: f64,
        scale: [f64; 2],
        noise_x: f64,
        #[serde(default = "yes")]
        paired: bool,
    },
    GaussianRing {
        modes: usize,
        radius: f64,
        std: f64,
        latent_dim: usize,
    },
}

fn yes() -> bool {
    true
}

/// Rows of `x` and `z`, plus whether row `i` of each came from one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub paired: bool,
}

impl DatasetSpec {
    pub fn default_linear_gaussian() -> Self {
        Self::LinearGaussian {
            a: vec![vec![0.8, 0.3], vec![-0.4, 0.7]],
            b: vec![0.2, -0.1],
            sigma: 0.3,
            sigma_z: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            paired: true,
        }
    }

    pub fn default_two_moons() -> Self {
        Self::TwoMoonsMap {
            noise_z: 0.05,
            angle: std::f64::consts::FRAC_PI_4,
            scale: [1.0, 0.7],
            noise_x: 0.02,
            paired: false,
        }
    }

    pub fn default_ring() -> Self {
        Self::GaussianRing {
            modes: 8,
            radius: 1.0,
            std: 0.05,
            latent_dim: 2,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Self::LinearGaussian { .. } => "linear-gaussian",
            Self::TwoMoonsMap { .. } => "two-moons-map",
            Self::GaussianRing { .. } => "gaussian-ring",
        }
    }

    pub fn paired(&self) -> bool {
        match self {
            Self::LinearGaussian { paired, .. } | Self::TwoMoonsMap { paired, .. } => *paired,
            Self::GaussianRing { .. } => false,
        }
    }

    pub fn with_paired(mut self, value: bool) -> Self {
        match &mut self {
            Self::LinearGaussian { paired, .. } | Self::TwoMoonsMap { paired, .. } => *paired = value,
            Self::GaussianRing { .. } => {}
        }
        self
    }

    /// `(d_x, d_z)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::LinearGaussian { a, .. } => (a.len(), a.first().map_or(0, Vec::len)),
            Self::TwoMoonsMap { .. } => (2, 2),
            Self::GaussianRing { latent_dim, .. } => (2, *latent_dim),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Self::LinearGaussian { a, b, sigma, sigma_z, .. } => {
                let (dx, dz) = self.dims();
                if dx == 0 || dz == 0 || a.iter().any(|r| r.len() != dz) {
                    return bad("a must be a non-empty rectangular d_x × d_z matrix".into());
                }
                if b.len() != dx {
                    return bad(format!("b has length {}, expected {dx}", b.len()));
                }
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("sigma must be ≥ 0, got {sigma}"));
                }
                if sigma_z.len() != dz || sigma_z.iter().any(|r| r.len() != dz) {
                    return bad(format!("sigma_z must be {dz} × {dz}"));
                }
                if !a.iter().all(|r| finite(r)) || !finite(b) || !sigma_z.iter().all(|r| finite(r)) {
                    return bad("non-finite entry".into());
                }
                let s = to_matrix(sigma_z);
                if (s.clone() - s.transpose()).abs().max() > 1e-12 {
                    return bad("sigma_z must be symmetric".into());
                }
                if s.cholesky().is_none() {
                    return bad("sigma_z must be positive definite".into());
                }
                Ok(())
            }
            Self::TwoMoonsMap {
                noise_z,
                angle,
                scale,
                noise_x,
                ..
            } => {
                if !(*noise_z >= 0.0 && *noise_x >= 0.0) || !finite(&[*noise_z, *noise_x, *angle]) {
                    return bad("noise scales must be finite and ≥ 0".into());
                }
                if !finite(scale) || scale.contains(&0.0) {
                    return bad("scale entries must be finite and non-zero".into());
                }
                Ok(())
            }
            Self::GaussianRing {
                modes,
                radius,
                std,
                latent_dim,
            } => {
                if *modes == 0 || *latent_dim == 0 {
                    return bad("modes and latent_dim must be ≥ 1".into());
                }
                if !(*radius > 0.0 && radius.is_finite()) || !(*std >= 0.0 && std.is_finite()) {
                    return bad("radius must be > 0 and std ≥ 0".into());
                }
                Ok(())
            }
        }
    }

    /// Mixture centres for the ring family.
    pub fn ring_centers(&self) -> Option<Vec<[f64; 2]>> {
        match self {
            Self::GaussianRing { modes, radius, .. } => Some(
                (0..*modes)
                    .map(|k| {
                        let t = std::f64::consts::TAU * k as f64 / *modes as f64;
                        [radius * t.cos(), radius * t.sin()]
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// One `(x, z)` draw.
fn draw(spec: &DatasetSpec, rng: &mut Prng, chol: Option<&DMatrix<f64>>, x: &mut Vec<f64>, z: &mut Vec<f64>) {
    match spec {
        DatasetSpec::LinearGaussian { a, b, sigma, .. } => {
            let l = chol.expect("cholesky factor");
            let dz = l.nrows();
            let eps = DVector::from_fn(dz, |_, _| rng.normal());
            let zz = l * eps;
            for (row, bi) in a.iter().zip(b) {
                let mean: f64 = row.iter().zip(zz.iter()).map(|(r, v)| r * v).sum::<f64>() + bi;
                x.push(mean + sigma * rng.normal());
            }
            z.extend(zz.iter());
        }
        DatasetSpec::TwoMoonsMap {
            noise_z,
            angle,
            scale,
            noise_x,
            ..
        } => {
            let t = std::f64::consts::PI * rng.uniform();
            let (px, py) = if rng.below(2) == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let zx = (px - MOONS_CENTER[0]) / MOONS_SCALE[0] + noise_z * rng.normal();
            let zy = (py - MOONS_CENTER[1]) / MOONS_SCALE[1] + noise_z * rng.normal();
            let (s0, s1) = (scale[0] * zx, scale[1] * zy);
            let (c, s) = (angle.cos(), angle.sin());
            x.push(c * s0 - s * s1 + noise_x * rng.normal());
            x.push(s * s0 + c * s1 + noise_x * rng.normal());
            z.push(zx);
            z.push(zy);
        }
        DatasetSpec::GaussianRing {
            modes,
            radius,
            std,
            latent_dim,
        } => {
            let k = rng.below(*modes);
            let t = std::f64::consts::TAU * k as f64 / *modes as f64;
            x.push(radius * t.cos() + std * rng.normal());
            x.push(radius * t.sin() + std * rng.normal());
            for _ in 0..*latent_dim {
                z.push(rng.normal());
            }
        }
    }
}

/// `n` rows of `x` and `z`. In unpaired mode the `z` rows are shuffled
/// by an independent permutation after drawing.
pub fn sample(spec: &DatasetSpec, n: usize, seed: u64) -> Result<PairedBatch, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    let chol = match spec {
        DatasetSpec::LinearGaussian { sigma_z, .. } => Some(
            to_matrix(sigma_z)
                .cholesky()
                .ok_or_else(|| DataError::Invalid("sigma_z must be positive definite".into()))?
                .l(),
        ),
        _ => None,
    };
    let (dx, dz) = spec.dims();
    let mut rng = Prng::new(seed);
    let mut x = Vec::with_capacity(n * dx);
    let mut z = Vec::with_capacity(n * dz);
    for _ in 0..n {
        draw(spec, &mut rng, chol.as_ref(), &mut x, &mut z);
    }
    let paired = spec.paired();
    if !paired {
        let perm = rng.permutation(n);
        z = perm.iter().flat_map(|&i| z[i * dz..(i + 1) * dz].to_vec()).collect();
    }
    let to_tensor = |v: Vec<f64>, d: usize| Tensor::new(vec![n, d], v).expect("consistent sizes");
    Ok(PairedBatch {
        x: to_tensor(x, dx),
        z: to_tensor(z, dz),
        paired,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReference {
    pub mutual_information: f64,
    pub h_x: f64,
    pub h_z: f64,
    pub h_x_given_z: f64,
}

fn gaussian_entropy(cov: &DMatrix<f64>) -> Result<f64, DataError> {
    let d = cov.nrows() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| DataError::Degenerate("covariance is singular".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (d * (1.0 + (2.0 * std::f64::consts::PI).ln()) + log_det))
}

/// Exact differential entropies and mutual information (nats) for the
/// linear-Gaussian family.
pub fn analytic_reference(spec: &DatasetSpec) -> Result<AnalyticReference, DataError> {
    spec.validate()?;
    let DatasetSpec::LinearGaussian { a, sigma, sigma_z, .. } = spec else {
        return Err(DataError::Unsupported(spec.family_name()));
    };
    if *sigma == 0.0 {
        return Err(DataError::Degenerate("sigma = 0 makes I(X; Z) infinite".into()));
    }
    let a = to_matrix(a);
    let sz = to_matrix(sigma_z);
    let dx = a.nrows();
    let sx = &a * &sz * a.transpose() + DMatrix::identity(dx, dx) * (sigma * sigma);
    let h_x = gaussian_entropy(&sx)?;
    let h_z = gaussian_entropy(&sz)?;
    let h_x_given_z = 0.5 * dx as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
    Ok(AnalyticReference {
        mutual_information: h_x - h_x_given_z,
        h_x,
        h_z,
        h_x_given_z,
    })
}

/// Writes a batch as comma-separated text: `#`-prefixed header lines with
/// the spec (JSON) and seed, then a column row `x0,..,z0,..`.
pub fn write_csv<W: Write>(out: W, spec: &DatasetSpec, seed: u64, batch: &PairedBatch) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(e.to_string());
    let mut out = out;
    let spec_json = serde_json::to_string(spec).map_err(|e| DataError::Io(e.to_string()))?;
    writeln!(out, "# spec: {spec_json}").map_err(io)?;
    writeln!(out, "# seed: {seed}").map_err(io)?;
    writeln!(out, "# paired: {}", batch.paired).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let (dx, dz) = (batch.x.cols(), batch.z.cols());
    let header: Vec<String> = (0..dx).map(|i| format!("x{i}")).chain((0..dz).map(|i| format!("z{i}"))).collect();
    w.write_record(&header).map_err(|e| DataError::Io(e.to_string()))?;
    for i in 0..batch.x.rows() {
        let row: Vec<String> = batch.x.row(i).iter().chain(batch.z.row(i)).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(|e| DataError::Io(e.to_string()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn identity_channel() {
        let spec = DatasetSpec::LinearGaussian {
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            b: vec![0.0, 0.0],
            sigma: 0.0,
            sigma_z: vec![vec![1.0, 0.3], vec![0.3, 2.0]],
            paired: true,
        };
        let b = sample(&spec, 100, 5).unwrap();
        assert_eq!(b.x, b.z);
        assert!(matches!(analytic_reference(&spec), Err(DataError::Degenerate(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        for spec in [
            DatasetSpec::default_linear_gaussian(),
            DatasetSpec::default_two_moons(),
            DatasetSpec::default_ring(),
        ] {
            let a = sample(&spec, 300, 9).unwrap();
            assert_eq!(a, sample(&spec, 300, 9).unwrap());
            assert_ne!(a.x, sample(&spec, 300, 10).unwrap().x);
        }
    }

    #[test]
    fn unpaired_preserves_marginal_means() {
        let spec = DatasetSpec::default_linear_gaussian();
        let p = sample(&spec, 5000, 3).unwrap();
        let u = sample(&spec.clone().with_paired(false), 5000, 3).unwrap();
        assert!(!u.paired);
        assert_eq!(p.x, u.x);
        for j in 0..2 {
            assert!((mean(&p.z.column(j)) - mean(&u.z.column(j))).abs() < 1e-12);
        }
        assert_ne!(p.z, u.z);
    }

    #[test]
    fn correlation_matches_analytic() {
        let (a, s) = (0.9, 0.5);
        let spec = DatasetSpec::LinearGaussian {
            a: vec![vec![a]],
            b: vec![0.0],
            sigma: s,
            sigma_z: vec![vec![1.0]],
            paired: true,
        };
        let batch = sample(&spec, 100_000, 21).unwrap();
        let (x, z) = (batch.x.column(0), batch.z.column(0));
        let (mx, mz) = (mean(&x), mean(&z));
        let cov: f64 = x.iter().zip(&z).map(|(x, z)| (x - mx) * (z - mz)).sum::<f64>() / x.len() as f64;
        let vx: f64 = x.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / x.len() as f64;
        let vz: f64 = z.iter().map(|z| (z - mz).powi(2)).sum::<f64>() / z.len() as f64;
        let rho = cov / (vx * vz).sqrt();
        let expected = a / (a * a + s * s).sqrt();
        assert!((rho - expected).abs() < 0.02, "{rho} vs {expected}");
        let r = analytic_reference(&spec).unwrap();
        assert!((r.mutual_information + 0.5 * (1.0 - expected * expected).ln()).abs() < 1e-12);
    }

    #[test]
    fn residual_covariance() {
        let spec = DatasetSpec::default_linear_gaussian();
        let DatasetSpec::LinearGaussian { a, b, sigma, .. } = &spec else { unreachable!() };
        let batch = sample(&spec, 100_000, 4).unwrap();
        let n = batch.x.rows();
        let mut res = vec![[0.0; 2]; n];
        for (i, r) in res.iter_mut().enumerate() {
            let (x, z) = (batch.x.row(i), batch.z.row(i));
            for k in 0..2 {
                r[k] = x[k] - a[k][0] * z[0] - a[k][1] * z[1] - b[k];
            }
        }
        let s2 = sigma * sigma;
        for k in 0..2 {
            for l in 0..2 {
                let c: f64 = res.iter().map(|r| r[k] * r[l]).sum::<f64>() / n as f64;
                if k == l {
                    assert!((c / s2 - 1.0).abs() < 0.05, "var {c}");
                } else {
                    assert!(c.abs() < 0.05 * s2, "cov {c}");
                }
            }
        }
    }

    #[test]
    fn independence_gives_zero_mi() {
        let spec = DatasetSpec::LinearGaussian {
            a: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            b: vec![1.0, 1.0],
            sigma: 0.7,
            sigma_z: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            paired: true,
        };
        assert!(analytic_reference(&spec).unwrap().mutual_information.abs() < 1e-12);
        assert!(analytic_reference(&DatasetSpec::default_ring()).is_err());
    }

    /// Midpoint-rule entropy of a 2-D Gaussian on a ±8σ grid.
    #[test]
    fn entropy_matches_grid_quadrature() {
        let spec = DatasetSpec::default_linear_gaussian();
        let r = analytic_reference(&spec).unwrap();
        let DatasetSpec::LinearGaussian { a, sigma, .. } = &spec else { unreachable!() };
        let am = to_matrix(a);
        let cov = &am * am.transpose() + DMatrix::identity(2, 2) * (sigma * sigma);
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let norm = 1.0 / (std::f64::consts::TAU * det.sqrt());
        let half = 8.0 * cov[(0, 0)].max(cov[(1, 1)]).sqrt();
        let m = 600;
        let h = 2.0 * half / m as f64;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let u = -half + (i as f64 + 0.5) * h;
                let v = -half + (j as f64 + 0.5) * h;
                let q = inv[(0, 0)] * u * u + 2.0 * inv[(0, 1)] * u * v + inv[(1, 1)] * v * v;
                let p = norm * (-0.5 * q).exp();
                if p > 0.0 {
                    acc -= p * p.ln() * h * h;
                }
            }
        }
        assert!((acc - r.h_x).abs() < 1e-6, "{acc} vs {}", r.h_x);
    }

    #[test]
    fn moons_are_roughly_standardised() {
        let spec = DatasetSpec::TwoMoonsMap {
            noise_z: 0.0,
            angle: 0.0,
            scale: [1.0, 1.0],
            noise_x: 0.0,
            paired: true,
        };
        let b = sample(&spec, 50_000, 1).unwrap();
        for j in 0..2 {
            let c = b.z.column(j);
            let m = mean(&c);
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((sd - 1.0).abs() < 0.03, "sd {sd}");
        }
        assert_eq!(b.x, b.z);
    }

    #[test]
    fn ring_samples_near_centres() {
        let spec = DatasetSpec::default_ring();
        let centers = spec.ring_centers().unwrap();
        let b = sample(&spec, 2000, 2).unwrap();
        for i in 0..2000 {
            let x = b.x.row(i);
            let d = centers
                .iter()
                .map(|c| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 0.3);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = DatasetSpec::default_linear_gaussian();
        if let DatasetSpec::LinearGaussian { sigma_z, .. } = &mut s {
            sigma_z[0][1] = 2.0;
            sigma_z[1][0] = 2.0;
        }
        assert!(sample(&s, 10, 0).is_err());
        assert!(sample(&DatasetSpec::default_ring(), 0, 0).is_err());
    }

    #[test]
    fn csv_dump_has_header() {
        let spec = DatasetSpec::default_two_moons();
        let b = sample(&spec, 3, 7).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &spec, 7, &b).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].starts_with("# spec: {\"family\":\"two-moons-map\""));
        assert_eq!(lines[1], "# seed: 7");
        assert_eq!(lines[3], "x0,x1,z0,z1");
        assert_eq!(lines.len(), 7);
        let first: Vec<f64> = lines[4].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[0], b.x.row(0)[0]);
    }
}
