//! Exact probability calculus on finite alphabets.
//!
//! Distributions, row-stochastic kernels and joint tables are validated on
//! construction (non-negative, normalised within [`SUM_TOL`]) and are
//! immutable afterwards. All information quantities are in nats, with the
//! convention `0 · log 0 = 0`. A positive mass against a zero reference
//! probability is reported as [`ProbError::Support`] rather than `+inf`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Prng;

/// Normalisation tolerance for every probability vector and table.
pub const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid joint table: {0}")]
    InvalidJoint(String),
    #[error("support violation at symbol {index}: mass {mass:e} against zero reference probability")]
    Support { index: usize, mass: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("conditioning symbol {index} has zero probability")]
    ZeroMassRow { index: usize },
}

fn check_probs(values: &[f64], what: &str) -> Result<(), String> {
    if values.is_empty() {
        return Err(format!("{what} is empty"));
    }
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("{what} entry {i} = {v} is not a non-negative finite number"));
        }
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(format!("{what} sums to {s:.17}, not 1"));
    }
    Ok(())
}

/// A probability mass function over `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FiniteDist {
    pmf: Vec<f64>,
}

impl TryFrom<Vec<f64>> for FiniteDist {
    type Error = ProbError;
    fn try_from(v: Vec<f64>) -> Result<Self, ProbError> {
        Self::new(v)
    }
}

impl From<FiniteDist> for Vec<f64> {
    fn from(d: FiniteDist) -> Self {
        d.pmf
    }
}

impl FiniteDist {
    pub fn new(pmf: Vec<f64>) -> Result<Self, ProbError> {
        check_probs(&pmf, "pmf").map_err(ProbError::InvalidDistribution)?;
        Ok(Self { pmf })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "alphabet must be non-empty");
        Self {
            pmf: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, k: usize) -> Self {
        assert!(k < n, "symbol {k} outside alphabet of size {n}");
        let mut pmf = vec![0.0; n];
        pmf[k] = 1.0;
        Self { pmf }
    }

    /// Dirichlet(1, …, 1) draw: normalised independent exponentials.
    pub fn random(rng: &mut Prng, n: usize) -> Self {
        Self {
            pmf: random_simplex(rng, n),
        }
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.pmf
    }

    pub fn max_abs_diff(&self, other: &FiniteDist) -> f64 {
        self.pmf
            .iter()
            .zip(&other.pmf)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn random_simplex(rng: &mut Prng, n: usize) -> Vec<f64> {
    assert!(n > 0, "alphabet must be non-empty");
    let draws: Vec<f64> = (0..n).map(|_| rng.exponential()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Row-stochastic matrix `k[i][j] = P(out = j | in = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StochasticKernel {
    n_in: usize,
    n_out: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for StochasticKernel {
    type Error = ProbError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, ProbError> {
        Self::from_rows(rows)
    }
}

impl From<StochasticKernel> for Vec<Vec<f64>> {
    fn from(k: StochasticKernel) -> Self {
        k.rows().map(<[f64]>::to_vec).collect()
    }
}

impl StochasticKernel {
    pub fn new(n_in: usize, n_out: usize, data: Vec<f64>) -> Result<Self, ProbError> {
        if n_in == 0 || n_out == 0 {
            return Err(ProbError::InvalidKernel("empty alphabet".into()));
        }
        if data.len() != n_in * n_out {
            return Err(ProbError::DimensionMismatch {
                expected: n_in * n_out,
                found: data.len(),
            });
        }
        for (i, row) in data.chunks(n_out).enumerate() {
            check_probs(row, &format!("row {i}")).map_err(ProbError::InvalidKernel)?;
        }
        Ok(Self { n_in, n_out, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ProbError> {
        let n_in = rows.len();
        let n_out = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_out) {
            return Err(ProbError::DimensionMismatch {
                expected: n_out,
                found: bad.len(),
            });
        }
        Self::new(n_in, n_out, rows.concat())
    }

    /// Builds a kernel without validation. Only meant for fault-injection
    /// hooks that need a deliberately broken kernel.
    #[doc(hidden)]
    pub fn from_rows_unchecked(n_in: usize, n_out: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_in * n_out);
        Self { n_in, n_out, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::permutation(&(0..n).collect::<Vec<_>>()).expect("identity is a permutation")
    }

    /// Deterministic kernel sending symbol `i` to `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self, ProbError> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(ProbError::InvalidKernel(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let mut data = vec![0.0; n * n];
        for (i, &p) in perm.iter().enumerate() {
            data[i * n + p] = 1.0;
        }
        Self::new(n, n, data)
    }

    /// Every row equal to `d`.
    pub fn constant(n_in: usize, d: &FiniteDist) -> Self {
        let data = d.probs().repeat(n_in);
        Self {
            n_in,
            n_out: d.len(),
            data,
        }
    }

    pub fn random(rng: &mut Prng, n_in: usize, n_out: usize) -> Self {
        let data = (0..n_in).flat_map(|_| random_simplex(rng, n_out)).collect();
        Self { n_in, n_out, data }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_out + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_out..(i + 1) * self.n_out]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_out)
    }

    /// True when every row is a point mass and the map is a bijection.
    pub fn is_permutation(&self) -> bool {
        if self.n_in != self.n_out {
            return false;
        }
        let mut hit = vec![false; self.n_out];
        for row in self.rows() {
            let Some(j) = row.iter().position(|&v| v == 1.0) else {
                return false;
            };
            if hit[j] || row.iter().enumerate().any(|(k, &v)| k != j && v != 0.0) {
                return false;
            }
            hit[j] = true;
        }
        true
    }

    /// Convex combination `(1 - w) · self + w · other`.
    pub fn mix(&self, other: &StochasticKernel, w: f64) -> Result<Self, ProbError> {
        if self.n_in != other.n_in || self.n_out != other.n_out {
            return Err(ProbError::DimensionMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect();
        Ok(Self {
            n_in: self.n_in,
            n_out: self.n_out,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &StochasticKernel) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Which variable a conditional kernel is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Kernel `x -> z`, rows indexed by x.
    ZGivenX,
    /// Kernel `z -> x`, rows indexed by z.
    XGivenZ,
}

/// What to emit for a conditioning symbol of zero probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroMassPolicy {
    #[default]
    Uniform,
    Error,
}

/// Joint pmf `p(x, z)` stored row-major with x as the row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FiniteJoint {
    n_x: usize,
    n_z: usize,
    table: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for FiniteJoint {
    type Error = ProbError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, ProbError> {
        Self::from_rows(rows)
    }
}

impl From<FiniteJoint> for Vec<Vec<f64>> {
    fn from(j: FiniteJoint) -> Self {
        j.table.chunks(j.n_z).map(<[f64]>::to_vec).collect()
    }
}

impl FiniteJoint {
    pub fn new(n_x: usize, n_z: usize, table: Vec<f64>) -> Result<Self, ProbError> {
        if table.len() != n_x * n_z {
            return Err(ProbError::DimensionMismatch {
                expected: n_x * n_z,
                found: table.len(),
            });
        }
        check_probs(&table, "joint table").map_err(ProbError::InvalidJoint)?;
        Ok(Self { n_x, n_z, table })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ProbError> {
        let n_x = rows.len();
        let n_z = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_z) {
            return Err(ProbError::DimensionMismatch {
                expected: n_z,
                found: bad.len(),
            });
        }
        Self::new(n_x, n_z, rows.concat())
    }

    /// `p(x) p(z)`.
    pub fn product(p_x: &FiniteDist, p_z: &FiniteDist) -> Self {
        let table = p_x
            .probs()
            .iter()
            .flat_map(|a| p_z.probs().iter().map(move |b| a * b))
            .collect();
        Self {
            n_x: p_x.len(),
            n_z: p_z.len(),
            table,
        }
    }

    /// Uniform over the `n` matched pairs `(i, i)`.
    pub fn diagonal_uniform(n: usize) -> Self {
        let mut table = vec![0.0; n * n];
        for i in 0..n {
            table[i * n + i] = 1.0 / n as f64;
        }
        Self { n_x: n, n_z: n, table }
    }

    pub fn random(rng: &mut Prng, n_x: usize, n_z: usize) -> Self {
        Self {
            n_x,
            n_z,
            table: random_simplex(rng, n_x * n_z),
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.table[x * self.n_z + z]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Swaps the roles of x and z.
    pub fn transpose(&self) -> Self {
        let mut table = vec![0.0; self.table.len()];
        for x in 0..self.n_x {
            for z in 0..self.n_z {
                table[z * self.n_x + x] = self.get(x, z);
            }
        }
        Self {
            n_x: self.n_z,
            n_z: self.n_x,
            table,
        }
    }

    pub fn marginal_x(&self) -> FiniteDist {
        FiniteDist {
            pmf: self.table.chunks(self.n_z).map(|r| r.iter().sum()).collect(),
        }
    }

    pub fn marginal_z(&self) -> FiniteDist {
        let mut pmf = vec![0.0; self.n_z];
        for row in self.table.chunks(self.n_z) {
            for (acc, v) in pmf.iter_mut().zip(row) {
                *acc += v;
            }
        }
        FiniteDist { pmf }
    }

    pub fn marginals(&self) -> (FiniteDist, FiniteDist) {
        (self.marginal_x(), self.marginal_z())
    }

    /// Chain-rule conditional, `p(z|x)` or `p(x|z)`.
    pub fn conditional(
        &self,
        direction: Conditioning,
        policy: ZeroMassPolicy,
    ) -> Result<StochasticKernel, ProbError> {
        let oriented = match direction {
            Conditioning::ZGivenX => self.clone(),
            Conditioning::XGivenZ => self.transpose(),
        };
        let (n_in, n_out) = (oriented.n_x, oriented.n_z);
        let mut data = Vec::with_capacity(n_in * n_out);
        for (i, row) in oriented.table.chunks(n_out).enumerate() {
            let mass: f64 = row.iter().sum();
            if mass > 0.0 {
                data.extend(row.iter().map(|v| v / mass));
            } else {
                match policy {
                    ZeroMassPolicy::Uniform => data.extend(std::iter::repeat_n(1.0 / n_out as f64, n_out)),
                    ZeroMassPolicy::Error => return Err(ProbError::ZeroMassRow { index: i }),
                }
            }
        }
        Ok(StochasticKernel { n_in, n_out, data })
    }

    pub fn max_abs_diff(&self, other: &FiniteJoint) -> f64 {
        self.table
            .iter()
            .zip(&other.table)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Joint pmf `p(x, z, s)` with a sensitive attribute `s`, indexed `[x][z][s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJointWithSensitive {
    n_x: usize,
    n_z: usize,
    n_s: usize,
    table: Vec<f64>,
}

impl FiniteJointWithSensitive {
    pub fn new(n_x: usize, n_z: usize, n_s: usize, table: Vec<f64>) -> Result<Self, ProbError> {
        if table.len() != n_x * n_z * n_s {
            return Err(ProbError::DimensionMismatch {
                expected: n_x * n_z * n_s,
                found: table.len(),
            });
        }
        check_probs(&table, "sensitive joint table").map_err(ProbError::InvalidJoint)?;
        Ok(Self { n_x, n_z, n_s, table })
    }

    pub fn from_nested(nested: Vec<Vec<Vec<f64>>>) -> Result<Self, ProbError> {
        let n_x = nested.len();
        let n_z = nested.first().map_or(0, Vec::len);
        let n_s = nested.first().and_then(|r| r.first()).map_or(0, Vec::len);
        for plane in &nested {
            if plane.len() != n_z {
                return Err(ProbError::DimensionMismatch { expected: n_z, found: plane.len() });
            }
            if let Some(bad) = plane.iter().find(|r| r.len() != n_s) {
                return Err(ProbError::DimensionMismatch { expected: n_s, found: bad.len() });
            }
        }
        Self::new(n_x, n_z, n_s, nested.concat().concat())
    }

    /// `p(x, z, s) = p(x, z) · k(s | x, z)` for a kernel over the flattened pair index.
    pub fn from_joint_and_kernel(joint: &FiniteJoint, s_given_xz: &StochasticKernel) -> Result<Self, ProbError> {
        if s_given_xz.n_in() != joint.table.len() {
            return Err(ProbError::DimensionMismatch {
                expected: joint.table.len(),
                found: s_given_xz.n_in(),
            });
        }
        let n_s = s_given_xz.n_out();
        let table = joint
            .table
            .iter()
            .enumerate()
            .flat_map(|(idx, &p)| s_given_xz.row(idx).iter().map(move |k| p * k))
            .collect();
        Ok(Self {
            n_x: joint.n_x,
            n_z: joint.n_z,
            n_s,
            table,
        })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn get(&self, x: usize, z: usize, s: usize) -> f64 {
        self.table[(x * self.n_z + z) * self.n_s + s]
    }

    /// Sums out `s`.
    pub fn marginal_xz(&self) -> FiniteJoint {
        FiniteJoint {
            n_x: self.n_x,
            n_z: self.n_z,
            table: self.table.chunks(self.n_s).map(|c| c.iter().sum()).collect(),
        }
    }

    /// Sums out `z`; rows indexed by x, columns by s.
    pub fn marginal_xs(&self) -> FiniteJoint {
        let mut table = vec![0.0; self.n_x * self.n_s];
        for x in 0..self.n_x {
            for z in 0..self.n_z {
                for s in 0..self.n_s {
                    table[x * self.n_s + s] += self.get(x, z, s);
                }
            }
        }
        FiniteJoint {
            n_x: self.n_x,
            n_z: self.n_s,
            table,
        }
    }
}

fn same_len(expected: usize, found: usize) -> Result<(), ProbError> {
    if expected == found {
        Ok(())
    } else {
        Err(ProbError::DimensionMismatch { expected, found })
    }
}

/// `-Σ p log p`.
pub fn entropy(d: &FiniteDist) -> f64 {
    -d.pmf.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `-Σ p log q`.
pub fn cross_entropy(p: &FiniteDist, q: &FiniteDist) -> Result<f64, ProbError> {
    same_len(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.pmf.iter().zip(&q.pmf).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(ProbError::Support { index: i, mass: pi });
            }
            acc -= pi * qi.ln();
        }
    }
    Ok(acc)
}

/// Forward divergence `KL(p ‖ q)`, expectation under `p`.
pub fn kld(p: &FiniteDist, q: &FiniteDist) -> Result<f64, ProbError> {
    same_len(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.pmf.iter().zip(&q.pmf).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(ProbError::Support { index: i, mass: pi });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    // Rounding can push the sum of a near-zero divergence slightly negative.
    Ok(acc.max(0.0))
}

pub fn mutual_information(j: &FiniteJoint) -> f64 {
    let (px, pz) = j.marginals();
    let mut acc = 0.0;
    for x in 0..j.n_x {
        for z in 0..j.n_z {
            let p = j.get(x, z);
            if p > 0.0 {
                acc += p * (p / (px.pmf[x] * pz.pmf[z])).ln();
            }
        }
    }
    acc.max(0.0)
}

/// Joint entropy `H(X, Z)`.
pub fn joint_entropy(j: &FiniteJoint) -> f64 {
    -j.table.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `dᵀ K`, the output marginal of `d` pushed through `k`.
pub fn push_forward(d: &FiniteDist, k: &StochasticKernel) -> Result<FiniteDist, ProbError> {
    same_len(k.n_in, d.len())?;
    let mut pmf = vec![0.0; k.n_out];
    for (w, row) in d.pmf.iter().zip(k.rows()) {
        for (acc, v) in pmf.iter_mut().zip(row) {
            *acc += w * v;
        }
    }
    Ok(FiniteDist { pmf })
}

/// `table[i][j] = d[i] · k[i][j]`.
pub fn compose_joint(d: &FiniteDist, k: &StochasticKernel) -> Result<FiniteJoint, ProbError> {
    same_len(k.n_in, d.len())?;
    let table = d
        .pmf
        .iter()
        .zip(k.rows())
        .flat_map(|(w, row)| row.iter().map(move |v| w * v))
        .collect();
    Ok(FiniteJoint {
        n_x: k.n_in,
        n_z: k.n_out,
        table,
    })
}

/// `-Σ_{i,j} w(i,j) log k(i,j)`: a negative expected log-likelihood of a
/// kernel under a joint weighting whose rows index the kernel input.
pub fn neg_expected_log(weights: &FiniteJoint, k: &StochasticKernel) -> Result<f64, ProbError> {
    same_len(k.n_in, weights.n_x)?;
    same_len(k.n_out, weights.n_z)?;
    let mut acc = 0.0;
    for (idx, (&w, &kv)) in weights.table.iter().zip(&k.data).enumerate() {
        if w > 0.0 {
            if kv <= 0.0 {
                return Err(ProbError::Support { index: idx, mass: w });
            }
            acc -= w * kv.ln();
        }
    }
    Ok(acc)
}
