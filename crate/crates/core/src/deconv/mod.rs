//! Sparse nonnegative SNA estimation.
//!
//! Given a fitted model, the skin conductance target `c` is explained as
//! `D v` where column `j` of the influence matrix `D` is the model's forced
//! response to a unit impulse at sample `j`. The SNA estimate solves
//!
//! ```text
//! min  1/2 v' D'D v + (alpha - D'c)' v    s.t.  v >= 0
//! ```
//!
//! which is the nonnegative L1-regularised least-squares problem up to a
//! constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdmError};
use crate::lti::DiscreteTransferFunction;
use crate::signal::UniformSeries;

/// Nonnegative latent input sampled on the skin-conductance grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSna")]
pub struct SnaSignal {
    values: Vec<f64>,
    sample_interval: f64,
    start_time: f64,
}

#[derive(Deserialize)]
struct RawSna {
    values: Vec<f64>,
    sample_interval: f64,
    start_time: f64,
}

impl TryFrom<RawSna> for SnaSignal {
    type Error = UdmError;

    fn try_from(raw: RawSna) -> Result<Self> {
        SnaSignal::with_start(raw.values, raw.sample_interval, raw.start_time)
    }
}

/// A maximal run of consecutive nonzero SNA samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Burst {
    pub start: usize,
    pub len: usize,
}

impl SnaSignal {
    pub fn new(values: Vec<f64>, sample_interval: f64) -> Result<Self> {
        Self::with_start(values, sample_interval, 0.0)
    }

    pub fn with_start(values: Vec<f64>, sample_interval: f64, start_time: f64) -> Result<Self> {
        if !(sample_interval > 0.0) || !sample_interval.is_finite() {
            return Err(UdmError::invalid("sample interval must be positive"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(UdmError::invalid(format!(
                "SNA sample {i} is negative or not finite ({})",
                values[i]
            )));
        }
        Ok(SnaSignal {
            values,
            sample_interval,
            start_time,
        })
    }

    pub fn zeros(len: usize, sample_interval: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_interval)
    }

    /// Zeros on the time grid of `series`.
    pub fn zeros_like(series: &UniformSeries) -> Self {
        SnaSignal {
            values: vec![0.0; series.len()],
            sample_interval: series.sample_interval(),
            start_time: series.start_time(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.sample_interval
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn support_fraction(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.support_size() as f64 / self.values.len() as f64
        }
    }

    pub fn bursts(&self) -> Vec<Burst> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.values.len() {
            if self.values[i] > 0.0 {
                let start = i;
                while i < self.values.len() && self.values[i] > 0.0 {
                    i += 1;
                }
                out.push(Burst { start, len: i - start });
            } else {
                i += 1;
            }
        }
        out
    }

    /// Same samples with every value multiplied by `factor >= 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::with_start(
            self.values.iter().map(|v| v * factor).collect(),
            self.sample_interval,
            self.start_time,
        )
    }

    pub fn to_series(&self) -> Result<UniformSeries> {
        UniformSeries::with_start(self.values.clone(), self.sample_interval, self.start_time)
    }
}

/// Influence of every input sample on every output sample.
#[derive(Debug, Clone, PartialEq)]
pub enum InfluenceMatrix {
    Dense(DMatrix<f64>),
    /// Lower-triangular Toeplitz: `D[i][j] = impulse[i - j]` for `i >= j`.
    Toeplitz { impulse: Vec<f64> },
}

impl InfluenceMatrix {
    pub fn dim(&self) -> usize {
        match self {
            InfluenceMatrix::Dense(d) => d.ncols(),
            InfluenceMatrix::Toeplitz { impulse } => impulse.len(),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            InfluenceMatrix::Dense(d) => d.nrows(),
            InfluenceMatrix::Toeplitz { impulse } => impulse.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            InfluenceMatrix::Dense(d) => d.clone(),
            InfluenceMatrix::Toeplitz { impulse } => {
                let n = impulse.len();
                DMatrix::from_fn(n, n, |i, j| if i >= j { impulse[i - j] } else { 0.0 })
            }
        }
    }

    /// `D v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            InfluenceMatrix::Dense(d) => (d * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec(),
            InfluenceMatrix::Toeplitz { impulse } => {
                let n = impulse.len();
                let mut out = vec![0.0; n];
                for (j, &vj) in v.iter().enumerate() {
                    if vj == 0.0 {
                        continue;
                    }
                    for (o, h) in out[j..].iter_mut().zip(impulse) {
                        *o += h * vj;
                    }
                }
                out
            }
        }
    }

    /// `D' x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        match self {
            InfluenceMatrix::Dense(d) => (d.transpose() * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec(),
            InfluenceMatrix::Toeplitz { impulse } => (0..impulse.len())
                .map(|j| x[j..].iter().zip(impulse).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    /// `D'D`. The Toeplitz case uses the recursion
    /// `G[i][j] = G[i+1][j+1] + h[N-1-i] h[N-1-j]`.
    pub fn gram(&self) -> DMatrix<f64> {
        match self {
            InfluenceMatrix::Dense(d) => d.transpose() * d,
            InfluenceMatrix::Toeplitz { impulse: h } => {
                let n = h.len();
                let mut g = DMatrix::zeros(n, n);
                for lag in 0..n {
                    // walk the diagonal j - i = lag from the bottom-right corner
                    let mut acc = 0.0;
                    for i in (0..n - lag).rev() {
                        let j = i + lag;
                        acc += h[n - 1 - i] * h[n - 1 - j];
                        g[(i, j)] = acc;
                        g[(j, i)] = acc;
                    }
                }
                g
            }
        }
    }
}

/// Influence matrix of `tf` over `len` samples: column `j` is the forced
/// response to a unit impulse at sample `j`.
pub fn build_influence_matrix(tf: &DiscreteTransferFunction, len: usize) -> Result<InfluenceMatrix> {
    if !tf.is_stable() {
        return Err(UdmError::invalid("influence matrix requires a stable model"));
    }
    Ok(InfluenceMatrix::Toeplitz {
        impulse: tf.impulse_response(len),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub influence: InfluenceMatrix,
    pub target: Vec<f64>,
    pub alpha: f64,
    pub sample_interval: f64,
}

impl QpProblem {
    pub fn new(influence: InfluenceMatrix, target: Vec<f64>, alpha: f64, sample_interval: f64) -> Result<Self> {
        if target.len() != influence.rows() {
            return Err(UdmError::invalid(format!(
                "target length {} does not match influence rows {}",
                target.len(),
                influence.rows()
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(UdmError::invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        Ok(QpProblem {
            influence,
            target,
            alpha,
            sample_interval,
        })
    }

    /// `max(D'c)`, the smallest alpha for which `v = 0` is optimal.
    pub fn alpha_max(&self) -> f64 {
        self.influence
            .apply_transpose(&self.target)
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// `1/2 v'D'Dv + (alpha - D'c)'v`.
    pub fn objective(&self, v: &[f64]) -> f64 {
        let dv = self.influence.apply(v);
        let dtc = self.influence.apply_transpose(&self.target);
        0.5 * dv.iter().map(|x| x * x).sum::<f64>()
            + v.iter().zip(&dtc).map(|(vi, di)| (self.alpha - di) * vi).sum::<f64>()
    }

    /// Gradient `D'D v + alpha - D'c`.
    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = self
            .influence
            .apply(v)
            .iter()
            .zip(&self.target)
            .map(|(a, c)| a - c)
            .collect();
        self.influence
            .apply_transpose(&r)
            .into_iter()
            .map(|g| g + self.alpha)
            .collect()
    }

    /// Largest KKT violation: `max(-g_i)` over all `i` and
    /// `|v_i g_i| / (1 + |c|_inf)`.
    pub fn kkt_residual(&self, v: &[f64]) -> f64 {
        kkt_residual(v, &self.gradient(v), self.target_scale())
    }

    fn target_scale(&self) -> f64 {
        1.0 + self.target.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

fn kkt_residual(v: &[f64], g: &[f64], scale: f64) -> f64 {
    v.iter().zip(g).fold(0.0f64, |m, (vi, gi)| {
        m.max(-gi).max((vi * gi).abs() / scale)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub kkt_tolerance: f64,
    /// Defaults to `10 N` when `None`.
    pub max_iterations: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            kkt_tolerance: 1e-6,
            max_iterations: None,
        }
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub alpha: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnaEstimate {
    pub sna: SnaSignal,
    pub diagnostics: SolveDiagnostics,
}

/// Incrementally maintained Cholesky factor of `G[P, P]`.
struct ActiveFactor {
    set: Vec<usize>,
    /// Row-major lower triangle, row `k` has `k + 1` entries.
    rows: Vec<Vec<f64>>,
}

impl ActiveFactor {
    fn new() -> Self {
        ActiveFactor { set: Vec::new(), rows: Vec::new() }
    }

    /// Append index `j`; returns false when its column is numerically
    /// dependent on the current set.
    fn push(&mut self, gram: &DMatrix<f64>, j: usize) -> bool {
        let p = self.set.len();
        let mut w = Vec::with_capacity(p + 1);
        for k in 0..p {
            let mut s = gram[(self.set[k], j)];
            for m in 0..k {
                s -= self.rows[k][m] * w[m];
            }
            w.push(s / self.rows[k][k]);
        }
        let diag = gram[(j, j)] - w.iter().map(|x| x * x).sum::<f64>();
        if !(diag > 1e-13 * gram[(j, j)]) {
            return false;
        }
        w.push(diag.sqrt());
        self.rows.push(w);
        self.set.push(j);
        true
    }

    fn rebuild(&mut self, gram: &DMatrix<f64>, keep: Vec<usize>) {
        self.set.clear();
        self.rows.clear();
        for j in keep {
            // columns that were independent stay independent after removals
            self.push(gram, j);
        }
    }

    /// Solve `G[P,P] z = rhs`.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let p = self.set.len();
        let mut y = vec![0.0; p];
        for k in 0..p {
            let mut s = rhs[k];
            for m in 0..k {
                s -= self.rows[k][m] * y[m];
            }
            y[k] = s / self.rows[k][k];
        }
        for k in (0..p).rev() {
            let mut s = y[k];
            for m in (k + 1)..p {
                s -= self.rows[m][k] * y[m];
            }
            y[k] = s / self.rows[k][k];
        }
        y
    }
}

/// Solve the nonnegative QP to the KKT tolerance.
///
/// Primal active-set method on the Gram matrix: the free set grows by the
/// most negative gradient component; infeasible subproblem solutions are
/// resolved by stepping back to the feasible boundary and releasing the
/// blocking variables.
pub fn solve_sna(problem: &QpProblem, options: &SolveOptions) -> Result<SnaEstimate> {
    PreparedQp::new(problem).solve(problem.alpha, options)
}

/// Gram matrix and `D'c` of a problem, shared across alphas.
#[derive(Debug, Clone)]
pub struct PreparedQp {
    gram: DMatrix<f64>,
    dtc: Vec<f64>,
    scale: f64,
    sample_interval: f64,
}

impl PreparedQp {
    pub fn new(problem: &QpProblem) -> Self {
        PreparedQp {
            gram: problem.influence.gram(),
            dtc: problem.influence.apply_transpose(&problem.target),
            scale: problem.target_scale(),
            sample_interval: problem.sample_interval,
        }
    }

    pub fn alpha_max(&self) -> f64 {
        self.dtc.iter().copied().fold(0.0, f64::max)
    }

    pub fn solve(&self, alpha: f64, options: &SolveOptions) -> Result<SnaEstimate> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(UdmError::invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        solve_prepared(self, alpha, options)
    }

    /// Unpenalized refit of one nonnegative gain per burst of `estimate`:
    /// each burst keeps its shape and is rescaled by the least-squares
    /// optimal factor. Removes the L1 shrinkage of the amplitudes without
    /// splitting bursts; the support can only shrink.
    pub fn debias(&self, estimate: &SnaEstimate, options: &SolveOptions) -> Result<SnaEstimate> {
        let values = estimate.sna.values();
        let mut bursts: Vec<(usize, usize)> = Vec::new();
        for (i, &x) in values.iter().enumerate() {
            if x > 0.0 {
                match bursts.last_mut() {
                    Some((_, end)) if *end == i => *end = i + 1,
                    _ => bursts.push((i, i + 1)),
                }
            }
        }
        let m = bursts.len();
        let profiles: Vec<DVector<f64>> = bursts
            .iter()
            .map(|&(lo, hi)| {
                let mut p = DVector::zeros(values.len());
                p.rows_mut(lo, hi - lo).copy_from_slice(&values[lo..hi]);
                p
            })
            .collect();
        let weighted: Vec<DVector<f64>> = profiles.iter().map(|p| &self.gram * p).collect();
        let gram = DMatrix::from_fn(m, m, |j, k| profiles[j].dot(&weighted[k]));
        let dtc = profiles.iter().map(|p| p.iter().zip(&self.dtc).map(|(a, b)| a * b).sum()).collect();
        let gains = solve_prepared(
            &PreparedQp {
                gram,
                dtc,
                scale: self.scale,
                sample_interval: self.sample_interval,
            },
            0.0,
            options,
        )?;
        let mut refit = vec![0.0; values.len()];
        for (&(lo, hi), &g) in bursts.iter().zip(gains.sna.values()) {
            for i in lo..hi {
                refit[i] = g * values[i];
            }
        }
        Ok(SnaEstimate {
            sna: SnaSignal::new(refit, self.sample_interval)?,
            diagnostics: estimate.diagnostics,
        })
    }
}

fn solve_prepared(prepared: &PreparedQp, alpha: f64, options: &SolveOptions) -> Result<SnaEstimate> {
    let gram = &prepared.gram;
    let n = prepared.dtc.len();
    let max_iterations = options.max_iterations.unwrap_or(10 * n.max(1));
    let tol = options.kkt_tolerance;
    let q: Vec<f64> = prepared.dtc.iter().map(|d| alpha - d).collect();
    let scale = prepared.scale;

    let mut v = vec![0.0; n];
    let mut grad = q.clone();
    let mut factor = ActiveFactor::new();
    let mut in_set = vec![false; n];
    let mut blocked = vec![false; n];
    let mut iterations = 0usize;
    let add_tol = 0.1 * tol;

    let refresh_gradient = |v: &[f64], set: &[usize], grad: &mut Vec<f64>| {
        grad.copy_from_slice(&q);
        for &k in set {
            let vk = v[k];
            if vk != 0.0 {
                for (g, gk) in grad.iter_mut().zip(gram.column(k).iter()) {
                    *g += gk * vk;
                }
            }
        }
    };

    loop {
        let entering = (0..n)
            .filter(|&j| !in_set[j] && !blocked[j] && grad[j] < -add_tol)
            .min_by(|&x, &y| grad[x].total_cmp(&grad[y]));
        let Some(j) = entering else { break };
        if iterations >= max_iterations {
            break;
        }
        iterations += 1;
        if !factor.push(gram, j) {
            blocked[j] = true;
            continue;
        }
        in_set[j] = true;

        loop {
            iterations += 1;
            let rhs: Vec<f64> = factor.set.iter().map(|&k| -q[k]).collect();
            let z = factor.solve(&rhs);
            if z.iter().all(|&zk| zk > 0.0) {
                for (&k, &zk) in factor.set.iter().zip(&z) {
                    v[k] = zk;
                }
                break;
            }
            // step from v toward z until the first coordinate hits zero
            let ratios: Vec<f64> = factor
                .set
                .iter()
                .zip(&z)
                .map(|(&k, &zk)| {
                    if zk > 0.0 {
                        f64::INFINITY
                    } else {
                        let denom = v[k] - zk;
                        if denom > 0.0 { v[k] / denom } else { 0.0 }
                    }
                })
                .collect();
            let t = ratios.iter().copied().fold(1.0f64, f64::min);
            let mut keep = Vec::with_capacity(factor.set.len());
            let mut dropped_entering = false;
            for ((&k, &zk), &r) in factor.set.iter().zip(&z).zip(&ratios) {
                let next = v[k] + t * (zk - v[k]);
                if r <= t || next <= 0.0 {
                    v[k] = 0.0;
                    in_set[k] = false;
                    dropped_entering |= k == j;
                } else {
                    v[k] = next;
                    keep.push(k);
                }
            }
            factor.rebuild(gram, keep);
            if dropped_entering && t == 0.0 {
                // the new index cannot move off its bound; leave it out until the set changes
                blocked[j] = true;
            }
            if factor.set.is_empty() || iterations >= max_iterations {
                break;
            }
        }
        if !blocked[j] {
            blocked.iter_mut().for_each(|b| *b = false);
        }
        refresh_gradient(&v, &factor.set, &mut grad);
    }

    // final certificate from a fresh gradient
    let grad = {
        let mut g = q.clone();
        for k in 0..n {
            if v[k] != 0.0 {
                for (gi, gk) in g.iter_mut().zip(gram.column(k).iter()) {
                    *gi += gk * v[k];
                }
            }
        }
        g
    };
    let residual = kkt_residual(&v, &grad, scale);
    if residual > tol {
        return Err(UdmError::NonConverged {
            iterations,
            residual,
            best: v,
        });
    }
    let objective = 0.5 * v.iter().zip(&grad).zip(&q).map(|((vi, gi), qi)| vi * (gi + qi)).sum::<f64>();
    Ok(SnaEstimate {
        sna: SnaSignal::new(v, prepared.sample_interval)?,
        diagnostics: SolveDiagnostics {
            alpha,
            iterations,
            kkt_residual: residual,
            objective,
        },
    })
}

/// One point of a regularisation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub alpha: f64,
    pub l1_norm: f64,
    pub support_size: usize,
}

/// Solve the problem for each alpha in a strictly increasing grid.
pub fn l1_path_check(problem: &QpProblem, alphas: &[f64], options: &SolveOptions) -> Result<Vec<PathPoint>> {
    if alphas.iter().any(|a| !(*a >= 0.0)) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(UdmError::invalid("alphas must be nonnegative and strictly increasing"));
    }
    let prepared = PreparedQp::new(problem);
    alphas
        .iter()
        .map(|&alpha| {
            let est = prepared.solve(alpha, options)?;
            Ok(PathPoint {
                alpha,
                l1_norm: est.sna.l1_norm(),
                support_size: est.sna.support_size(),
            })
        })
        .collect()
}

/// `count` log-spaced points from `lo * alpha_max` to `hi * alpha_max`.
pub fn relative_alpha_grid(alpha_max: f64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo * alpha_max];
    }
    let (l, h) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| alpha_max * (l + (h - l) * k as f64 / (count - 1) as f64).exp())
        .collect()
}
