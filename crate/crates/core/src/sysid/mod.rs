//! Transfer-function and initial-state estimation for a known input.
//!
//! An equation-error (ARX) least-squares fit provides a starting point,
//! which Gauss-Newton refines against the simulation (output) error jointly
//! over the coefficients and the initial state. Jacobians come from exact
//! forward sensitivity recursions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::deconv::SnaSignal;
use crate::error::{Result, UdmError};
use crate::lti::{self, poly, run_recursion, DiscreteTransferFunction, InitialState, PruneReason};
use crate::signal::UniformSeries;

const RCOND: f64 = 1e-12;
/// Levenberg-Marquardt damping levels (relative to the largest squared
/// singular value) tried after the truncated step fails.
const DAMPING: [f64; 5] = [1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysIdConfig {
    pub order: usize,
    pub max_gn_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub gn_tolerance: f64,
    /// Largest pole magnitude a refined model may have.
    pub stability_margin: f64,
    /// Estimate the feedthrough coefficient `b0`; when false it is held at 0.
    pub estimate_direct_term: bool,
    /// Complex pairs oscillating slower than this (seconds) are pruned.
    pub prune_period: f64,
    /// Reject Gauss-Newton steps that create a complex pair slower than
    /// `prune_period` when the start has none.
    pub forbid_slow_oscillation: bool,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig {
            order: 4,
            max_gn_iterations: 50,
            gn_tolerance: 1e-8,
            stability_margin: 0.9999,
            estimate_direct_term: true,
            prune_period: 1.0,
            forbid_slow_oscillation: true,
        }
    }
}

impl SysIdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.order) {
            return Err(UdmError::invalid(format!("order must be in 2..=6, got {}", self.order)));
        }
        if !(self.gn_tolerance > 0.0) || self.max_gn_iterations == 0 {
            return Err(UdmError::invalid("Gauss-Newton tolerance and iteration cap must be positive"));
        }
        if !(self.stability_margin > 0.0 && self.stability_margin < 1.0) {
            return Err(UdmError::invalid("stability margin must lie in (0, 1)"));
        }
        if !(self.prune_period > 0.0) {
            return Err(UdmError::invalid("prune period must be positive"));
        }
        Ok(())
    }
}

/// Result of the equation-error fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxEstimate {
    pub tf: DiscreteTransferFunction,
    pub init: InitialState,
    /// False when some pole lies on or outside the unit circle.
    pub stable: bool,
}

/// Result of output-error refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub tf: DiscreteTransferFunction,
    pub init: InitialState,
    /// Cost before the first step, then after each accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    /// Set when the iteration stopped because no step length reduced the cost.
    pub warning: Option<String>,
}

impl RefineOutcome {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history is never empty")
    }
}

impl JointOutcome {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history is never empty")
    }
}

fn check_pair(sc: &UniformSeries, v: &SnaSignal) -> Result<()> {
    if sc.len() != v.len() {
        return Err(UdmError::invalid(format!(
            "series length {} differs from input length {}",
            sc.len(),
            v.len()
        )));
    }
    if (sc.sample_interval() - v.sample_interval()).abs() > 1e-9 * sc.sample_interval() {
        return Err(UdmError::invalid("series and input sample intervals differ"));
    }
    Ok(())
}

/// Minimum-norm least squares with column equilibration. Columns that are
/// identically zero get a zero coefficient. Fails when the remaining columns
/// are numerically rank deficient.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let cols = x.ncols();
    let norms: Vec<f64> = (0..cols).map(|j| x.column(j).norm()).collect();
    let active: Vec<usize> = (0..cols).filter(|&j| norms[j] > 0.0).collect();
    let mut theta = DVector::zeros(cols);
    if active.is_empty() {
        return Ok(theta);
    }
    let mut scaled = DMatrix::zeros(x.nrows(), active.len());
    for (k, &j) in active.iter().enumerate() {
        scaled.set_column(k, &(x.column(j) / norms[j]));
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RCOND * smax) {
        return Err(UdmError::IllConditioned(format!(
            "{what}: regressor condition {:.3e} exceeds {:.0e}",
            smax / smin,
            1.0 / RCOND
        )));
    }
    let z = svd
        .solve(y, 0.0)
        .map_err(|e| UdmError::Numeric(format!("{what}: {e}")))?;
    for (k, &j) in active.iter().enumerate() {
        theta[j] = z[k] / norms[j];
    }
    Ok(theta)
}

/// Free response of `a` for each unit prior output `e_j`, as columns.
fn free_basis(a: &[f64], len: usize) -> DMatrix<f64> {
    let n = a.len();
    let zeros = vec![0.0; len];
    let mut basis = DMatrix::zeros(len, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = run_recursion(a, &[0.0], Some(&e), &zeros);
        basis.set_column(j, &DVector::from_vec(col));
    }
    basis
}

/// Least-squares initial state so that free response + forced response
/// matches `target`.
fn fit_initial_state(a: &[f64], b: &[f64], v: &[f64], target: &[f64]) -> Result<InitialState> {
    let forced = run_recursion(a, b, None, v);
    let rhs = DVector::from_iterator(target.len(), target.iter().zip(&forced).map(|(s, f)| s - f));
    let basis = free_basis(a, target.len());
    let s = least_squares(&basis, &rhs, "initial state")?;
    InitialState::new(s.iter().copied().collect())
}

/// Fit the initial state of a fixed model so its free response matches
/// `free_target` in least squares.
pub fn fit_state_to_free_response(tf: &DiscreteTransferFunction, free_target: &[f64]) -> Result<InitialState> {
    let basis = free_basis(tf.a(), free_target.len());
    let s = least_squares(&basis, &DVector::from_column_slice(free_target), "initial state")?;
    InitialState::new(s.iter().copied().collect())
}

/// Equation-error least squares for `(a, b)` followed by a least-squares
/// initial state.
pub fn estimate_arx(sc: &UniformSeries, v: &SnaSignal, order: usize) -> Result<ArxEstimate> {
    estimate_arx_with(sc, v, order, true)
}

pub fn estimate_arx_with(
    sc: &UniformSeries,
    v: &SnaSignal,
    order: usize,
    estimate_direct_term: bool,
) -> Result<ArxEstimate> {
    check_pair(sc, v)?;
    if order == 0 {
        return Err(UdmError::invalid("order must be at least 1"));
    }
    let n = order;
    let len = sc.len();
    let min_len = 10 * (2 * n + 1);
    if len < min_len {
        return Err(UdmError::InsufficientData(format!(
            "order {n} needs at least {min_len} samples, got {len}"
        )));
    }
    let y = sc.samples();
    let u = v.values();
    let rows = len - n;
    let params = 2 * n + 1;
    let mut x = DMatrix::zeros(rows, params);
    let mut target = DVector::zeros(rows);
    for (r, t) in (n..len).enumerate() {
        for k in 1..=n {
            x[(r, k - 1)] = -y[t - k];
        }
        for k in 0..=n {
            if k == 0 && !estimate_direct_term {
                continue;
            }
            x[(r, n + k)] = u[t - k];
        }
        target[r] = y[t];
    }
    let theta = least_squares(&x, &target, "ARX regression")?;
    let a: Vec<f64> = theta.rows(0, n).iter().copied().collect();
    let b: Vec<f64> = theta.rows(n, n + 1).iter().copied().collect();
    let tf = DiscreteTransferFunction::new(a, b, sc.sample_interval())?;
    let init = fit_initial_state(tf.a(), tf.b(), u, y)?;
    let stable = tf.is_stable();
    Ok(ArxEstimate { tf, init, stable })
}

/// Iteratively prefiltered least squares (Steiglitz-McBride). Starting from
/// the equation-error fit, the output, input and a unit impulse carrying the
/// initial-condition polynomial are filtered by the current `1/A` and the
/// regression is solved again, which removes the bias that coloured
/// equation noise gives the plain fit. Poles are clamped to `margin` after
/// every pass.
pub fn estimate_prefiltered(
    sc: &UniformSeries,
    v: &SnaSignal,
    order: usize,
    estimate_direct_term: bool,
    margin: f64,
    passes: usize,
) -> Result<ArxEstimate> {
    let arx = estimate_arx_with(sc, v, order, estimate_direct_term)?;
    let n = order;
    let y = sc.samples();
    let u = v.values();
    let len = y.len();
    let mut impulse = vec![0.0; len];
    impulse[0] = 1.0;
    let mut tf = clamp_poles(&arx.tf, margin)?;
    let first_b = if estimate_direct_term { 0 } else { 1 };
    let unit = [1.0];
    for _ in 0..passes {
        let yf = run_recursion(tf.a(), &unit, None, y);
        let uf = run_recursion(tf.a(), &unit, None, u);
        let df = run_recursion(tf.a(), &unit, None, &impulse);
        let cols = n + (n + 1 - first_b) + n;
        let mut x = DMatrix::zeros(len, cols);
        for t in 0..len {
            for k in 1..=n.min(t) {
                x[(t, k - 1)] = -yf[t - k];
            }
            for (c, k) in (first_b..=n).enumerate() {
                if k <= t {
                    x[(t, n + c)] = uf[t - k];
                }
            }
            let off = n + (n + 1 - first_b);
            for k in 0..n.min(t + 1) {
                x[(t, off + k)] = df[t - k];
            }
        }
        let Some(theta) = least_squares_truncated(&x, &DVector::from_column_slice(&yf), RCOND) else {
            break;
        };
        let a: Vec<f64> = theta.rows(0, n).iter().copied().collect();
        let mut b = vec![0.0; n + 1];
        for (c, k) in (first_b..=n).enumerate() {
            b[k] = theta[n + c];
        }
        if a.iter().chain(&b).any(|c| !c.is_finite()) {
            break;
        }
        let next = clamp_poles(&DiscreteTransferFunction::new(a, b, sc.sample_interval())?, margin)?;
        let change = next
            .a()
            .iter()
            .zip(tf.a())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        tf = next;
        if change < 1e-12 {
            break;
        }
    }
    let init = fit_initial_state(tf.a(), tf.b(), u, y)?;
    let stable = tf.is_stable();
    Ok(ArxEstimate { tf, init, stable })
}

/// Log-spaced candidate time constants from `2 dt` (at least 0.2 s) to half
/// the recording.
pub fn time_constant_grid(sample_interval: f64, duration: f64, points: usize) -> Vec<f64> {
    let lo = (2.0 * sample_interval).max(0.2).ln();
    let hi = (0.5 * duration).max(1.0).ln();
    (0..points)
        .map(|k| (lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64).exp())
        .collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..=(n - (k - cur.len())) {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Best real-pole model with poles drawn from `time_constants`. For fixed
/// poles the gains, the direct term and the free-response amplitudes enter
/// linearly, so every `order`-subset of the grid is scored by least squares
/// on shared normal equations.
pub fn estimate_pole_grid(
    sc: &UniformSeries,
    v: &SnaSignal,
    order: usize,
    estimate_direct_term: bool,
    time_constants: &[f64],
) -> Result<ArxEstimate> {
    check_pair(sc, v)?;
    let m = time_constants.len();
    if order == 0 || order > m {
        return Err(UdmError::invalid(format!("order {order} needs at least as many grid points, got {m}")));
    }
    let dt = sc.sample_interval();
    let y = sc.samples();
    let u = v.values();
    let len = y.len();
    let poles: Vec<f64> = time_constants.iter().map(|t| (-dt / t).exp()).collect();
    // columns: forced response of 1/(z - p_i), modes p_i^t, direct term
    let mut x = DMatrix::zeros(len, 2 * m + 1);
    for (i, &p) in poles.iter().enumerate() {
        x.set_column(i, &DVector::from_vec(run_recursion(&[-p], &[0.0, 1.0], None, u)));
        let mut mode = 1.0;
        for t in 0..len {
            x[(t, m + i)] = mode;
            mode *= p;
        }
    }
    if estimate_direct_term {
        x.set_column(2 * m, &DVector::from_column_slice(u));
    }
    let yv = DVector::from_column_slice(y);
    let gram = x.tr_mul(&x);
    let xty = x.tr_mul(&yv);
    let yy = yv.dot(&yv);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for combo in combinations(m, order) {
        let mut cols: Vec<usize> = combo.iter().copied().chain(combo.iter().map(|i| m + i)).collect();
        if estimate_direct_term {
            cols.push(2 * m);
        }
        let k = cols.len();
        let scale: Vec<f64> = cols.iter().map(|&c| gram[(c, c)].sqrt().max(f64::MIN_POSITIVE)).collect();
        let g = DMatrix::from_fn(k, k, |i, j| gram[(cols[i], cols[j])] / (scale[i] * scale[j]));
        let r = DVector::from_fn(k, |i, _| xty[cols[i]] / scale[i]);
        let Some(chol) = g.clone().cholesky() else { continue };
        let theta = chol.solve(&r);
        let cost = yy - theta.dot(&r);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, combo));
        }
    }
    let Some((_, combo)) = best else {
        return Err(UdmError::IllConditioned("no pole subset gave a solvable regression".into()));
    };
    // refit the chosen subset by SVD
    let mut cols: Vec<usize> = combo.iter().copied().collect();
    if estimate_direct_term {
        cols.push(2 * m);
    }
    let mut xs = DMatrix::zeros(len, cols.len() + order);
    for (j, &c) in cols.iter().enumerate() {
        xs.set_column(j, &x.column(c));
    }
    for (j, &i) in combo.iter().enumerate() {
        xs.set_column(cols.len() + j, &x.column(m + i));
    }
    let theta = least_squares(&xs, &yv, "pole grid")?;
    let set = lti::SubsystemSet {
        subsystems: combo
            .iter()
            .enumerate()
            .map(|(j, &i)| lti::Subsystem::Real {
                gain: theta[j],
                pole: poles[i],
            })
            .collect(),
        direct_term: if estimate_direct_term { theta[order] } else { 0.0 },
        sample_interval: dt,
    };
    let tf = set.to_transfer_function()?;
    let init = fit_initial_state(tf.a(), tf.b(), u, y)?;
    let stable = tf.is_stable();
    Ok(ArxEstimate { tf, init, stable })
}

/// Pull every pole with magnitude above `margin` radially back to `margin`.
/// Returns the model unchanged when it already complies.
pub fn clamp_poles(tf: &DiscreteTransferFunction, margin: f64) -> Result<DiscreteTransferFunction> {
    let poles = tf.poles()?;
    if poles.iter().all(|p| p.norm() <= margin) {
        return Ok(tf.clone());
    }
    let clamped: Vec<Complex64> = poles
        .iter()
        .map(|&p| if p.norm() > margin { p * (margin / p.norm()) } else { p })
        .collect();
    let den = poly::from_roots(&clamped);
    DiscreteTransferFunction::new(den[1..].to_vec(), tf.b().to_vec(), tf.sample_interval())
}

/// Parameter vector layout: `[a1..an, b0..bn, y(-1)..y(-n)]`, with `b0`
/// absent when the direct term is fixed at zero.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    direct: bool,
}

impl Layout {
    fn b_count(&self) -> usize {
        if self.direct {
            self.n + 1
        } else {
            self.n
        }
    }

    fn len(&self) -> usize {
        self.n + self.b_count() + self.n
    }

    fn pack(&self, tf: &DiscreteTransferFunction, init: &InitialState) -> Vec<f64> {
        let mut p = tf.a().to_vec();
        if self.direct {
            p.extend_from_slice(tf.b());
        } else {
            p.extend_from_slice(&tf.b()[1..]);
        }
        p.extend_from_slice(init.prior_outputs());
        p
    }

    fn unpack(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let a = p[..n].to_vec();
        let nb = self.b_count();
        let mut b = Vec::with_capacity(n + 1);
        if !self.direct {
            b.push(0.0);
        }
        b.extend_from_slice(&p[n..n + nb]);
        let s = p[n + nb..].to_vec();
        (a, b, s)
    }
}

/// Denominator as a product of monic factors: `z - p` for a real pole and
/// `z^2 + c1 z + c2` for a complex pair. Far better conditioned than raw
/// coefficients when poles cluster near 1.
#[derive(Debug, Clone)]
struct Factored {
    degrees: Vec<usize>,
}

impl Factored {
    fn new(a: &[f64]) -> Option<(Self, Vec<f64>)> {
        let den: Vec<f64> = std::iter::once(1.0).chain(a.iter().copied()).collect();
        let roots = lti::polynomial_roots(&den).ok()?;
        let mut degrees = Vec::new();
        let mut theta = Vec::with_capacity(a.len());
        let mut i = 0;
        while i < roots.len() {
            let z = roots[i];
            if z.im == 0.0 {
                degrees.push(1);
                theta.push(z.re);
                i += 1;
            } else {
                degrees.push(2);
                theta.extend([-2.0 * z.re, z.norm_sqr()]);
                i += 2;
            }
        }
        Some((Self { degrees }, theta))
    }

    fn factors(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let mut k = 0;
        self.degrees
            .iter()
            .map(|&d| {
                let f = if d == 1 {
                    vec![1.0, -theta[k]]
                } else {
                    vec![1.0, theta[k], theta[k + 1]]
                };
                k += d;
                f
            })
            .collect()
    }

    fn coefficients(&self, theta: &[f64]) -> Vec<f64> {
        let den = self.factors(theta).iter().fold(vec![1.0], |acc, f| poly::mul(&acc, f));
        den[1..].to_vec()
    }

    /// `d a / d theta` as an `n x n` matrix.
    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = theta.len();
        let factors = self.factors(theta);
        let mut out = DMatrix::zeros(n, n);
        let mut col = 0;
        for (i, &d) in self.degrees.iter().enumerate() {
            let rest = factors
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold(vec![1.0], |acc, (_, f)| poly::mul(&acc, f));
            // rest has degree n - d; a_k multiplies z^(n-k)
            let derivs: Vec<(Vec<f64>, f64)> = if d == 1 {
                vec![(rest.clone(), -1.0)]
            } else {
                let mut shifted = rest.clone();
                shifted.push(0.0);
                vec![(shifted, 1.0), (rest.clone(), 1.0)]
            };
            for (poly_d, sign) in derivs {
                let deg = poly_d.len() - 1;
                for (idx, c) in poly_d.iter().enumerate() {
                    let k = n - deg + idx;
                    if k >= 1 {
                        out[(k - 1, col)] = sign * c;
                    }
                }
                col += 1;
            }
        }
        out
    }
}

/// Refinement parameters: [`Layout`] with the denominator factored when
/// its roots can be computed.
struct Parameters {
    layout: Layout,
    factored: Option<Factored>,
}

impl Parameters {
    fn new(layout: Layout, tf: &DiscreteTransferFunction, init: &InitialState) -> (Self, Vec<f64>) {
        let mut p = layout.pack(tf, init);
        let factored = Factored::new(tf.a()).map(|(f, theta)| {
            p[..layout.n].copy_from_slice(&theta);
            f
        });
        (Self { layout, factored }, p)
    }

    fn unpack(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (a, b, s) = self.layout.unpack(p);
        match &self.factored {
            Some(f) => (f.coefficients(&a), b, s),
            None => (a, b, s),
        }
    }

    fn linearize(&self, p: &[f64], v: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.layout.n;
        let (a, b, s) = self.unpack(p);
        let (y, mut jac) = sensitivities(self.layout, &a, &b, &s, v);
        if let Some(f) = &self.factored {
            let chained = jac.columns(0, n) * f.jacobian(&p[..n]);
            jac.columns_mut(0, n).copy_from(&chained);
        }
        (y, jac)
    }
}

/// Model output and its Jacobian with respect to `[a, b, initial state]`
/// (column order `a1..an, b0..bn, y(-1)..y(-n)`), by forward sensitivity
/// recursions.
pub fn output_sensitivities(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    v: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if init.len() != tf.order() {
        return Err(UdmError::invalid("initial state length differs from model order"));
    }
    let layout = Layout { n: tf.order(), direct: true };
    Ok(sensitivities(layout, tf.a(), tf.b(), init.prior_outputs(), v))
}

fn sensitivities(layout: Layout, a: &[f64], b: &[f64], s: &[f64], v: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = layout.n;
    let len = v.len();
    let y = run_recursion(a, b, Some(s), v);
    let mut jac = DMatrix::zeros(len, layout.len());
    let unit = [1.0];
    // d y(t) / d a_j: filter -y(t - j) through 1/A
    for j in 1..=n {
        let u: Vec<f64> = (0..len)
            .map(|t| if t >= j { -y[t - j] } else { -s[j - t - 1] })
            .collect();
        jac.set_column(j - 1, &DVector::from_vec(run_recursion(a, &unit, None, &u)));
    }
    // d y(t) / d b_k: filter v(t - k) through 1/A
    let first_b = if layout.direct { 0 } else { 1 };
    for (col, k) in (first_b..=n).enumerate() {
        let u: Vec<f64> = (0..len).map(|t| if t >= k { v[t - k] } else { 0.0 }).collect();
        jac.set_column(n + col, &DVector::from_vec(run_recursion(a, &unit, None, &u)));
    }
    // d y(t) / d y(-j): free response of a unit prior output
    let basis = free_basis(a, len);
    let offset = n + layout.b_count();
    for j in 0..n {
        jac.set_column(offset + j, &basis.column(j));
    }
    (y, jac)
}

fn sum_sq_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Spectral radius and whether some complex pair oscillates slower than
/// `period` seconds.
fn pole_summary(a: &[f64], sample_interval: f64, period: f64) -> Option<(f64, bool)> {
    let den: Vec<f64> = std::iter::once(1.0).chain(a.iter().copied()).collect();
    lti::polynomial_roots(&den).ok().map(|r| {
        let radius = r.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let slow = r.iter().any(|p| p.im != 0.0 && 2.0 * std::f64::consts::PI * sample_interval / p.arg().abs() > period);
        (radius, slow)
    })
}

/// Gauss-Newton on the simulation error, jointly over coefficients and
/// initial state, with step halving and stability-constrained steps.
pub fn refine_output_error(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    sc: &UniformSeries,
    v: &SnaSignal,
    config: &SysIdConfig,
) -> Result<RefineOutcome> {
    check_pair(sc, v)?;
    if init.len() != tf.order() {
        return Err(UdmError::invalid("initial state length differs from model order"));
    }
    let start = clamp_poles(tf, config.stability_margin)?;
    let init = if start == *tf {
        init.clone()
    } else {
        fit_initial_state(start.a(), start.b(), v.values(), sc.samples())?
    };
    let layout = Layout {
        n: start.order(),
        direct: config.estimate_direct_term,
    };
    let target = sc.samples();
    let u = v.values();
    let scale = target.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let (param, mut params) = Parameters::new(layout, &start, &init);
    let dt = sc.sample_interval();
    let guard_oscillation = config.forbid_slow_oscillation
        && !pole_summary(start.a(), dt, config.prune_period).is_some_and(|(_, slow)| slow);

    let params_len = params.len();
    let feasible = |a: &[f64]| {
        pole_summary(a, dt, config.prune_period)
            .is_some_and(|(r, slow)| r <= config.stability_margin && !(slow && guard_oscillation))
    };
    let gn = gauss_newton(
        params,
        |p| {
            let (y, jac) = param.linearize(p, u);
            (residual(target, &y), jac)
        },
        |p| {
            let (a, b, s) = param.unpack(p);
            feasible(&a).then(|| sum_sq_diff(&run_recursion(&a, &b, Some(&s), u), target))
        },
        params_len,
        RCOND,
        config,
        scale,
    );
    params = gn.params;
    let (a, b, s) = param.unpack(&params);
    Ok(RefineOutcome {
        tf: DiscreteTransferFunction::new(a, b, sc.sample_interval())?,
        init: InitialState::new(s)?,
        cost_history: gn.history,
        iterations: gn.iterations,
        warning: gn.warning,
    })
}

fn residual(target: &[f64], y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(target.len(), target.iter().zip(y).map(|(t, m)| t - m))
}

struct GnRun {
    params: Vec<f64>,
    history: Vec<f64>,
    iterations: usize,
    warning: Option<String>,
}

/// Damped Gauss-Newton: full step, halved up to 20 times until the
/// projected candidate is feasible (`cost` returns `Some`) and cheaper,
/// then increasingly damped steps. `linearize` returns the residual and its
/// Jacobian.
/// Parameters at index `lower_from` and beyond are bounded below by zero;
/// those at the bound whose gradient points outward are held fixed.
fn gauss_newton(
    mut params: Vec<f64>,
    linearize: impl Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
    cost: impl Fn(&[f64]) -> Option<f64>,
    lower_from: usize,
    rcond: f64,
    config: &SysIdConfig,
    scale: f64,
) -> GnRun {
    let mut current = cost(&params).unwrap_or(f64::INFINITY);
    let mut history = vec![current];
    let mut warning = None;
    let mut iterations = 0;
    while iterations < config.max_gn_iterations {
        if current <= 1e-28 * scale {
            break;
        }
        iterations += 1;
        let (resid, mut jac) = linearize(&params);
        for j in lower_from..params.len() {
            if params[j] <= 0.0 && jac.column(j).dot(&resid) <= 0.0 {
                jac.column_mut(j).fill(0.0);
            }
        }
        let Some(solver) = StepSolver::new(&jac, &resid, rcond) else {
            warning = Some("Gauss-Newton system could not be solved".to_string());
            break;
        };
        // the truncated step with halving, then increasingly damped steps
        let attempts = std::iter::once((0.0, 20)).chain(DAMPING.iter().map(|&d| (d, 4)));
        let mut accepted = None;
        'search: for (damping, halvings) in attempts {
            let step = solver.step(damping);
            let mut lambda = 1.0;
            for _ in 0..=halvings {
                let mut cand: Vec<f64> = params.iter().zip(step.iter()).map(|(p, d)| p + lambda * d).collect();
                cand[lower_from..].iter_mut().for_each(|x| *x = x.max(0.0));
                if cand.iter().all(|x| x.is_finite()) {
                    if let Some(c) = cost(&cand).filter(|c| *c < current) {
                        accepted = Some((cand, c));
                        break 'search;
                    }
                }
                lambda *= 0.5;
            }
        }
        match accepted {
            Some((cand, c)) => {
                let rel = (current - c) / current;
                params = cand;
                current = c;
                history.push(current);
                if rel < config.gn_tolerance {
                    break;
                }
            }
            None => {
                if current > 1e-20 * scale {
                    warning = Some(format!("no cost-reducing step at iteration {iterations}"));
                }
                break;
            }
        }
    }
    GnRun {
        params,
        history,
        iterations,
        warning,
    }
}

/// Result of joint refinement of the model and the SNA on its support.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub tf: DiscreteTransferFunction,
    pub init: InitialState,
    pub sna: SnaSignal,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub warning: Option<String>,
}

/// Gauss-Newton jointly over the model, the initial state and the SNA
/// samples on the support of `v` extended by `lookahead` samples after each
/// nonzero sample (kept nonnegative), minimizing the squared simulation
/// error. Alternating model and SNA updates converge slowly along the valley
/// where a faster model trades against a wider burst; the joint step follows
/// it directly. The support only grows forward: with noise, nonnegativity
/// otherwise lets bursts creep earlier and the model slow down to match.
pub fn refine_joint(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    sc: &UniformSeries,
    v: &SnaSignal,
    lookahead: usize,
    config: &SysIdConfig,
) -> Result<JointOutcome> {
    check_pair(sc, v)?;
    if init.len() != tf.order() {
        return Err(UdmError::invalid("initial state length differs from model order"));
    }
    let start = clamp_poles(tf, config.stability_margin)?;
    let layout = Layout {
        n: start.order(),
        direct: config.estimate_direct_term,
    };
    let mut in_support = vec![false; v.len()];
    for i in (0..v.len()).filter(|&i| v.values()[i] > 0.0) {
        let hi = (i + lookahead).min(v.len() - 1);
        in_support[i..=hi].fill(true);
    }
    let support: Vec<usize> = (0..v.len()).filter(|&i| in_support[i]).collect();
    let m = layout.len();
    let target = sc.samples();
    let len = target.len();
    let dt = sc.sample_interval();
    let scale = target.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let guard_oscillation = config.forbid_slow_oscillation
        && !pole_summary(start.a(), dt, config.prune_period).is_some_and(|(_, slow)| slow);

    let (param, mut params) = Parameters::new(layout, &start, init);
    params.extend(support.iter().map(|&i| v.values()[i]));
    let expand = |p: &[f64]| {
        let mut u = vec![0.0; len];
        for (k, &i) in support.iter().enumerate() {
            u[i] = p[m + k];
        }
        u
    };
    let mut impulse = vec![0.0; len];
    impulse[0] = 1.0;
    let gn = gauss_newton(
        params,
        |p| {
            let model = &p[..m];
            let (a, b, _) = param.unpack(model);
            let (y, model_jac) = param.linearize(model, &expand(p));
            let h = run_recursion(&a, &b, None, &impulse);
            let mut jac = DMatrix::zeros(len, m + support.len());
            jac.columns_mut(0, m).copy_from(&model_jac);
            for (k, &i) in support.iter().enumerate() {
                let mut col = jac.column_mut(m + k);
                for t in i..len {
                    col[t] = h[t - i];
                }
            }
            (residual(target, &y), jac)
        },
        |p| {
            let (a, b, s) = param.unpack(&p[..m]);
            let feasible = pole_summary(&a, dt, config.prune_period)
                .is_some_and(|(r, slow)| r <= config.stability_margin && !(slow && guard_oscillation));
            feasible.then(|| sum_sq_diff(&run_recursion(&a, &b, Some(&s), &expand(p)), target))
        },
        m,
        RCOND,
        config,
        scale,
    );
    let (a, b, s) = param.unpack(&gn.params[..m]);
    Ok(JointOutcome {
        tf: DiscreteTransferFunction::new(a, b, dt)?,
        init: InitialState::new(s)?,
        sna: SnaSignal::with_start(expand(&gn.params), dt, v.start_time())?,
        cost_history: gn.history,
        iterations: gn.iterations,
        warning: gn.warning,
    })
}

/// SVD of the column-equilibrated Jacobian, from which truncated and
/// damped Gauss-Newton steps are formed without refactoring.
struct StepSolver {
    norms: Vec<f64>,
    singular: DVector<f64>,
    v: DMatrix<f64>,
    /// `U'r` in the singular basis.
    utr: DVector<f64>,
    rcond: f64,
}

impl StepSolver {
    fn new(jac: &DMatrix<f64>, resid: &DVector<f64>, rcond: f64) -> Option<Self> {
        let cols = jac.ncols();
        let norms: Vec<f64> = (0..cols).map(|j| jac.column(j).norm()).collect();
        let mut scaled = jac.clone();
        for j in 0..cols {
            if norms[j] > 0.0 {
                scaled.column_mut(j).unscale_mut(norms[j]);
            }
        }
        // reduce a tall system to its triangular factor before the SVD
        let (system, rhs) = if scaled.nrows() > 2 * cols {
            let qr = scaled.qr();
            let rhs = qr.q().tr_mul(resid);
            (qr.r(), rhs)
        } else {
            (scaled, resid.clone())
        };
        let svd = system.svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) || !smax.is_finite() {
            return None;
        }
        let utr = svd.u.as_ref()?.tr_mul(&rhs);
        let v_t = svd.v_t?;
        Some(StepSolver {
            norms,
            singular: svd.singular_values,
            v: v_t.transpose(),
            utr,
            rcond,
        })
    }

    /// Minimizer of `|r - J d|^2 + damping * smax^2 |S d|^2`;
    /// zero damping truncates singular values below `rcond * smax`.
    fn step(&self, damping: f64) -> DVector<f64> {
        let smax = self.singular.max();
        let mut coeff = DVector::zeros(self.singular.len());
        for (k, &sk) in self.singular.iter().enumerate() {
            if damping == 0.0 && !(sk > self.rcond * smax) {
                continue;
            }
            coeff[k] = sk * self.utr[k] / (sk * sk + damping * smax * smax);
        }
        let z = &self.v * coeff;
        DVector::from_iterator(
            self.norms.len(),
            self.norms.iter().zip(z.iter()).map(|(&n, &z)| if n > 0.0 { z / n } else { 0.0 }),
        )
    }
}

fn least_squares_truncated(jac: &DMatrix<f64>, resid: &DVector<f64>, rcond: f64) -> Option<DVector<f64>> {
    StepSolver::new(jac, resid, rcond).map(|s| s.step(0.0))
}

/// What [`prune_and_rebuild`] removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneAction {
    pub pole_real: f64,
    pub pole_imag: f64,
    /// `"long_period"` or `"unstable"`.
    pub reason: String,
    pub value: f64,
}

/// Remove long-period complex pairs and unstable terms, then re-fit the
/// initial state to reproduce the original free response over `len` samples.
pub fn prune_and_rebuild(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    len: usize,
    config: &SysIdConfig,
) -> Result<(DiscreteTransferFunction, InitialState, Vec<PruneAction>)> {
    let dt = tf.sample_interval();
    let poles = tf.poles()?;
    let needs_pruning = poles.iter().any(|p| {
        p.norm() >= 1.0
            || (p.im != 0.0 && 2.0 * std::f64::consts::PI * dt / p.arg().abs() > config.prune_period)
    });
    if !needs_pruning {
        return Ok((tf.clone(), init.clone(), Vec::new()));
    }
    let set = lti::partial_fractions(tf)?;
    let (rebuilt, removed) = lti::prune_with_report(&set, config.prune_period)?;
    let original_free = lti::free_response(tf, init, len)?;
    let new_init = fit_state_to_free_response(&rebuilt, original_free.samples())?;
    let actions = removed
        .into_iter()
        .map(|(s, why)| {
            let (reason, value) = match why {
                PruneReason::LongPeriod { period } => ("long_period", period),
                PruneReason::Unstable { magnitude } => ("unstable", magnitude),
            };
            PruneAction {
                pole_real: s.pole().re,
                pole_imag: s.pole().im,
                reason: reason.to_string(),
                value,
            }
        })
        .collect();
    Ok((rebuilt, new_init, actions))
}

#[cfg(test)]
mod tests;
