//! Discrete linear time-invariant systems
//!
//! ```text
//! y(t) + a1 y(t-1) + ... + an y(t-n) = b0 v(t) + b1 v(t-1) + ... + bn v(t-n)
//! ```
//!
//! with a nonzero initial state given by the `n` prior outputs
//! `y(-1), ..., y(-n)`. Prior inputs are zero.

mod dd;
pub mod poly;
mod record;
mod subsystems;

pub use record::{ModelRecord, SubsystemRecord};
pub use subsystems::{
    partial_fractions, prune, prune_with_report, time_constant, PruneReason, Subsystem, SubsystemSet,
    MIN_POLE_SEPARATION,
};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use dd::Dd;

use crate::error::{Result, UdmError};
use crate::signal::UniformSeries;

/// Transfer function `B(z) / A(z)` with monic denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransferFunction")]
pub struct DiscreteTransferFunction {
    a: Vec<f64>,
    b: Vec<f64>,
    sample_interval: f64,
}

#[derive(Deserialize)]
struct RawTransferFunction {
    a: Vec<f64>,
    b: Vec<f64>,
    sample_interval: f64,
}

impl TryFrom<RawTransferFunction> for DiscreteTransferFunction {
    type Error = UdmError;

    fn try_from(raw: RawTransferFunction) -> Result<Self> {
        DiscreteTransferFunction::new(raw.a, raw.b, raw.sample_interval)
    }
}

impl DiscreteTransferFunction {
    /// `a = [a1..an]`, `b = [b0..bn]`.
    pub fn new(a: Vec<f64>, b: Vec<f64>, sample_interval: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(UdmError::invalid("model order must be at least 1"));
        }
        if b.len() != a.len() + 1 {
            return Err(UdmError::invalid(format!(
                "order {} needs {} numerator coefficients, got {}",
                a.len(),
                a.len() + 1,
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|c| !c.is_finite()) {
            return Err(UdmError::invalid("coefficients must be finite"));
        }
        if !(sample_interval > 0.0) || !sample_interval.is_finite() {
            return Err(UdmError::invalid("sample interval must be positive"));
        }
        Ok(DiscreteTransferFunction { a, b, sample_interval })
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Denominator coefficients `[a1..an]`.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// Numerator coefficients `[b0..bn]`.
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    /// `[1, a1, .., an]`, highest power of z first.
    pub fn denominator(&self) -> Vec<f64> {
        std::iter::once(1.0).chain(self.a.iter().copied()).collect()
    }

    /// Roots of the denominator.
    pub fn poles(&self) -> Result<Vec<Complex64>> {
        poles(self)
    }

    /// Largest pole magnitude.
    pub fn spectral_radius(&self) -> Result<f64> {
        Ok(self.poles()?.iter().map(|p| p.norm()).fold(0.0, f64::max))
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius().map(|r| r < 1.0).unwrap_or(false)
    }

    /// `B(1) / A(1)`, the steady-state gain.
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a.iter().sum::<f64>())
    }

    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        if len > 0 {
            v[0] = 1.0;
        }
        run_recursion(&self.a, &self.b, None, &v)
    }

    fn check_interval(&self, series: &UniformSeries) -> Result<()> {
        let dt = self.sample_interval;
        if (series.sample_interval() - dt).abs() > 1e-9 * dt {
            return Err(UdmError::invalid(format!(
                "sample interval mismatch: series {} s, model {} s",
                series.sample_interval(),
                dt
            )));
        }
        Ok(())
    }
}

/// The `n` prior outputs `[y(-1), .., y(-n)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitialState {
    prior_outputs: Vec<f64>,
}

impl InitialState {
    pub fn new(prior_outputs: Vec<f64>) -> Result<Self> {
        if prior_outputs.iter().any(|v| !v.is_finite()) {
            return Err(UdmError::invalid("initial state must be finite"));
        }
        Ok(InitialState { prior_outputs })
    }

    pub fn zeros(order: usize) -> Self {
        InitialState {
            prior_outputs: vec![0.0; order],
        }
    }

    /// State whose free response is `sum_k amplitude_k * pole_k^t` for the
    /// given real poles (each must be a root of the model denominator for the
    /// response to be exact).
    pub fn from_modes(order: usize, modes: &[(f64, f64)]) -> Result<Self> {
        let prior = (1..=order)
            .map(|k| modes.iter().map(|&(p, amp)| amp * p.powi(-(k as i32))).sum())
            .collect();
        Self::new(prior)
    }

    pub fn prior_outputs(&self) -> &[f64] {
        &self.prior_outputs
    }

    pub fn len(&self) -> usize {
        self.prior_outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_outputs.is_empty()
    }
}

/// Core recursion on raw slices. `prior` holds `[y(-1)..y(-n)]`.
///
/// The output is carried in double-double precision: with poles clustered
/// near 1 the recursion amplifies per-step rounding by up to `1 / |A(1)|`,
/// and compensated accumulation keeps the returned samples correctly rounded
/// to working precision for any stable model of practical order.
pub(crate) fn run_recursion(a: &[f64], b: &[f64], prior: Option<&[f64]>, input: &[f64]) -> Vec<f64> {
    let n = a.len();
    let len = input.len();
    // y_ext[n + t] = y(t); y_ext[n - k] = y(-k)
    let mut y = vec![Dd::ZERO; n + len];
    if let Some(p) = prior {
        for k in 1..=n {
            y[n - k] = Dd::from(p[k - 1]);
        }
    }
    for t in 0..len {
        let mut acc = Dd::ZERO;
        for (k, &bk) in b.iter().enumerate().take(t + 1) {
            let u = input[t - k];
            if u != 0.0 && bk != 0.0 {
                acc = acc.add(Dd::product(bk, u));
            }
        }
        for (k, &ak) in a.iter().enumerate() {
            acc = acc.sub(y[n + t - (k + 1)].scale(ak));
        }
        y[n + t] = acc;
    }
    y.split_off(n).into_iter().map(|d| d.hi).collect()
}

fn check_state(tf: &DiscreteTransferFunction, init: &InitialState) -> Result<()> {
    if init.len() != tf.order() {
        return Err(UdmError::invalid(format!(
            "initial state has {} values for a model of order {}",
            init.len(),
            tf.order()
        )));
    }
    Ok(())
}

/// Full response to `input` from the given initial state.
pub fn simulate(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    input: &UniformSeries,
) -> Result<UniformSeries> {
    tf.check_interval(input)?;
    check_state(tf, init)?;
    let y = run_recursion(&tf.a, &tf.b, Some(&init.prior_outputs), input.samples());
    input.with_samples(y)
}

/// Zero-input response from the initial state.
pub fn free_response(tf: &DiscreteTransferFunction, init: &InitialState, len: usize) -> Result<UniformSeries> {
    check_state(tf, init)?;
    let y = run_recursion(&tf.a, &tf.b, Some(&init.prior_outputs), &vec![0.0; len]);
    UniformSeries::new(y, tf.sample_interval)
}

/// Zero-state response to `input`.
pub fn forced_response(tf: &DiscreteTransferFunction, input: &UniformSeries) -> Result<UniformSeries> {
    tf.check_interval(input)?;
    input.with_samples(run_recursion(&tf.a, &tf.b, None, input.samples()))
}

/// Roots of `z^n + a1 z^(n-1) + .. + an` from the companion matrix, refined
/// by Newton steps on the polynomial. Conjugate pairs are returned exactly
/// conjugate; real roots carry a zero imaginary part.
pub fn poles(tf: &DiscreteTransferFunction) -> Result<Vec<Complex64>> {
    polynomial_roots(&tf.denominator())
}

pub(crate) fn polynomial_roots(monic: &[f64]) -> Result<Vec<Complex64>> {
    let n = monic.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -monic[j + 1];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let raw = companion
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| UdmError::Numeric(format!("Schur iteration failed for polynomial {monic:?}")))?
        .complex_eigenvalues();

    let scale = 1.0 + monic.iter().skip(1).fold(0.0f64, |m, c| m.max(c.abs()));
    let mut roots: Vec<Complex64> = raw.iter().map(|&z| polish_root(monic, z)).collect();

    // snap to real / exact conjugates
    let mut out = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for i in 0..n {
        if used[i] {
            continue;
        }
        used[i] = true;
        let z = roots[i];
        if z.im.abs() <= 1e-9 * z.norm().max(1.0) {
            out.push(Complex64::new(polish_root(monic, Complex64::new(z.re, 0.0)).re, 0.0));
            continue;
        }
        // find the partner closest to conj(z)
        let partner = (0..n)
            .filter(|&j| !used[j])
            .min_by(|&p, &q| {
                (roots[p] - z.conj())
                    .norm()
                    .total_cmp(&(roots[q] - z.conj()).norm())
            });
        if let Some(j) = partner {
            used[j] = true;
            let upper = if z.im > 0.0 { z } else { z.conj() };
            let other = if roots[j].im > 0.0 { roots[j] } else { roots[j].conj() };
            let merged = 0.5 * (upper + other);
            let merged = polish_root(monic, merged);
            let merged = Complex64::new(merged.re, merged.im.abs());
            out.push(merged);
            out.push(merged.conj());
        } else {
            return Err(UdmError::Numeric(format!("unpaired complex root {z}")));
        }
    }
    roots.clear();

    for z in &out {
        let resid = dd::eval_complex(monic, *z).norm();
        if !resid.is_finite() || resid > 1e-8 * scale {
            return Err(UdmError::Numeric(format!(
                "root {z} of {monic:?} has residual {resid:.3e}"
            )));
        }
    }
    Ok(out)
}

fn polish_root(monic: &[f64], mut z: Complex64) -> Complex64 {
    let mut best = dd::eval_complex(monic, z).norm();
    for _ in 0..12 {
        let v = dd::eval_complex(monic, z);
        let (_, d) = poly::eval_with_derivative(monic, z);
        if d.norm() == 0.0 || v.norm() == 0.0 {
            break;
        }
        let cand = z - v / d;
        let r = dd::eval_complex(monic, cand).norm();
        if !(r < best) {
            break;
        }
        best = r;
        z = cand;
    }
    z
}

#[cfg(test)]
mod tests;
