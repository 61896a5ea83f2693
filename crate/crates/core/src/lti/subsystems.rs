//! Partial-fraction decomposition into first-order (real pole) and
//! second-order (complex pair) subsystems, and pruning.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{dd, poly, run_recursion, DiscreteTransferFunction};
use crate::error::{Result, UdmError};

/// Minimum pairwise pole distance accepted by [`partial_fractions`].
pub const MIN_POLE_SEPARATION: f64 = 1e-6;

/// One term of a partial-fraction expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subsystem {
    /// `gain / (z - pole)`; impulse response `gain * pole^(k-1)` for `k >= 1`.
    Real { gain: f64, pole: f64 },
    /// `r / (z - p) + conj(r) / (z - conj(p))`, stored with `Im p > 0`.
    ComplexPair { residue: Complex64, pole: Complex64 },
}

impl Subsystem {
    pub fn is_real(&self) -> bool {
        matches!(self, Subsystem::Real { .. })
    }

    pub fn pole(&self) -> Complex64 {
        match *self {
            Subsystem::Real { pole, .. } => Complex64::new(pole, 0.0),
            Subsystem::ComplexPair { pole, .. } => pole,
        }
    }

    /// Residue of the (upper) pole.
    pub fn residue(&self) -> Complex64 {
        match *self {
            Subsystem::Real { gain, .. } => Complex64::new(gain, 0.0),
            Subsystem::ComplexPair { residue, .. } => residue,
        }
    }

    /// Real gain of a first-order term; `2 Re(r)` for a pair.
    pub fn gain(&self) -> f64 {
        match *self {
            Subsystem::Real { gain, .. } => gain,
            Subsystem::ComplexPair { residue, .. } => 2.0 * residue.re,
        }
    }

    pub fn order(&self) -> usize {
        if self.is_real() {
            1
        } else {
            2
        }
    }

    pub fn is_stable(&self) -> bool {
        self.pole().norm() < 1.0
    }

    /// `-dt / ln(p)` for real `p` in (0, 1); for pairs, the envelope decay
    /// time `-dt / ln|p|`.
    pub fn time_constant(&self, sample_interval: f64) -> Option<f64> {
        match *self {
            Subsystem::Real { pole, .. } => time_constant(pole, sample_interval).ok(),
            Subsystem::ComplexPair { pole, .. } => time_constant(pole.norm(), sample_interval).ok(),
        }
    }

    /// `2 pi dt / |arg p|` for complex pairs.
    pub fn oscillatory_period(&self, sample_interval: f64) -> Option<f64> {
        match *self {
            Subsystem::Real { .. } => None,
            Subsystem::ComplexPair { pole, .. } => Some(2.0 * PI * sample_interval / pole.arg().abs()),
        }
    }

    /// Numerator in z, highest power first.
    pub fn numerator(&self) -> Vec<f64> {
        match *self {
            Subsystem::Real { gain, .. } => vec![gain],
            Subsystem::ComplexPair { residue, pole } => {
                vec![2.0 * residue.re, -2.0 * (residue * pole.conj()).re]
            }
        }
    }

    /// Monic denominator in z, highest power first.
    pub fn denominator(&self) -> Vec<f64> {
        match *self {
            Subsystem::Real { pole, .. } => vec![1.0, -pole],
            Subsystem::ComplexPair { pole, .. } => vec![1.0, -2.0 * pole.re, pole.norm_sqr()],
        }
    }

    /// Zero-state response of this term alone.
    pub fn forced_response(&self, input: &[f64]) -> Vec<f64> {
        let den = self.denominator();
        let num = self.numerator();
        // strictly proper: pad numerator to the denominator length
        let mut b = vec![0.0; den.len() - num.len()];
        b.extend(num);
        run_recursion(&den[1..], &b, None, input)
    }

    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        if len > 0 {
            v[0] = 1.0;
        }
        self.forced_response(&v)
    }
}

/// Parallel decomposition `H(z) = direct_term + sum_i H_i(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemSet {
    pub subsystems: Vec<Subsystem>,
    pub direct_term: f64,
    pub sample_interval: f64,
}

impl SubsystemSet {
    pub fn order(&self) -> usize {
        self.subsystems.iter().map(Subsystem::order).sum()
    }

    /// Recombine the terms over a common denominator.
    pub fn to_transfer_function(&self) -> Result<DiscreteTransferFunction> {
        if self.subsystems.is_empty() {
            return Err(UdmError::DegenerateModel("no subsystems to combine".into()));
        }
        let den = self
            .subsystems
            .iter()
            .fold(vec![1.0], |acc, s| poly::mul(&acc, &s.denominator()));
        let mut num = poly::scale(&den, self.direct_term);
        for (i, s) in self.subsystems.iter().enumerate() {
            let others = self
                .subsystems
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .fold(vec![1.0], |acc, (_, o)| poly::mul(&acc, &o.denominator()));
            num = poly::add(&num, &poly::mul(&s.numerator(), &others));
        }
        let n = den.len() - 1;
        let mut b = vec![0.0; n + 1 - num.len()];
        b.extend(num);
        DiscreteTransferFunction::new(den[1..].to_vec(), b, self.sample_interval)
    }

    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut h = vec![0.0; len];
        if len > 0 {
            h[0] = self.direct_term;
        }
        for s in &self.subsystems {
            for (acc, v) in h.iter_mut().zip(s.impulse_response(len)) {
                *acc += v;
            }
        }
        h
    }
}

/// `tau = -dt / ln(pole)` for a pole in (0, 1).
pub fn time_constant(pole: f64, sample_interval: f64) -> Result<f64> {
    if !(pole > 0.0 && pole < 1.0) {
        return Err(UdmError::invalid(format!(
            "time constant needs a pole in (0, 1), got {pole}"
        )));
    }
    if !(sample_interval > 0.0) {
        return Err(UdmError::invalid("sample interval must be positive"));
    }
    Ok(-sample_interval / pole.ln())
}

/// Expand `tf` into a direct term plus first- and second-order subsystems.
///
/// Residues are `N(p_i) / prod_{j != i} (p_i - p_j)` with
/// `N(z) = B(z) - b0 A(z)`, the strictly proper remainder.
pub fn partial_fractions(tf: &DiscreteTransferFunction) -> Result<SubsystemSet> {
    let poles = tf.poles()?;
    for i in 0..poles.len() {
        for j in (i + 1)..poles.len() {
            let distance = (poles[i] - poles[j]).norm();
            if distance <= MIN_POLE_SEPARATION {
                return Err(UdmError::DegeneratePoles {
                    first: poles[i],
                    second: poles[j],
                    distance,
                });
            }
        }
    }
    let d = tf.b()[0];
    let den = tf.denominator();

    let residue_at = |i: usize| -> Complex64 {
        let p = poles[i];
        let mut denom = Complex64::new(1.0, 0.0);
        for (j, q) in poles.iter().enumerate() {
            if j != i {
                denom *= p - q;
            }
        }
        // remainder B - d A evaluated without forming its rounded coefficients
        (dd::eval_complex(tf.b(), p) - d * dd::eval_complex(&den, p)) / denom
    };

    let mut subsystems = Vec::with_capacity(poles.len());
    for (i, p) in poles.iter().enumerate() {
        if p.im == 0.0 {
            subsystems.push(Subsystem::Real {
                gain: residue_at(i).re,
                pole: p.re,
            });
        } else if p.im > 0.0 {
            subsystems.push(Subsystem::ComplexPair {
                residue: residue_at(i),
                pole: *p,
            });
        }
    }
    Ok(SubsystemSet {
        subsystems,
        direct_term: d,
        sample_interval: tf.sample_interval(),
    })
}

/// Why a subsystem was dropped by [`prune_with_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneReason {
    LongPeriod { period: f64 },
    Unstable { magnitude: f64 },
}

/// Drop unstable terms and complex pairs oscillating slower than
/// `period_threshold` seconds, then recombine.
pub fn prune(set: &SubsystemSet, period_threshold: f64) -> Result<DiscreteTransferFunction> {
    prune_with_report(set, period_threshold).map(|(tf, _)| tf)
}

pub fn prune_with_report(
    set: &SubsystemSet,
    period_threshold: f64,
) -> Result<(DiscreteTransferFunction, Vec<(Subsystem, PruneReason)>)> {
    let dt = set.sample_interval;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for s in &set.subsystems {
        let magnitude = s.pole().norm();
        if magnitude >= 1.0 {
            removed.push((*s, PruneReason::Unstable { magnitude }));
            continue;
        }
        match s.oscillatory_period(dt) {
            Some(period) if period > period_threshold => {
                removed.push((*s, PruneReason::LongPeriod { period }));
            }
            _ => kept.push(*s),
        }
    }
    if kept.is_empty() {
        return Err(UdmError::DegenerateModel(
            "pruning removed every subsystem".into(),
        ));
    }
    let rebuilt = SubsystemSet {
        subsystems: kept,
        direct_term: set.direct_term,
        sample_interval: dt,
    }
    .to_transfer_function()?;
    Ok((rebuilt, removed))
}
