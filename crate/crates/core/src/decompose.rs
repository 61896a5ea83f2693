//! Split a fitted response into free, short-term and long-term parts.
//!
//! The long-term component is the response of the slowest positive-gain real
//! subsystem. Everything else driven by the input, including the direct
//! term, forms the short-term component, so free + short + long reproduces
//! the model output exactly.

use serde::{Deserialize, Serialize};

use crate::deconv::SnaSignal;
use crate::error::{Result, UdmError};
use crate::lti::{self, DiscreteTransferFunction, InitialState, Subsystem, SubsystemSet};
use crate::pipeline::FitResult;
use crate::signal::UniformSeries;

/// A real subsystem with its rank label `R1..Rk` (ascending time constant).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSubsystem {
    pub label: String,
    pub subsystem: Subsystem,
    pub time_constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ranked: Vec<RankedSubsystem>,
    /// `R1` has negative gain and every other rank positive gain.
    pub canonical_pattern: bool,
}

/// Rank the decaying real subsystems by time constant. Complex pairs and
/// subsystems with a non-positive pole carry no time constant and are left
/// out.
pub fn rank_subsystems(set: &SubsystemSet) -> Ranking {
    let dt = set.sample_interval;
    let mut reals: Vec<(Subsystem, f64)> = set
        .subsystems
        .iter()
        .filter(|s| s.is_real())
        .filter_map(|s| s.time_constant(dt).map(|tau| (*s, tau)))
        .collect();
    reals.sort_by(|x, y| x.1.total_cmp(&y.1));
    let ranked: Vec<RankedSubsystem> = reals
        .into_iter()
        .enumerate()
        .map(|(i, (subsystem, time_constant))| RankedSubsystem {
            label: format!("R{}", i + 1),
            subsystem,
            time_constant,
        })
        .collect();
    let canonical_pattern = ranked.len() >= 2
        && ranked[0].subsystem.gain() < 0.0
        && ranked[1..].iter().all(|r| r.subsystem.gain() > 0.0);
    Ranking { ranked, canonical_pattern }
}

/// Response of one subsystem, labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemResponse {
    pub subsystem: Subsystem,
    /// Rank label for real subsystems, `C<k>` for complex pairs and `N<k>`
    /// for real subsystems without a time constant.
    pub label: String,
    pub response: UniformSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub free: UniformSeries,
    pub short_term: UniformSeries,
    pub long_term: UniformSeries,
    pub per_subsystem: Vec<SubsystemResponse>,
    /// Feedthrough `b0 v(t)`; part of the short-term component.
    pub direct: UniformSeries,
    pub long_term_label: String,
    pub long_term_time_constant: f64,
    pub canonical_pattern: bool,
    /// No positive-gain real subsystem existed; the slowest real one was used.
    pub long_term_fallback: bool,
    /// `max |free + short + long - simulate(model, init, sna)|`.
    pub reconstruction_error: f64,
    /// `max |sum(per_subsystem) + direct - (short + long)|`.
    pub subsystem_residual: f64,
}

/// Decomposition metadata for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub long_term_label: String,
    pub long_term_time_constant: f64,
    pub canonical_pattern: bool,
    pub long_term_fallback: bool,
    pub reconstruction_error: f64,
    pub subsystem_residual: f64,
}

impl Decomposition {
    pub fn summary(&self) -> DecompositionSummary {
        DecompositionSummary {
            long_term_label: self.long_term_label.clone(),
            long_term_time_constant: self.long_term_time_constant,
            canonical_pattern: self.canonical_pattern,
            long_term_fallback: self.long_term_fallback,
            reconstruction_error: self.reconstruction_error,
            subsystem_residual: self.subsystem_residual,
        }
    }
}

pub fn three_component(fit: &FitResult) -> Result<Decomposition> {
    decompose_model(&fit.model, &fit.init, &fit.sna)
}

pub fn decompose_model(
    model: &DiscreteTransferFunction,
    init: &InitialState,
    sna: &SnaSignal,
) -> Result<Decomposition> {
    let set = lti::partial_fractions(model)?;
    if set.subsystems.len() < 2 {
        return Err(UdmError::DegenerateDecomposition(format!(
            "{} subsystem(s); at least 2 are needed",
            set.subsystems.len()
        )));
    }
    let ranking = rank_subsystems(&set);
    let slowest = |positive_only: bool| {
        ranking
            .ranked
            .iter()
            .filter(|r| !positive_only || r.subsystem.gain() > 0.0)
            .max_by(|x, y| x.time_constant.total_cmp(&y.time_constant))
    };
    let (long, fallback) = match slowest(true) {
        Some(r) => (r, false),
        None => match slowest(false) {
            Some(r) => (r, true),
            None => {
                return Err(UdmError::DegenerateDecomposition(
                    "no real subsystem with a time constant".into(),
                ))
            }
        },
    };

    let input = sna.to_series()?;
    let v = sna.values();
    let len = v.len();
    let free = lti::free_response(model, init, len)?;
    let forced = lti::forced_response(model, &input)?;
    let long_samples = long.subsystem.forced_response(v);
    let short_samples: Vec<f64> = forced.samples().iter().zip(&long_samples).map(|(f, l)| f - l).collect();
    let direct_samples: Vec<f64> = v.iter().map(|x| set.direct_term * x).collect();

    let mut complex_count = 0;
    let mut other_count = 0;
    let per_subsystem: Vec<SubsystemResponse> = set
        .subsystems
        .iter()
        .map(|s| {
            let label = match ranking.ranked.iter().find(|r| r.subsystem == *s) {
                Some(r) => r.label.clone(),
                None if s.is_real() => {
                    other_count += 1;
                    format!("N{other_count}")
                }
                None => {
                    complex_count += 1;
                    format!("C{complex_count}")
                }
            };
            Ok(SubsystemResponse {
                subsystem: *s,
                label,
                response: input.with_samples(s.forced_response(v))?,
            })
        })
        .collect::<Result<_>>()?;

    let full = lti::simulate(model, init, &input)?;
    let reconstruction_error = (0..len)
        .map(|t| (free.samples()[t] + short_samples[t] + long_samples[t] - full.samples()[t]).abs())
        .fold(0.0, f64::max);
    let subsystem_residual = (0..len)
        .map(|t| {
            let sum: f64 = per_subsystem.iter().map(|r| r.response.samples()[t]).sum::<f64>() + direct_samples[t];
            (sum - forced.samples()[t]).abs()
        })
        .fold(0.0, f64::max);

    Ok(Decomposition {
        free: input.with_samples(free.into_samples())?,
        short_term: input.with_samples(short_samples)?,
        long_term: input.with_samples(long_samples)?,
        direct: input.with_samples(direct_samples)?,
        per_subsystem,
        long_term_label: long.label.clone(),
        long_term_time_constant: long.time_constant,
        canonical_pattern: ranking.canonical_pattern,
        long_term_fallback: fallback,
        reconstruction_error,
        subsystem_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{canonical_model, compose_model};

    fn bursty(len: usize) -> SnaSignal {
        let mut v = vec![0.0; len];
        for (i, slot) in v.iter_mut().enumerate() {
            if i % 97 == 13 {
                *slot = 0.4;
            } else if i % 97 == 14 {
                *slot = 0.2;
            }
        }
        SnaSignal::new(v, 0.1).unwrap()
    }

    #[test]
    fn canonical_model_ranking() {
        let set = lti::partial_fractions(&canonical_model(0.1).unwrap()).unwrap();
        let r = rank_subsystems(&set);
        assert!(r.canonical_pattern);
        let labels: Vec<&str> = r.ranked.iter().map(|x| x.label.as_str()).collect();
        assert_eq!(labels, ["R1", "R2", "R3", "R4"]);
        assert!((r.ranked[0].time_constant - 0.7).abs() < 1e-8);
        assert!((r.ranked[3].time_constant - 200.0).abs() < 1e-5);
    }

    #[test]
    fn components_add_up() {
        let tf = canonical_model(0.1).unwrap();
        let p = (-0.1f64 / 200.0).exp();
        let init = InitialState::from_modes(4, &[(p, 3.0)]).unwrap();
        let sna = bursty(3000);
        let d = decompose_model(&tf, &init, &sna).unwrap();
        assert!(d.reconstruction_error <= 1e-9);
        assert!(d.subsystem_residual <= 1e-9);
        assert_eq!(d.long_term_label, "R4");
        assert!(!d.long_term_fallback);
        // the long-term part is the slow subsystem alone
        let slow = compose_model(&[0.05], &[200.0], 0.1).unwrap();
        let expect = lti::forced_response(&slow, &sna.to_series().unwrap()).unwrap();
        for (a, b) in d.long_term.samples().iter().zip(expect.samples()) {
            // nominal versus coefficient-rounded slow pole
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn first_order_model_is_degenerate() {
        let tf = compose_model(&[1.0], &[2.0], 0.1).unwrap();
        let init = InitialState::zeros(1);
        assert!(matches!(
            decompose_model(&tf, &init, &bursty(200)),
            Err(UdmError::DegenerateDecomposition(_))
        ));
    }

    #[test]
    fn all_negative_gains_fall_back() {
        let tf = compose_model(&[-1.0, -0.5], &[1.0, 5.0], 0.1).unwrap();
        let d = decompose_model(&tf, &InitialState::zeros(2), &bursty(300)).unwrap();
        assert!(d.long_term_fallback);
        assert!(!d.canonical_pattern);
        assert!((d.long_term_time_constant - 5.0).abs() < 1e-8);
    }
}
