//! Alternating estimation of the model and the SNA.
//!
//! Starting from impulses at trough-to-peak rises, each iteration fits the
//! model to the current SNA (M-step) and then re-estimates the SNA under the
//! new model (E-step). The iterate with the best R² is returned.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deconv::{build_influence_matrix, PreparedQp, QpProblem, SnaEstimate, SolveDiagnostics, SolveOptions};
use crate::deconv::SnaSignal;
use crate::error::{Result, UdmError};
use crate::lti::{self, DiscreteTransferFunction, InitialState, ModelRecord};
use crate::signal::peaks::valley_peak_pairs;
use crate::signal::{ButterworthLowpass, UniformSeries};
use crate::sysid::{self, PruneAction, SysIdConfig};

/// How the L1 weight is chosen in each E-step. Relative values are
/// fractions of `max(D'c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaPolicy {
    Fixed { value: f64 },
    Relative { fraction: f64 },
    /// Log-spaced grid of `points` fractions in `[lo, hi]`; picks the best R²
    /// among solutions with support fraction at most `max_support_fraction`,
    /// or the sparsest solution when none qualifies.
    Grid {
        lo: f64,
        hi: f64,
        points: usize,
        max_support_fraction: f64,
    },
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::Relative { fraction: 0.05 }
    }
}

impl AlphaPolicy {
    pub fn default_grid() -> Self {
        AlphaPolicy::Grid {
            lo: 1e-3,
            hi: 1e-1,
            points: 7,
            max_support_fraction: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AlphaPolicy::Fixed { value } => value >= 0.0 && value.is_finite(),
            AlphaPolicy::Relative { fraction } => fraction >= 0.0 && fraction.is_finite(),
            AlphaPolicy::Grid {
                lo,
                hi,
                points,
                max_support_fraction,
            } => lo > 0.0 && hi >= lo && points >= 1 && (0.0..=1.0).contains(&max_support_fraction),
        };
        if ok {
            Ok(())
        } else {
            Err(UdmError::invalid(format!("invalid alpha policy {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub order: usize,
    pub alpha: AlphaPolicy,
    pub max_em_iterations: usize,
    /// Stop once the relative R² improvement falls below this.
    pub em_tolerance: f64,
    /// Smallest trough-to-peak rise (µS) that seeds an impulse.
    pub min_scr_amplitude: f64,
    pub max_gn_iterations: usize,
    pub gn_tolerance: f64,
    pub stability_margin: f64,
    pub estimate_direct_term: bool,
    pub prune_period: f64,
    pub forbid_slow_oscillation: bool,
    pub kkt_tolerance: f64,
    /// Deconvolve `sc - free response` rather than `sc`.
    pub subtract_free_response: bool,
    /// Cutoff (Hz) of the zero-phase low-pass applied to the copy of `sc`
    /// used only for trough-to-peak initialization; `None` uses `sc` as is.
    pub init_smoothing_hz: Option<f64>,
    /// Refit one gain per E-step burst without the L1 penalty.
    pub debias: bool,
    /// Extent, in samples after each nonzero SNA sample, of the support
    /// re-estimated jointly with the model at the end of each M-step; `None`
    /// skips the joint refinement.
    pub joint_lookahead: Option<usize>,
    pub max_joint_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let s = SysIdConfig::default();
        FitConfig {
            order: 4,
            alpha: AlphaPolicy::default(),
            max_em_iterations: 10,
            em_tolerance: 1e-4,
            min_scr_amplitude: 0.01,
            max_gn_iterations: s.max_gn_iterations,
            gn_tolerance: s.gn_tolerance,
            stability_margin: s.stability_margin,
            estimate_direct_term: false,
            prune_period: s.prune_period,
            forbid_slow_oscillation: s.forbid_slow_oscillation,
            kkt_tolerance: 1e-6,
            subtract_free_response: true,
            init_smoothing_hz: Some(0.5),
            debias: true,
            joint_lookahead: Some(2),
            max_joint_iterations: 300,
        }
    }
}

impl FitConfig {
    pub fn sysid(&self) -> SysIdConfig {
        SysIdConfig {
            order: self.order,
            max_gn_iterations: self.max_gn_iterations,
            gn_tolerance: self.gn_tolerance,
            stability_margin: self.stability_margin,
            estimate_direct_term: self.estimate_direct_term,
            prune_period: self.prune_period,
            forbid_slow_oscillation: self.forbid_slow_oscillation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sysid().validate()?;
        self.alpha.validate()?;
        if self.max_em_iterations == 0 {
            return Err(UdmError::invalid("max_em_iterations must be positive"));
        }
        if !(self.em_tolerance > 0.0) || !(self.min_scr_amplitude > 0.0) || !(self.kkt_tolerance > 0.0) {
            return Err(UdmError::invalid("tolerances and amplitude threshold must be positive"));
        }
        if self.max_joint_iterations == 0 {
            return Err(UdmError::invalid("max_joint_iterations must be positive"));
        }
        if let Some(hz) = self.init_smoothing_hz {
            if !(hz > 0.0) {
                return Err(UdmError::invalid("init_smoothing_hz must be positive"));
            }
        }
        Ok(())
    }
}

/// One EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub r_squared: f64,
    /// Start of the winning refinement: `"prefiltered"`, `"pole_grid"` or
    /// `"previous"`.
    pub model_start: String,
    pub gn_iterations: usize,
    pub gn_final_cost: f64,
    /// Iterations of the accepted joint model and SNA refinement; 0 when it
    /// was skipped or did not improve on the separate fit.
    pub joint_gn_iterations: usize,
    pub gn_warning: Option<String>,
    pub pruned: Vec<PruneAction>,
    pub prune_skipped: Option<String>,
    pub order: usize,
    pub solver: SolveDiagnostics,
    pub support_size: usize,
    pub burst_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub init_impulses: usize,
    pub iterations: Vec<EmIteration>,
    /// Zero-based index of the returned iterate.
    pub best_iteration: usize,
    /// Samples where the free response is negative.
    pub free_negative_samples: usize,
    /// Samples where the free response exceeds the observed series.
    pub free_overshoot_samples: usize,
}

/// Fitted model, initial state and SNA. Serializes to the result file
/// layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FitRecord", try_from = "FitRecord")]
pub struct FitResult {
    pub model: DiscreteTransferFunction,
    pub init: InitialState,
    pub sna: SnaSignal,
    pub r_squared: f64,
    pub em_history: Vec<f64>,
    pub diagnostics: FitDiagnostics,
    /// SHA-256 of the fitted series, see [`series_sha256`].
    pub input_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct FitRecord {
    model: ModelRecord,
    sna: SnaSignal,
    r_squared: f64,
    em_history: Vec<f64>,
    input_sha256: String,
    diagnostics: FitDiagnostics,
}

impl From<FitResult> for FitRecord {
    fn from(f: FitResult) -> Self {
        FitRecord {
            model: ModelRecord::new(&f.model, &f.init),
            sna: f.sna,
            r_squared: f.r_squared,
            em_history: f.em_history,
            input_sha256: f.input_sha256,
            diagnostics: f.diagnostics,
        }
    }
}

impl TryFrom<FitRecord> for FitResult {
    type Error = UdmError;

    fn try_from(r: FitRecord) -> Result<Self> {
        let (model, init) = r.model.to_model()?;
        Ok(FitResult {
            model,
            init,
            sna: r.sna,
            r_squared: r.r_squared,
            em_history: r.em_history,
            diagnostics: r.diagnostics,
            input_sha256: r.input_sha256,
        })
    }
}

impl FitResult {
    /// Model output `free + forced` on the SNA grid.
    pub fn reconstruction(&self) -> Result<UniformSeries> {
        lti::simulate(&self.model, &self.init, &self.sna.to_series()?)
    }

    /// Recompute R² against `sc`, checking that it is the fitted series.
    pub fn verify(&self, sc: &UniformSeries) -> Result<f64> {
        if series_sha256(sc) != self.input_sha256 {
            return Err(UdmError::invalid("series does not match the fitted input"));
        }
        r_squared(&self.reconstruction()?, sc)
    }
}

/// Digest of the sample interval, start time and samples (little-endian
/// IEEE-754 bytes).
pub fn series_sha256(sc: &UniformSeries) -> String {
    let mut h = Sha256::new();
    h.update(sc.sample_interval().to_le_bytes());
    h.update(sc.start_time().to_le_bytes());
    for x in sc.samples() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Impulses at the valley of every valley-peak pair rising at least
/// `min_amplitude`, sized by the rise.
pub fn trough_to_peak_init(sc: &UniformSeries, min_amplitude: f64) -> Result<SnaSignal> {
    let pairs = valley_peak_pairs(sc.samples(), min_amplitude);
    if pairs.is_empty() {
        return Err(UdmError::EmptySna);
    }
    let mut v = vec![0.0; sc.len()];
    for p in pairs {
        v[p.valley] = p.amplitude;
    }
    SnaSignal::with_start(v, sc.sample_interval(), sc.start_time())
}

/// Trough-to-peak initialization on a copy of `sc` low-passed at
/// `cutoff_hz`. Smoothing pulls each valley earlier, so the impulse is
/// placed at the minimum, between that valley and its peak, of a copy
/// smoothed four times more lightly.
pub fn smoothed_trough_to_peak_init(sc: &UniformSeries, min_amplitude: f64, cutoff_hz: f64) -> Result<SnaSignal> {
    let detect = zero_phase_lowpass(sc, cutoff_hz)?;
    let pairs = valley_peak_pairs(detect.samples(), min_amplitude);
    if pairs.is_empty() {
        return Err(UdmError::EmptySna);
    }
    let locate_hz = 4.0 * cutoff_hz;
    let locate = if locate_hz < 0.5 * sc.sample_rate() { zero_phase_lowpass(sc, locate_hz)? } else { sc.clone() };
    let mut v = vec![0.0; sc.len()];
    for p in pairs {
        let x = locate.samples();
        let valley = (p.valley..=p.peak).min_by(|&i, &j| x[i].total_cmp(&x[j])).unwrap_or(p.valley);
        v[valley] = p.amplitude;
    }
    SnaSignal::with_start(v, sc.sample_interval(), sc.start_time())
}

/// Forward-backward Butterworth low-pass: zero phase, squared magnitude.
pub fn zero_phase_lowpass(sc: &UniformSeries, cutoff_hz: f64) -> Result<UniformSeries> {
    let filter = ButterworthLowpass::design(2, cutoff_hz, sc.sample_rate())?;
    let mut x = filter.apply(sc.samples());
    x.reverse();
    let mut x = filter.apply(&x);
    x.reverse();
    sc.with_samples(x)
}

pub fn r_squared(predicted: &UniformSeries, observed: &UniformSeries) -> Result<f64> {
    r_squared_samples(predicted.samples(), observed.samples())
}

pub fn r_squared_samples(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(UdmError::invalid(format!(
            "lengths differ: {} predicted, {} observed",
            predicted.len(),
            observed.len()
        )));
    }
    if observed.is_empty() {
        return Err(UdmError::UndefinedVariance);
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean) * (o - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(UdmError::UndefinedVariance);
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p) * (o - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Result of one SNA estimation under a fixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub estimate: SnaEstimate,
    pub r_squared: f64,
    /// Chosen alpha over `max(D'c)`.
    pub alpha_fraction: f64,
}

/// Estimate the SNA for a fixed model and initial state.
pub fn estimate_sna(
    tf: &DiscreteTransferFunction,
    init: &InitialState,
    sc: &UniformSeries,
    alpha: &AlphaPolicy,
    kkt_tolerance: f64,
    subtract_free_response: bool,
    debias: bool,
) -> Result<EStep> {
    let len = sc.len();
    let influence = build_influence_matrix(tf, len)?;
    let free = lti::free_response(tf, init, len)?;
    let target: Vec<f64> = if subtract_free_response {
        sc.samples().iter().zip(free.samples()).map(|(s, f)| s - f).collect()
    } else {
        sc.samples().to_vec()
    };
    let problem = QpProblem::new(influence, target, 0.0, sc.sample_interval())?;
    let prepared = PreparedQp::new(&problem);
    let alpha_max = prepared.alpha_max();
    let options = SolveOptions {
        kkt_tolerance,
        max_iterations: None,
    };
    let evaluate = |alpha: f64| -> Result<EStep> {
        let mut estimate = prepared.solve(alpha, &options)?;
        if debias {
            estimate = prepared.debias(&estimate, &options)?;
        }
        estimate.sna = SnaSignal::with_start(estimate.sna.values().to_vec(), sc.sample_interval(), sc.start_time())?;
        let y = lti::simulate(tf, init, &estimate.sna.to_series()?)?;
        let r_squared = r_squared(&y, sc)?;
        let alpha_fraction = if alpha_max > 0.0 { alpha / alpha_max } else { 0.0 };
        Ok(EStep {
            estimate,
            r_squared,
            alpha_fraction,
        })
    };
    match *alpha {
        AlphaPolicy::Fixed { value } => evaluate(value),
        AlphaPolicy::Relative { fraction } => evaluate(fraction * alpha_max),
        AlphaPolicy::Grid {
            lo,
            hi,
            points,
            max_support_fraction,
        } => {
            let mut candidates = crate::deconv::relative_alpha_grid(alpha_max, lo, hi, points)
                .into_iter()
                .map(evaluate)
                .collect::<Result<Vec<_>>>()?;
            let best = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.estimate.sna.support_fraction() <= max_support_fraction)
                .max_by(|x, y| x.1.r_squared.total_cmp(&y.1.r_squared))
                .map(|(i, _)| i)
                .unwrap_or(candidates.len() - 1);
            Ok(candidates.swap_remove(best))
        }
    }
}

const PREFILTER_PASSES: usize = 20;
const TIME_CONSTANT_GRID_POINTS: usize = 12;

struct MStep {
    tf: DiscreteTransferFunction,
    init: InitialState,
    start: &'static str,
    gn_iterations: usize,
    gn_final_cost: f64,
    gn_warning: Option<String>,
    pruned: Vec<PruneAction>,
    prune_skipped: Option<String>,
    joint_iterations: usize,
}

fn m_step(
    sc: &UniformSeries,
    v: &SnaSignal,
    previous: Option<&(DiscreteTransferFunction, InitialState)>,
    joint: Option<(usize, usize)>,
    cfg: &SysIdConfig,
) -> Result<MStep> {
    let grid = sysid::time_constant_grid(sc.sample_interval(), sc.duration(), TIME_CONSTANT_GRID_POINTS);
    let mut starts: Vec<(Result<(DiscreteTransferFunction, InitialState)>, &'static str)> = vec![
        (
            sysid::estimate_prefiltered(sc, v, cfg.order, cfg.estimate_direct_term, cfg.stability_margin, PREFILTER_PASSES)
                .map(|e| (e.tf, e.init)),
            "prefiltered",
        ),
        (
            sysid::estimate_pole_grid(sc, v, cfg.order, cfg.estimate_direct_term, &grid).map(|e| (e.tf, e.init)),
            "pole_grid",
        ),
    ];
    if let Some(p) = previous {
        starts.push((Ok(p.clone()), "previous"));
    }
    let input = v.to_series()?;
    let mut best: Option<(f64, MStep)> = None;
    let mut first_error = None;
    for (start, label) in starts {
        let candidate = start.and_then(|(tf, init)| {
            let refined = sysid::refine_output_error(&tf, &init, sc, v, cfg)?;
            let (tf, init, pruned, prune_skipped) =
                match sysid::prune_and_rebuild(&refined.tf, &refined.init, sc.len(), cfg) {
                    Ok((tf, init, pruned)) => (tf, init, pruned, None),
                    Err(e) => (refined.tf.clone(), refined.init.clone(), Vec::new(), Some(e.to_string())),
                };
            let y = lti::simulate(&tf, &init, &input)?;
            let cost: f64 = y.samples().iter().zip(sc.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((
                cost,
                MStep {
                    tf,
                    init,
                    start: label,
                    gn_iterations: refined.iterations,
                    gn_final_cost: refined.final_cost(),
                    gn_warning: refined.warning.clone(),
                    pruned,
                    prune_skipped,
                    joint_iterations: 0,
                },
            ))
        });
        match candidate {
            Ok((cost, m)) => {
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, m));
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let Some((cost, mut m)) = best else {
        return Err(first_error.expect("at least one start was attempted"));
    };
    let Some((lookahead, max_iterations)) = joint else {
        return Ok(m);
    };
    // the SNA from the joint refinement is discarded; the E-step re-estimates it
    let jcfg = SysIdConfig {
        max_gn_iterations: max_iterations,
        ..*cfg
    };
    let joint = sysid::refine_joint(&m.tf, &m.init, sc, v, lookahead, &jcfg)?;
    if let Ok((tf, init, pruned)) = sysid::prune_and_rebuild(&joint.tf, &joint.init, sc.len(), cfg) {
        if joint.final_cost() < cost {
            m.tf = tf;
            m.init = init;
            m.pruned.extend(pruned);
            m.joint_iterations = joint.iterations;
        }
    }
    Ok(m)
}

/// Fit from the trough-to-peak initial SNA.
pub fn fit(sc: &UniformSeries, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let v0 = match config.init_smoothing_hz {
        Some(hz) => smoothed_trough_to_peak_init(sc, config.min_scr_amplitude, hz)?,
        None => trough_to_peak_init(sc, config.min_scr_amplitude)?,
    };
    fit_from(sc, config, v0)
}

/// Fit from a given initial SNA.
pub fn fit_from(sc: &UniformSeries, config: &FitConfig, initial_sna: SnaSignal) -> Result<FitResult> {
    config.validate()?;
    let cfg = config.sysid();
    let init_impulses = initial_sna.support_size();
    let mut v = initial_sna;
    let mut previous: Option<(DiscreteTransferFunction, InitialState)> = None;
    let mut iterations = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, DiscreteTransferFunction, InitialState, SnaSignal)> = None;
    let joint = config.joint_lookahead.map(|l| (l, config.max_joint_iterations));

    for k in 0..config.max_em_iterations {
        let m = m_step(sc, &v, previous.as_ref(), joint, &cfg)?;
        let e = estimate_sna(
            &m.tf,
            &m.init,
            sc,
            &config.alpha,
            config.kkt_tolerance,
            config.subtract_free_response,
            config.debias,
        )?;
        let r2 = e.r_squared;
        iterations.push(EmIteration {
            r_squared: r2,
            model_start: m.start.to_string(),
            gn_iterations: m.gn_iterations,
            gn_final_cost: m.gn_final_cost,
            gn_warning: m.gn_warning,
            joint_gn_iterations: m.joint_iterations,
            pruned: m.pruned,
            prune_skipped: m.prune_skipped,
            order: m.tf.order(),
            solver: e.estimate.diagnostics,
            support_size: e.estimate.sna.support_size(),
            burst_count: e.estimate.sna.bursts().len(),
        });
        let previous_r2 = history.last().copied();
        history.push(r2);
        if best.as_ref().is_none_or(|(i, ..)| r2 > history[*i]) {
            best = Some((k, m.tf.clone(), m.init.clone(), e.estimate.sna.clone()));
        }
        previous = Some((m.tf, m.init));
        v = e.estimate.sna;
        if let Some(p) = previous_r2 {
            if (r2 - p) / p.abs().max(f64::MIN_POSITIVE) < config.em_tolerance {
                break;
            }
        }
    }

    let (best_iteration, model, init, sna) = best.expect("at least one iteration ran");
    let free = lti::free_response(&model, &init, sc.len())?;
    let free_negative_samples = free.samples().iter().filter(|f| **f < 0.0).count();
    let free_overshoot_samples = free.samples().iter().zip(sc.samples()).filter(|(f, s)| f > s).count();
    let y = lti::simulate(&model, &init, &sna.to_series()?)?;
    let r_squared = r_squared(&y, sc)?;
    Ok(FitResult {
        model,
        init,
        sna,
        r_squared,
        em_history: history,
        diagnostics: FitDiagnostics {
            init_impulses,
            iterations,
            best_iteration,
            free_negative_samples,
            free_overshoot_samples,
        },
        input_sha256: series_sha256(sc),
    })
}

#[cfg(test)]
mod tests;
