//! Arousal scores, the Wilcoxon signed-rank test and SNA sparsity metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::deconv::{Burst, SnaSignal};
use crate::error::{Result, UdmError};
use crate::signal::peaks::{valley_peak_pairs, ValleyPeak};
use crate::signal::{EventSchedule, UniformSeries};

/// Latency window `[lo, hi)` in seconds after an event onset.
pub const DEFAULT_WINDOW: (f64, f64) = (1.0, 4.0);

/// Largest effective sample size that uses the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArousalScore {
    pub score: f64,
    /// The window extended past either end of the signal.
    pub truncated: bool,
}

/// Index range of samples whose time lies in `[t0, t1)`, unclamped.
fn window_indices(sna: &SnaSignal, t0: f64, t1: f64) -> (i64, i64) {
    let dt = sna.sample_interval();
    let idx = |t: f64| ((t - sna.start_time()) / dt - 1e-9).ceil() as i64;
    (idx(t0), idx(t1))
}

/// Sum of SNA samples with time in `[onset + lo, onset + hi)`.
pub fn arousal_score(sna: &SnaSignal, onset: f64, window: (f64, f64)) -> Result<ArousalScore> {
    if !(window.1 > window.0) {
        return Err(UdmError::invalid("window must satisfy lo < hi"));
    }
    let (i0, i1) = window_indices(sna, onset + window.0, onset + window.1);
    let n = sna.len() as i64;
    let truncated = i0 < 0 || i1 > n;
    let (lo, hi) = (i0.clamp(0, n) as usize, i1.clamp(0, n) as usize);
    let score = sna.values()[lo..hi.max(lo)].iter().sum();
    Ok(ArousalScore { score, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArousalRow {
    pub onset: f64,
    pub label: String,
    pub score: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArousalTable {
    pub rows: Vec<ArousalRow>,
    /// Mean score per label, zero scores included.
    pub condition_means: BTreeMap<String, f64>,
}

pub fn arousal_table(sna: &SnaSignal, events: &EventSchedule, window: (f64, f64)) -> Result<ArousalTable> {
    let rows: Vec<ArousalRow> = events
        .iter()
        .map(|(onset, label)| {
            let s = arousal_score(sna, onset, window)?;
            Ok(ArousalRow {
                onset,
                label: label.to_string(),
                score: s.score,
                truncated: s.truncated,
            })
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry(r.label.clone()).or_default();
        e.0 += r.score;
        e.1 += 1;
    }
    let condition_means = sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
    Ok(ArousalTable { rows, condition_means })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    /// Sum of the ranks of positive differences.
    pub w: f64,
    /// One-sided p-value for the alternative `x > y`.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Nonzero differences `x - y` and their mid-ranks by magnitude.
pub fn signed_ranks(pairs: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < diffs.len() {
        let mut j = i;
        while j + 1 < diffs.len() && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|r| *r = mid);
        i = j + 1;
    }
    (diffs, ranks)
}

/// One-sided signed-rank test of `x > y`; exact for up to
/// [`EXACT_MAX_N`] nonzero differences, normal approximation otherwise.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let n = pairs.iter().filter(|(x, y)| x != y).count();
    let method = if n <= EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApproximation
    };
    wilcoxon_with(pairs, method)
}

pub fn wilcoxon_with(pairs: &[(f64, f64)], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(UdmError::invalid("pairs must be finite"));
    }
    let (diffs, ranks) = signed_ranks(pairs);
    let n = diffs.len();
    if n < 5 {
        return Err(UdmError::InsufficientData(format!(
            "{n} nonzero differences; at least 5 are needed"
        )));
    }
    let w: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let p_value = match method {
        WilcoxonMethod::Exact => exact_upper_tail(&ranks, w),
        WilcoxonMethod::NormalApproximation => normal_upper_tail(&ranks, w),
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w,
        p_value,
        method,
    })
}

/// `P(W >= w)` under the null by dynamic programming over doubled ranks
/// (mid-ranks are multiples of 1/2).
fn exact_upper_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let threshold = (2.0 * w).round() as usize;
    let upper: f64 = counts[threshold.min(total + 1)..].iter().sum();
    upper / 2f64.powi(ranks.len() as i32)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_upper_tail(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranks.len() {
        let mut j = i;
        while j + 1 < ranks.len() && ranks[j + 1] == ranks[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w - mean - 0.5) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    std.cdf(-z).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityMetrics {
    pub burst_count: usize,
    pub support_fraction: f64,
    /// Seconds.
    pub burst_durations: Vec<f64>,
}

pub fn sparsity_metrics(sna: &SnaSignal) -> SparsityMetrics {
    let bursts = sna.bursts();
    SparsityMetrics {
        burst_count: bursts.len(),
        support_fraction: sna.support_fraction(),
        burst_durations: bursts.iter().map(|b| b.len as f64 * sna.sample_interval()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub sna: SnaSignal,
    pub scale: f64,
    /// The series had zero range, so the output is all zeros.
    pub degenerate: bool,
}

/// Scale the SNA so its maximum equals the range of `sc`.
pub fn rescale_for_comparison(sna: &SnaSignal, sc: &UniformSeries) -> Result<Rescaled> {
    let peak = sna.values().iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(UdmError::invalid("SNA is identically zero"));
    }
    let range = sc.max() - sc.min();
    let scale = range / peak;
    Ok(Rescaled {
        sna: sna.scaled(scale)?,
        scale,
        degenerate: range == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub burst: Burst,
    pub scr: ValleyPeak,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondence {
    pub matched: Vec<MatchedPair>,
    pub unmatched_bursts: Vec<Burst>,
    pub unmatched_scrs: Vec<ValleyPeak>,
}

/// Pair SNA bursts with SCRs one-to-one in time order. A burst can match an
/// SCR when it starts within `[valley - lead, peak]` (seconds).
pub fn burst_scr_correspondence(
    sna: &SnaSignal,
    sc: &UniformSeries,
    min_amplitude: f64,
    lead: f64,
) -> Result<Correspondence> {
    if sna.len() != sc.len() {
        return Err(UdmError::invalid("SNA and series lengths differ"));
    }
    let dt = sc.sample_interval();
    let scrs = valley_peak_pairs(sc.samples(), min_amplitude);
    let bursts = sna.bursts();
    let mut used = vec![false; bursts.len()];
    let mut out = Correspondence::default();
    for scr in scrs {
        let lo = scr.valley as f64 * dt - lead - 1e-9 * dt;
        let hi = scr.peak as f64 * dt + 1e-9 * dt;
        let hit = (0..bursts.len()).find(|&i| {
            let t = bursts[i].start as f64 * dt;
            !used[i] && t >= lo && t <= hi
        });
        match hit {
            Some(i) => {
                used[i] = true;
                out.matched.push(MatchedPair { burst: bursts[i], scr });
            }
            None => out.unmatched_scrs.push(scr),
        }
    }
    out.unmatched_bursts = bursts.iter().zip(&used).filter(|(_, u)| !**u).map(|(b, _)| *b).collect();
    Ok(out)
}
