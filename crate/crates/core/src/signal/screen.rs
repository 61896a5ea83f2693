use serde::{Deserialize, Serialize};

use super::peaks::valley_peak_pairs;
use super::UniformSeries;

/// Thresholds for recording-level validity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningConfig {
    /// Minimum length in seconds of a flat-at-minimum run to flag.
    pub flat_min_duration: f64,
    /// Per-sample change and distance-to-minimum bound for "flat" (µS).
    pub flat_epsilon: f64,
    /// Single-step decrease that counts as a contact-loss drop (µS).
    pub drop_threshold: f64,
    /// Minimum trough-to-peak rise of a skin conductance response (µS).
    pub min_scr_amplitude: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            flat_min_duration: 10.0,
            flat_epsilon: 1e-4,
            drop_threshold: 0.5,
            min_scr_amplitude: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// `(start, end)` seconds of flat segments at the series minimum.
    pub flat_segments: Vec<(f64, f64)>,
    /// `(start, end)` seconds of sudden drops.
    pub drop_artifacts: Vec<(f64, f64)>,
    pub has_scr: bool,
    pub usable: bool,
}

impl ValidityReport {
    /// Human-readable exclusion reasons; empty when usable.
    pub fn reasons(&self) -> Vec<String> {
        let mut r = Vec::new();
        if !self.flat_segments.is_empty() {
            r.push(format!("{} flat segment(s) at minimum level", self.flat_segments.len()));
        }
        if !self.drop_artifacts.is_empty() {
            r.push(format!("{} sudden drop(s)", self.drop_artifacts.len()));
        }
        if !self.has_scr {
            r.push("no skin conductance response detected".to_string());
        }
        r
    }
}

pub fn screen_validity(series: &UniformSeries, config: &ScreeningConfig) -> ValidityReport {
    let x = series.samples();
    let dt = series.sample_interval();
    let min = series.min();
    let eps = config.flat_epsilon;

    let mut flat_segments = Vec::new();
    let near_min = |i: usize| (x[i] - min).abs() < eps;
    let mut i = 0;
    while i < x.len() {
        if !near_min(i) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < x.len() && near_min(j + 1) && (x[j + 1] - x[j]).abs() < eps {
            j += 1;
        }
        let duration = (j - i + 1) as f64 * dt;
        if duration + 1e-9 * dt >= config.flat_min_duration {
            flat_segments.push((series.time_at(i), series.time_at(j + 1)));
        }
        i = j + 1;
    }

    // consecutive dropping steps merge into one artifact
    let mut drop_artifacts: Vec<(f64, f64)> = Vec::new();
    let mut last_drop: Option<usize> = None;
    for k in 0..x.len().saturating_sub(1) {
        if x[k] - x[k + 1] >= config.drop_threshold {
            match (last_drop, drop_artifacts.last_mut()) {
                (Some(prev), Some(seg)) if prev + 1 == k => seg.1 = series.time_at(k + 1),
                _ => drop_artifacts.push((series.time_at(k), series.time_at(k + 1))),
            }
            last_drop = Some(k);
        }
    }

    let has_scr = !valley_peak_pairs(x, config.min_scr_amplitude).is_empty();
    let usable = flat_segments.is_empty() && drop_artifacts.is_empty() && has_scr;
    ValidityReport {
        flat_segments,
        drop_artifacts,
        has_scr,
        usable,
    }
}
