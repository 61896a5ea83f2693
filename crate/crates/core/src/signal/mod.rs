//! Uniformly sampled series, preprocessing and recording screening.

mod filter;
pub mod peaks;
mod screen;

pub use filter::{butterworth_lowpass, ButterworthLowpass};
pub use screen::{screen_validity, ScreeningConfig, ValidityReport};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdmError};

/// Relative tolerance used when comparing sample rates and time stamps.
const TIME_EPS: f64 = 1e-9;

/// A uniformly sampled scalar signal.
///
/// Sample `i` sits at `start_time + i * sample_interval` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSeries")]
pub struct UniformSeries {
    samples: Vec<f64>,
    sample_interval: f64,
    start_time: f64,
}

#[derive(Deserialize)]
struct RawSeries {
    samples: Vec<f64>,
    sample_interval: f64,
    start_time: f64,
}

impl TryFrom<RawSeries> for UniformSeries {
    type Error = UdmError;

    fn try_from(raw: RawSeries) -> Result<Self> {
        UniformSeries::with_start(raw.samples, raw.sample_interval, raw.start_time)
    }
}

impl UniformSeries {
    pub fn new(samples: Vec<f64>, sample_interval: f64) -> Result<Self> {
        Self::with_start(samples, sample_interval, 0.0)
    }

    pub fn with_start(samples: Vec<f64>, sample_interval: f64, start_time: f64) -> Result<Self> {
        if !(sample_interval > 0.0) || !sample_interval.is_finite() {
            return Err(UdmError::invalid(format!(
                "sample interval must be positive, got {sample_interval}"
            )));
        }
        if !start_time.is_finite() {
            return Err(UdmError::invalid("start time must be finite"));
        }
        if samples.is_empty() {
            return Err(UdmError::invalid("series must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(UdmError::invalid(format!("sample {i} is not finite")));
        }
        Ok(UniformSeries {
            samples,
            sample_interval,
            start_time,
        })
    }

    /// Series of `len` zeros.
    pub fn zeros(len: usize, sample_interval: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_interval)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.sample_interval
    }

    /// Time stamp of sample `i`.
    pub fn time_at(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.sample_interval
    }

    /// Covered duration; each sample owns one interval.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.sample_interval
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    /// Same timing, new samples. Lengths must agree.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != self.samples.len() {
            return Err(UdmError::invalid(format!(
                "length mismatch: {} vs {}",
                samples.len(),
                self.samples.len()
            )));
        }
        Self::with_start(samples, self.sample_interval, self.start_time)
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stimulus onsets with per-onset condition labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    onsets: Vec<f64>,
    labels: Vec<String>,
}

impl EventSchedule {
    pub fn new(onsets: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if onsets.len() != labels.len() {
            return Err(UdmError::invalid(format!(
                "{} onsets but {} labels",
                onsets.len(),
                labels.len()
            )));
        }
        if onsets.iter().any(|t| !t.is_finite()) {
            return Err(UdmError::invalid("onsets must be finite"));
        }
        if onsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UdmError::invalid("onsets must be strictly increasing"));
        }
        Ok(EventSchedule { onsets, labels })
    }

    pub fn onsets(&self) -> &[f64] {
        &self.onsets
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &str)> {
        self.onsets
            .iter()
            .copied()
            .zip(self.labels.iter().map(String::as_str))
    }
}

/// Keep every k-th sample where k = current rate / target rate.
///
/// The series must already be band-limited below the target Nyquist
/// frequency; no anti-alias filtering happens here.
pub fn decimate(series: &UniformSeries, target_rate_hz: f64) -> Result<UniformSeries> {
    if !(target_rate_hz > 0.0) || !target_rate_hz.is_finite() {
        return Err(UdmError::invalid(format!(
            "target rate must be positive, got {target_rate_hz}"
        )));
    }
    let ratio = series.sample_rate() / target_rate_hz;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-6 * ratio.max(1.0) {
        return Err(UdmError::invalid(format!(
            "rate ratio {ratio} is not a positive integer"
        )));
    }
    let factor = factor as usize;
    let samples: Vec<f64> = series.samples.iter().copied().step_by(factor).collect();
    UniformSeries::with_start(
        samples,
        series.sample_interval * factor as f64,
        series.start_time,
    )
}

/// Sub-series covering the half-open interval `[t0, t1)`.
pub fn trim(series: &UniformSeries, t0: f64, t1: f64) -> Result<UniformSeries> {
    if !(t0 < t1) {
        return Err(UdmError::invalid(format!("trim bounds out of order: {t0} >= {t1}")));
    }
    let slack = TIME_EPS * series.end_time().abs().max(1.0) + 1e-9 * series.sample_interval;
    if t0 < series.start_time - slack || t1 > series.end_time() + slack {
        return Err(UdmError::invalid(format!(
            "trim [{t0}, {t1}] outside recording span [{}, {}]",
            series.start_time,
            series.end_time()
        )));
    }
    let dt = series.sample_interval;
    let i0 = (((t0 - series.start_time) / dt) - 1e-6).ceil().max(0.0) as usize;
    let i1 = ((((t1 - series.start_time) / dt) - 1e-6).ceil().max(0.0) as usize).min(series.len());
    if i0 >= i1 {
        return Err(UdmError::invalid(format!("trim [{t0}, {t1}] selects no samples")));
    }
    UniformSeries::with_start(series.samples[i0..i1].to_vec(), dt, series.time_at(i0))
}
