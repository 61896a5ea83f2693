//! Filter, decimate, trim and screen a raw recording.

use serde::{Deserialize, Serialize};
use udm::signal::{self, butterworth_lowpass, screen_validity, EventSchedule, ScreeningConfig, ValidityReport};
use udm::UniformSeries;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub cutoff_hz: f64,
    pub filter_order: usize,
    pub target_rate_hz: f64,
    /// Seconds kept before the first event onset when trimming to events.
    pub trim_lead_s: f64,
    /// Seconds kept after the last event onset; the end of the last trial.
    pub trim_tail_s: f64,
    pub screening: ScreeningConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            cutoff_hz: 5.0,
            filter_order: 2,
            target_rate_hz: 10.0,
            trim_lead_s: 0.0,
            trim_tail_s: 10.0,
            screening: ScreeningConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_rate_hz: f64,
    pub output_rate_hz: f64,
    /// False when the cutoff is not below the input Nyquist frequency, in
    /// which case the input is already band-limited enough.
    pub filtered: bool,
    pub decimation_factor: usize,
    /// `(t0, t1)` seconds kept when events were given.
    pub trimmed: Option<(f64, f64)>,
    pub validity: ValidityReport,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub series: UniformSeries,
    pub report: PreprocessReport,
}

pub fn preprocess(raw: &UniformSeries, events: Option<&EventSchedule>, config: &PreprocessConfig) -> CliResult<Preprocessed> {
    let input_rate = raw.sample_rate();
    if input_rate + 1e-6 < config.target_rate_hz {
        return Err(CliError::usage(format!(
            "input rate {input_rate} Hz is below the target rate {} Hz",
            config.target_rate_hz
        )));
    }
    let filtered = config.cutoff_hz < 0.5 * input_rate;
    let smooth = if filtered {
        butterworth_lowpass(raw, config.cutoff_hz, config.filter_order)?
    } else {
        raw.clone()
    };
    let decimated = signal::decimate(&smooth, config.target_rate_hz)?;
    let decimation_factor = (input_rate / config.target_rate_hz).round() as usize;
    let (series, trimmed) = match events.filter(|e| !e.is_empty()) {
        Some(e) => {
            let t0 = (e.onsets()[0] - config.trim_lead_s).max(decimated.start_time());
            let t1 = (e.onsets()[e.len() - 1] + config.trim_tail_s).min(decimated.end_time());
            (signal::trim(&decimated, t0, t1)?, Some((t0, t1)))
        }
        None => (decimated, None),
    };
    let validity = screen_validity(&series, &config.screening);
    let reasons = validity.reasons();
    Ok(Preprocessed {
        report: PreprocessReport {
            input_rate_hz: input_rate,
            output_rate_hz: series.sample_rate(),
            filtered,
            decimation_factor,
            trimmed,
            validity,
            reasons,
        },
        series,
    })
}
