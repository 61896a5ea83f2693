//! Ground-truth recordings from known models, burst trains and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decompose::{decompose_model, Decomposition};
use crate::deconv::SnaSignal;
use crate::error::{Result, UdmError};
use crate::lti::{self, DiscreteTransferFunction, InitialState, Subsystem, SubsystemSet, MIN_POLE_SEPARATION};
use crate::signal::UniformSeries;

/// Gains of the reference four-subsystem model.
pub const CANONICAL_GAINS: [f64; 4] = [-2.0, 1.2, 0.9, 0.05];
/// Time constants (seconds) of the reference four-subsystem model.
pub const CANONICAL_TIME_CONSTANTS: [f64; 4] = [0.7, 2.0, 10.0, 200.0];

/// Sum of first-order terms `g_i / (z - exp(-dt / tau_i))`.
pub fn compose_model(gains: &[f64], time_constants: &[f64], sample_interval: f64) -> Result<DiscreteTransferFunction> {
    if gains.len() != time_constants.len() || gains.is_empty() {
        return Err(UdmError::invalid("gains and time constants must be non-empty and of equal length"));
    }
    if time_constants.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(UdmError::invalid("time constants must be positive"));
    }
    let poles: Vec<f64> = time_constants.iter().map(|t| (-sample_interval / t).exp()).collect();
    for i in 0..poles.len() {
        for j in (i + 1)..poles.len() {
            let distance = (poles[i] - poles[j]).abs();
            if distance <= MIN_POLE_SEPARATION {
                return Err(UdmError::DegeneratePoles {
                    first: poles[i].into(),
                    second: poles[j].into(),
                    distance,
                });
            }
        }
    }
    SubsystemSet {
        subsystems: gains
            .iter()
            .zip(&poles)
            .map(|(&gain, &pole)| Subsystem::Real { gain, pole })
            .collect(),
        direct_term: 0.0,
        sample_interval,
    }
    .to_transfer_function()
}

pub fn canonical_model(sample_interval: f64) -> Result<DiscreteTransferFunction> {
    compose_model(&CANONICAL_GAINS, &CANONICAL_TIME_CONSTANTS, sample_interval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Transfer { a: Vec<f64>, b: Vec<f64> },
    Subsystems { gains: Vec<f64>, time_constants: Vec<f64> },
}

/// One exponential mode of the free response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub time_constant: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    /// `[y(-1), .., y(-n)]` directly.
    PriorOutputs { values: Vec<f64> },
    /// Prior outputs continuing `sum amplitude * exp(-t / tau)` backwards.
    Modes { modes: Vec<ModeSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub onset: f64,
    pub duration: f64,
    /// Peak sample value of the cluster.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub model: ModelSpec,
    pub sample_interval: f64,
    pub init: InitSpec,
    pub bursts: Vec<BurstSpec>,
    pub noise_sigma: f64,
    pub duration: f64,
    pub seed: u64,
}

/// Everything the generator knows about a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub model: DiscreteTransferFunction,
    pub init: InitialState,
    pub sna: SnaSignal,
    pub free: UniformSeries,
    pub forced: UniformSeries,
    /// Noise-free output.
    pub clean: UniformSeries,
    /// Sample index of the first nonzero value of each burst.
    pub burst_onsets: Vec<usize>,
    /// Three-component split of the clean output, when the model allows it.
    pub components: Option<Decomposition>,
}

impl SynthSpec {
    pub fn build_model(&self) -> Result<DiscreteTransferFunction> {
        match &self.model {
            ModelSpec::Transfer { a, b } => DiscreteTransferFunction::new(a.clone(), b.clone(), self.sample_interval),
            ModelSpec::Subsystems { gains, time_constants } => {
                compose_model(gains, time_constants, self.sample_interval)
            }
        }
    }

    pub fn build_init(&self, order: usize) -> Result<InitialState> {
        match &self.init {
            InitSpec::PriorOutputs { values } => {
                if values.len() != order {
                    return Err(UdmError::InvalidSpec(format!(
                        "{} prior outputs for a model of order {order}",
                        values.len()
                    )));
                }
                InitialState::new(values.clone())
            }
            InitSpec::Modes { modes } => {
                let poles: Vec<(f64, f64)> = modes
                    .iter()
                    .map(|m| ((-self.sample_interval / m.time_constant).exp(), m.amplitude))
                    .collect();
                InitialState::from_modes(order, &poles)
            }
        }
    }

    fn validate(&self) -> Result<usize> {
        if !(self.sample_interval > 0.0) {
            return Err(UdmError::InvalidSpec("sample interval must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(UdmError::InvalidSpec("noise sigma must be >= 0".into()));
        }
        if !(self.duration >= self.sample_interval) {
            return Err(UdmError::InvalidSpec("duration shorter than one sample".into()));
        }
        let mut sorted = self.bursts.clone();
        sorted.sort_by(|x, y| x.onset.total_cmp(&y.onset));
        for b in &sorted {
            if !(b.onset >= 0.0 && b.onset < self.duration) {
                return Err(UdmError::InvalidSpec(format!("burst onset {} outside recording", b.onset)));
            }
            if !(b.duration > 0.0) || !(b.amplitude >= 0.0) {
                return Err(UdmError::InvalidSpec("burst duration must be > 0 and amplitude >= 0".into()));
            }
        }
        for w in sorted.windows(2) {
            let (first, _) = self.burst_span(&w[0]);
            let (second, _) = self.burst_span(&w[1]);
            let first_end = first + self.burst_len(&w[0]);
            if first_end > second {
                return Err(UdmError::InvalidSpec(format!(
                    "bursts at {} s and {} s overlap",
                    w[0].onset, w[1].onset
                )));
            }
        }
        Ok((self.duration / self.sample_interval).round() as usize)
    }

    fn burst_len(&self, b: &BurstSpec) -> usize {
        ((b.duration / self.sample_interval).round() as usize).max(1)
    }

    fn burst_span(&self, b: &BurstSpec) -> (usize, usize) {
        let start = (b.onset / self.sample_interval).round() as usize;
        (start, start + self.burst_len(b))
    }
}

/// Raised-cosine cluster of `len` samples with peak value 1.
pub fn raised_cosine(len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|k| (std::f64::consts::PI * (k + 1) as f64 / (len + 1) as f64).sin().powi(2))
        .collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

/// Generate a recording and its ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(UniformSeries, SynthTruth)> {
    let len = spec.validate()?;
    let model = spec.build_model()?;
    let init = spec.build_init(model.order())?;
    let dt = spec.sample_interval;

    let mut values = vec![0.0; len];
    let mut burst_onsets = Vec::new();
    let mut sorted = spec.bursts.clone();
    sorted.sort_by(|x, y| x.onset.total_cmp(&y.onset));
    for b in &sorted {
        let (start, _) = spec.burst_span(b);
        let profile = raised_cosine(spec.burst_len(b));
        for (k, p) in profile.iter().enumerate() {
            if let Some(slot) = values.get_mut(start + k) {
                *slot = b.amplitude * p;
            }
        }
        if b.amplitude > 0.0 {
            burst_onsets.push(start);
        }
    }
    let sna = SnaSignal::new(values, dt)?;
    let input = sna.to_series()?;
    let free = lti::free_response(&model, &init, len)?;
    let forced = lti::forced_response(&model, &input)?;
    let clean_samples: Vec<f64> = free.samples().iter().zip(forced.samples()).map(|(a, b)| a + b).collect();
    let clean = UniformSeries::new(clean_samples, dt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sc_samples: Vec<f64> = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| UdmError::InvalidSpec(e.to_string()))?;
        clean.samples().iter().map(|y| y + normal.sample(&mut rng)).collect()
    } else {
        clean.samples().to_vec()
    };
    let sc = UniformSeries::new(sc_samples, dt)?;
    let components = decompose_model(&model, &init, &sna).ok();
    Ok((
        sc,
        SynthTruth {
            model,
            init,
            sna,
            free,
            forced,
            clean,
            burst_onsets,
            components,
        },
    ))
}

/// `count` non-overlapping bursts with onsets spread over
/// `[margin, duration - margin)`, at least `min_gap` seconds apart.
/// Durations are drawn from 0.3..0.9 s and peak amplitudes from `amplitude`.
pub fn random_bursts(
    rng: &mut impl Rng,
    count: usize,
    duration: f64,
    margin: f64,
    min_gap: f64,
    amplitude: (f64, f64),
) -> Result<Vec<BurstSpec>> {
    let span = duration - 2.0 * margin;
    if count == 0 {
        return Ok(Vec::new());
    }
    let slack = span - min_gap * (count - 1) as f64;
    if !(slack > 0.0) {
        return Err(UdmError::InvalidSpec(format!(
            "{count} bursts {min_gap} s apart do not fit in {span} s"
        )));
    }
    // sorted uniform offsets within the slack, then spread by the gap
    let mut offsets: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..slack)).collect();
    offsets.sort_by(f64::total_cmp);
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(i, off)| BurstSpec {
            onset: ((margin + off + min_gap * i as f64) * 10.0).round() / 10.0,
            duration: (rng.random_range(0.3..0.9f64) * 10.0).round() / 10.0,
            amplitude: rng.random_range(amplitude.0..amplitude.1),
        })
        .collect())
}

/// Reference recording: canonical model, decaying tonic level, `bursts`
/// random bursts over `duration` seconds at 10 Hz.
pub fn canonical_spec(seed: u64, bursts: usize, duration: f64, noise_sigma: f64) -> Result<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0a7);
    let bursts = random_bursts(&mut rng, bursts, duration, 10.0, 15.0, (0.15, 0.4))?;
    let tonic = rng.random_range(2.0..6.0);
    let drift = rng.random_range(0.2..0.8);
    Ok(SynthSpec {
        model: ModelSpec::Subsystems {
            gains: CANONICAL_GAINS.to_vec(),
            time_constants: CANONICAL_TIME_CONSTANTS.to_vec(),
        },
        sample_interval: 0.1,
        init: InitSpec::Modes {
            modes: vec![
                ModeSpec { time_constant: 200.0, amplitude: tonic },
                ModeSpec { time_constant: 10.0, amplitude: drift },
            ],
        },
        bursts,
        noise_sigma,
        duration,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_term_model() {
        let tf = compose_model(&[1.0], &[2.0], 0.1).unwrap();
        assert_eq!(tf.order(), 1);
        assert!((tf.a()[0] + (-0.05f64).exp()).abs() < 1e-15);
        assert!((tf.a()[0] + 0.951229).abs() < 1e-6);
    }

    #[test]
    fn canonical_round_trip() {
        let tf = canonical_model(0.1).unwrap();
        let set = lti::partial_fractions(&tf).unwrap();
        let mut got: Vec<(f64, f64)> = set
            .subsystems
            .iter()
            .map(|s| (s.time_constant(0.1).unwrap(), s.gain()))
            .collect();
        got.sort_by(|x, y| x.0.total_cmp(&y.0));
        for ((tau, g), (tt, gt)) in got.iter().zip(CANONICAL_TIME_CONSTANTS.iter().zip(CANONICAL_GAINS)) {
            assert!((tau - tt).abs() < 1e-8 * tt, "{tau} vs {tt}");
            assert!((g - gt).abs() < 1e-8, "{g} vs {gt}");
        }
    }

    #[test]
    fn duplicate_time_constants_rejected() {
        assert!(matches!(
            compose_model(&[1.0, 2.0], &[3.0, 3.0], 0.1),
            Err(UdmError::DegeneratePoles { .. })
        ));
        assert!(compose_model(&[1.0], &[-3.0], 0.1).is_err());
    }

    fn quiet_spec(bursts: Vec<BurstSpec>) -> SynthSpec {
        SynthSpec {
            model: ModelSpec::Subsystems {
                gains: CANONICAL_GAINS.to_vec(),
                time_constants: CANONICAL_TIME_CONSTANTS.to_vec(),
            },
            sample_interval: 0.1,
            init: InitSpec::Modes { modes: vec![ModeSpec { time_constant: 200.0, amplitude: 3.0 }] },
            bursts,
            noise_sigma: 0.0,
            duration: 60.0,
            seed: 1,
        }
    }

    #[test]
    fn no_bursts_no_noise_is_free_response() {
        let (sc, truth) = generate(&quiet_spec(vec![])).unwrap();
        assert_eq!(sc.samples(), truth.free.samples());
        // a pure slow mode: y(t) = 3 * p^t
        let p = (-0.1f64 / 200.0).exp();
        for (t, y) in sc.samples().iter().enumerate() {
            assert!((y - 3.0 * p.powi(t as i32)).abs() < 1e-8);
        }
    }

    #[test]
    fn single_unit_impulse_is_impulse_response() {
        let mut spec = quiet_spec(vec![BurstSpec { onset: 0.0, duration: 0.1, amplitude: 1.0 }]);
        spec.init = InitSpec::PriorOutputs { values: vec![0.0; 4] };
        let (sc, truth) = generate(&spec).unwrap();
        assert_eq!(sc.samples(), truth.model.impulse_response(600).as_slice());
    }

    #[test]
    fn overlapping_bursts_rejected() {
        let spec = quiet_spec(vec![
            BurstSpec { onset: 10.0, duration: 0.8, amplitude: 0.2 },
            BurstSpec { onset: 10.5, duration: 0.5, amplitude: 0.2 },
        ]);
        assert!(matches!(generate(&spec), Err(UdmError::InvalidSpec(_))));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let spec = canonical_spec(42, 8, 300.0, 0.01).unwrap();
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 43, ..spec };
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn raised_cosine_profile() {
        assert_eq!(raised_cosine(1), vec![1.0]);
        let p = raised_cosine(5);
        assert!((p[2] - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn superposition_before_noise() {
        let spec = canonical_spec(3, 8, 300.0, 0.0).unwrap();
        let (_, truth) = generate(&spec).unwrap();
        let sim = lti::simulate(&truth.model, &truth.init, &truth.sna.to_series().unwrap()).unwrap();
        for (a, b) in sim.samples().iter().zip(truth.clean.samples()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
