use super::*;
use crate::deconv::solve_sna;
use crate::synth::{self, BurstSpec, InitSpec, ModeSpec, ModelSpec, SynthSpec, CANONICAL_GAINS, CANONICAL_TIME_CONSTANTS};

fn canonical(bursts: Vec<BurstSpec>, noise_sigma: f64, duration: f64) -> SynthSpec {
    SynthSpec {
        model: ModelSpec::Subsystems {
            gains: CANONICAL_GAINS.to_vec(),
            time_constants: CANONICAL_TIME_CONSTANTS.to_vec(),
        },
        sample_interval: 0.1,
        init: InitSpec::Modes {
            modes: vec![
                ModeSpec { time_constant: 200.0, amplitude: 4.0 },
                ModeSpec { time_constant: 10.0, amplitude: 0.4 },
            ],
        },
        bursts,
        noise_sigma,
        duration,
        seed: 9,
    }
}

#[test]
fn r_squared_examples() {
    let obs = [0.0, 1.0, 2.0, 3.0];
    assert_eq!(r_squared_samples(&obs, &obs).unwrap(), 1.0);
    assert_eq!(r_squared_samples(&[1.5; 4], &obs).unwrap(), 0.0);
    assert!((r_squared_samples(&[0.0, 1.0, 2.0, 2.0], &obs).unwrap() - 0.8).abs() < 1e-15);
    assert!(matches!(r_squared_samples(&obs, &[2.0; 4]), Err(UdmError::UndefinedVariance)));
    assert!(r_squared_samples(&obs[..3], &obs).is_err());
}

#[test]
fn monotone_series_has_no_initial_sna() {
    let sc = UniformSeries::new((0..100).map(|i| 2.0 + 0.01 * i as f64).collect(), 0.1).unwrap();
    assert!(matches!(trough_to_peak_init(&sc, 0.01), Err(UdmError::EmptySna)));
}

#[test]
fn initial_impulses_at_known_onsets() {
    let bursts: Vec<BurstSpec> = [(20.0, 0.5), (60.0, 0.3), (100.0, 0.2)]
        .iter()
        .map(|&(onset, amp)| BurstSpec { onset, duration: 0.1, amplitude: amp })
        .collect();
    let (sc, truth) = synth::generate(&canonical(bursts, 0.0, 140.0)).unwrap();
    let v = trough_to_peak_init(&sc, 0.01).unwrap();
    let found: Vec<usize> = v.bursts().iter().map(|b| b.start).collect();
    assert_eq!(found.len(), 3, "{found:?}");
    for (f, t) in found.iter().zip(&truth.burst_onsets) {
        assert!(f.abs_diff(*t) <= 2, "{found:?} vs {:?}", truth.burst_onsets);
    }
}

#[test]
fn small_rise_is_ignored() {
    let mut y = vec![1.0; 60];
    for (k, slot) in y[..20].iter_mut().enumerate() {
        *slot += 0.001 * (20 - k) as f64;
    }
    for (k, slot) in y[20..30].iter_mut().enumerate() {
        *slot += 0.0005 * k as f64;
    }
    let sc = UniformSeries::new(y, 0.1).unwrap();
    assert!(matches!(trough_to_peak_init(&sc, 0.01), Err(UdmError::EmptySna)));
    assert!(trough_to_peak_init(&sc, 0.001).is_ok());
}

fn sorted_time_constants(tf: &DiscreteTransferFunction) -> Vec<f64> {
    let set = lti::partial_fractions(tf).unwrap();
    let mut taus: Vec<f64> = set.subsystems.iter().filter_map(|s| s.time_constant(0.1)).collect();
    taus.sort_by(f64::total_cmp);
    taus
}

#[test]
fn noiseless_fit_recovers_model() {
    let spec = synth::canonical_spec(1, 8, 300.0, 0.0).unwrap();
    let (sc, truth) = synth::generate(&spec).unwrap();
    let result = fit(&sc, &FitConfig::default()).unwrap();
    assert!(result.r_squared >= 0.999, "R² {}", result.r_squared);
    let got = sorted_time_constants(&result.model);
    let expected = sorted_time_constants(&truth.model);
    assert_eq!(got.len(), 4, "{got:?}");
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 0.05 * e, "{got:?} vs {expected:?}");
    }
}

#[test]
fn result_is_self_consistent_and_deterministic() {
    let spec = synth::canonical_spec(2, 6, 200.0, 0.01).unwrap();
    let (sc, _) = synth::generate(&spec).unwrap();
    let config = FitConfig::default();
    let a = fit(&sc, &config).unwrap();
    let b = fit(&sc, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.em_history[a.diagnostics.best_iteration], a.em_history.iter().copied().fold(f64::MIN, f64::max));
    assert!((a.verify(&sc).unwrap() - a.r_squared).abs() < 1e-12);

    // the stored SNA is the L1 solution for the stored model with each burst
    // rescaled to its least-squares gain
    let free = lti::free_response(&a.model, &a.init, sc.len()).unwrap();
    let target: Vec<f64> = sc.samples().iter().zip(free.samples()).map(|(s, f)| s - f).collect();
    let alpha = a.diagnostics.iterations[a.diagnostics.best_iteration].solver.alpha;
    let problem = QpProblem::new(build_influence_matrix(&a.model, sc.len()).unwrap(), target, alpha, 0.1).unwrap();
    let l1 = solve_sna(&problem, &SolveOptions::default()).unwrap().sna;
    let at_zero = problem.gradient(&vec![0.0; sc.len()]);
    let gradient = problem.gradient(a.sna.values());
    for burst in a.sna.bursts() {
        let range = burst.start..burst.start + burst.len;
        let ratios: Vec<f64> = range.clone().map(|i| a.sna.values()[i] / l1.values()[i]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() <= 1e-6 * ratios[0]), "{ratios:?}");
        // the unpenalized cost is stationary along the burst profile
        let along: f64 = range.clone().map(|i| l1.values()[i] * (gradient[i] - alpha)).sum();
        let scale: f64 = range.map(|i| l1.values()[i] * (alpha - at_zero[i]).abs()).sum();
        assert!(along.abs() <= 1e-6 * scale, "{along} vs {scale}");
    }

    // serialized form round-trips to the same reconstruction
    let json = serde_json::to_string(&a).unwrap();
    let back: FitResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back.model, a.model);
    assert_eq!(back.sna, a.sna);
    assert_eq!(back.verify(&sc).unwrap(), a.r_squared);
}

#[test]
fn grid_policy_respects_sparsity_target() {
    let spec = synth::canonical_spec(5, 5, 150.0, 0.01).unwrap();
    let (sc, _) = synth::generate(&spec).unwrap();
    let config = FitConfig {
        alpha: AlphaPolicy::default_grid(),
        max_em_iterations: 3,
        ..FitConfig::default()
    };
    let r = fit(&sc, &config).unwrap();
    assert!(r.sna.support_fraction() <= 0.05);
    assert!(r.r_squared > 0.95);
}

#[test]
fn config_validation() {
    assert!(FitConfig::default().validate().is_ok());
    assert!(FitConfig { order: 8, ..Default::default() }.validate().is_err());
    assert!(FitConfig { max_em_iterations: 0, ..Default::default() }.validate().is_err());
    assert!(FitConfig { alpha: AlphaPolicy::Fixed { value: -1.0 }, ..Default::default() }.validate().is_err());
    let json = r#"{"order": 3, "alpha": {"kind": "relative", "fraction": 0.05}}"#;
    let c: FitConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.order, 3);
    assert_eq!(c.max_em_iterations, 10);
}
