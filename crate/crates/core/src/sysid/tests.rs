use super::*;
use crate::lti::{Subsystem, SubsystemSet};
use crate::synth::{canonical_model, compose_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sparse_input(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> SnaSignal {
    let values = (0..len)
        .map(|_| if rng.random_bool(rate) { rng.random_range(0.05..0.5) } else { 0.0 })
        .collect();
    SnaSignal::new(values, 0.1).unwrap()
}

fn moderate_model() -> DiscreteTransferFunction {
    compose_model(&[-1.0, 1.5, 0.5], &[0.5, 2.0, 8.0], 0.1).unwrap()
}

fn observe(tf: &DiscreteTransferFunction, init: &InitialState, v: &SnaSignal) -> UniformSeries {
    lti::simulate(tf, init, &v.to_series().unwrap()).unwrap()
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn noiseless_arx_recovers_model_and_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tf = moderate_model();
    let init = InitialState::new(vec![1.3, 1.1, 0.9]).unwrap();
    let v = sparse_input(&mut rng, 600, 0.05);
    let sc = observe(&tf, &init, &v);
    let est = estimate_arx(&sc, &v, 3).unwrap();
    assert!(max_abs_diff(est.tf.a(), tf.a()) < 1e-8, "{:?} vs {:?}", est.tf.a(), tf.a());
    assert!(max_abs_diff(est.tf.b(), tf.b()) < 1e-8);
    assert!(max_abs_diff(est.init.prior_outputs(), init.prior_outputs()) < 1e-6);
    assert!(est.stable);
}

#[test]
fn zero_input_gives_zero_numerator() {
    let tf = moderate_model();
    let dt = 0.1;
    let poles: Vec<f64> = [0.5f64, 2.0, 8.0].iter().map(|t| (-dt / t).exp()).collect();
    let init = InitialState::from_modes(3, &[(poles[0], 0.5), (poles[1], -0.7), (poles[2], 2.0)]).unwrap();
    let v = SnaSignal::zeros(300, dt).unwrap();
    let sc = observe(&tf, &init, &v);
    let est = estimate_arx(&sc, &v, 3).unwrap();
    assert!(est.tf.b().iter().all(|b| *b == 0.0));
    assert!(max_abs_diff(est.tf.a(), tf.a()) < 1e-6);
}

#[test]
fn short_series_is_insufficient() {
    let v = SnaSignal::zeros(50, 0.1).unwrap();
    let sc = UniformSeries::new((0..50).map(|i| i as f64).collect(), 0.1).unwrap();
    assert!(matches!(estimate_arx(&sc, &v, 4), Err(UdmError::InsufficientData(_))));
    let sc = UniformSeries::new(vec![1.0; 40], 0.1).unwrap();
    assert!(estimate_arx(&sc, &v, 2).is_err());
}

#[test]
fn sensitivities_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tf = moderate_model();
    let init = InitialState::new(vec![1.0, 0.8, 0.6]).unwrap();
    let v = sparse_input(&mut rng, 200, 0.1);
    let (y, jac) = output_sensitivities(&tf, &init, v.values()).unwrap();
    assert_eq!(y, observe(&tf, &init, &v).into_samples());
    let layout = Layout { n: 3, direct: true };
    let p = layout.pack(&tf, &init);
    for j in 0..p.len() {
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut q = p.clone();
            q[j] += delta;
            let (a, b, s) = layout.unpack(&q);
            run_recursion(&a, &b, Some(&s), v.values())
        };
        let (up, down) = (eval(h), eval(-h));
        let col_scale = jac.column(j).amax();
        let worst = (0..y.len())
            .map(|t| ((up[t] - down[t]) / (2.0 * h) - jac[(t, j)]).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4 * col_scale, "param {j}: {worst} vs column scale {col_scale}");
    }
}

fn perturbed(rng: &mut ChaCha8Rng, tf: &DiscreteTransferFunction) -> DiscreteTransferFunction {
    let set = lti::partial_fractions(tf).unwrap();
    let subsystems = set
        .subsystems
        .iter()
        .map(|s| match *s {
            Subsystem::Real { gain, pole } => Subsystem::Real {
                gain: gain * (1.0 + rng.random_range(-0.05..0.05)),
                pole: pole.powf(1.0 + rng.random_range(-0.03..0.03)),
            },
            other => other,
        })
        .collect();
    SubsystemSet { subsystems, ..set }.to_transfer_function().unwrap()
}

#[test]
fn refinement_from_perturbed_start_reaches_zero_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tf = moderate_model();
    let init = InitialState::new(vec![2.0, 1.9, 1.8]).unwrap();
    let v = sparse_input(&mut rng, 800, 0.04);
    let sc = observe(&tf, &init, &v);
    let start = perturbed(&mut rng, &tf);
    let out = refine_output_error(&start, &init, &sc, &v, &SysIdConfig { order: 3, ..Default::default() }).unwrap();
    let energy: f64 = sc.samples().iter().map(|x| x * x).sum();
    assert!(out.final_cost() <= 1e-12 * energy, "cost {}", out.final_cost());
    assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.tf.spectral_radius().unwrap() <= 0.9999);
}

#[test]
fn refinement_never_worsens_arx_on_noisy_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tf = moderate_model();
    let init = InitialState::new(vec![1.0, 1.0, 1.0]).unwrap();
    let v = sparse_input(&mut rng, 1200, 0.03);
    let clean = observe(&tf, &init, &v);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let sc = clean.with_samples(clean.samples().iter().map(|y| y + noise.sample(&mut rng)).collect()).unwrap();
    let cfg = SysIdConfig { order: 3, ..Default::default() };
    for start in [estimate_arx(&sc, &v, 3).unwrap(), estimate_prefiltered(&sc, &v, 3, true, 0.9999, 20).unwrap()] {
        let out = refine_output_error(&start.tf, &start.init, &sc, &v, &cfg).unwrap();
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
        let sim = lti::simulate(&start.tf, &start.init, &v.to_series().unwrap()).unwrap();
        assert!(out.final_cost() <= sum_sq_diff(sim.samples(), sc.samples()) * (1.0 + 1e-12));
    }
    let start = estimate_prefiltered(&sc, &v, 3, true, 0.9999, 20).unwrap();
    let out = refine_output_error(&start.tf, &start.init, &sc, &v, &cfg).unwrap();
    // residual close to the noise floor
    assert!(out.final_cost() / 1200.0 < 1.2 * 0.01f64.powi(2));
}

fn sorted_time_constants(tf: &DiscreteTransferFunction) -> Vec<f64> {
    let set = lti::partial_fractions(tf).unwrap();
    let mut taus: Vec<f64> = set
        .subsystems
        .iter()
        .filter_map(|s| s.time_constant(tf.sample_interval()))
        .collect();
    taus.sort_by(f64::total_cmp);
    taus
}

#[test]
fn time_constants_recovered_under_noise_with_known_input() {
    let truth = canonical_model(0.1).unwrap();
    let expected = sorted_time_constants(&truth);
    let cfg = SysIdConfig::default();
    let normal = Normal::new(0.0, 0.01).unwrap();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v = sparse_input(&mut rng, 3000, 0.01);
        let p = (-0.1f64 / 200.0).exp();
        let init = InitialState::from_modes(4, &[(p, rng.random_range(2.0..6.0))]).unwrap();
        let clean = observe(&truth, &init, &v);
        let sc = clean
            .with_samples(clean.samples().iter().map(|y| y + normal.sample(&mut rng)).collect())
            .unwrap();
        let start = estimate_prefiltered(&sc, &v, 4, true, 0.9999, 20).unwrap();
        let out = refine_output_error(&start.tf, &start.init, &sc, &v, &cfg).unwrap();
        let got = sorted_time_constants(&out.tf);
        assert_eq!(got.len(), 4, "seed {seed}: {got:?}");
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 0.1 * e, "seed {seed}: {got:?} vs {expected:?}");
        }
    }
}

fn with_slow_pair() -> DiscreteTransferFunction {
    let dt = 0.1;
    let base = lti::partial_fractions(&moderate_model()).unwrap();
    // period 3 s, envelope time constant ~5 s
    let pole = Complex64::from_polar((-dt / 5.0f64).exp(), 2.0 * std::f64::consts::PI * dt / 3.0);
    let mut subsystems = base.subsystems.clone();
    subsystems.push(Subsystem::ComplexPair {
        residue: Complex64::new(0.004, 0.002),
        pole,
    });
    SubsystemSet { subsystems, direct_term: 0.0, sample_interval: dt }
        .to_transfer_function()
        .unwrap()
}

#[test]
fn prune_is_identity_on_real_models() {
    let tf = moderate_model();
    let init = InitialState::new(vec![1.0, 2.0, 3.0]).unwrap();
    let (t2, i2, actions) = prune_and_rebuild(&tf, &init, 500, &SysIdConfig::default()).unwrap();
    assert_eq!(t2, tf);
    assert_eq!(i2, init);
    assert!(actions.is_empty());
}

#[test]
fn prune_removes_slow_pair_and_preserves_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tf = with_slow_pair();
    assert_eq!(tf.order(), 5);
    let p = (-0.1f64 / 8.0).exp();
    let init = InitialState::from_modes(5, &[(p, 2.0)]).unwrap();
    let v = sparse_input(&mut rng, 1500, 0.02);
    let original = observe(&tf, &init, &v);
    let (pruned, new_init, actions) = prune_and_rebuild(&tf, &init, 1500, &SysIdConfig::default()).unwrap();
    assert_eq!(pruned.order(), 3);
    assert_eq!(actions.len(), 1);
    assert_eq!(actions[0].reason, "long_period");
    assert!((actions[0].value - 3.0).abs() < 1e-6);
    let rebuilt = observe(&pruned, &new_init, &v);
    let mean = original.samples().iter().sum::<f64>() / 1500.0;
    let ss_tot: f64 = original.samples().iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res = sum_sq_diff(original.samples(), rebuilt.samples());
    assert!(1.0 - ss_res / ss_tot > 0.995);
}

#[test]
fn clamp_pulls_poles_inside() {
    let tf = DiscreteTransferFunction::new(vec![-1.05], vec![0.0, 1.0], 0.1).unwrap();
    let c = clamp_poles(&tf, 0.9999).unwrap();
    assert!((c.a()[0] + 0.9999).abs() < 1e-12);
    let stable = moderate_model();
    assert_eq!(clamp_poles(&stable, 0.9999).unwrap(), stable);
}

#[test]
fn config_validation() {
    assert!(SysIdConfig::default().validate().is_ok());
    assert!(SysIdConfig { order: 1, ..Default::default() }.validate().is_err());
    assert!(SysIdConfig { order: 7, ..Default::default() }.validate().is_err());
    assert!(SysIdConfig { stability_margin: 1.0, ..Default::default() }.validate().is_err());
}
