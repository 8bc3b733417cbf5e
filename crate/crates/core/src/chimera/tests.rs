use super::*;
use crate::classic_estimation::dc_estimate;
use crate::dataset::{build_corpus, generate_profiles, CorpusConfig, ProfileConfig};
use crate::grid_model::build_matrices;
use crate::powerflow::h_measure;
use rand::Rng;

fn corpus(case: &GridCase, epochs: usize, noise: f64, seed: u64) -> Vec<EpochRecord> {
    let bundle = build_matrices(case).unwrap();
    let profile = generate_profiles(case, &ProfileConfig::for_case(case, epochs, seed)).unwrap();
    let cfg = CorpusConfig {
        noise_sigma: noise,
        seed,
        ..CorpusConfig::default()
    };
    build_corpus(case, &bundle, &profile, &cfg).unwrap().records
}

fn small_config(variant: ModelVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 8,
        seq_len: 4,
        batch: 4,
        mlp_hidden: vec![8, 8, 4],
        coarse_iterations: 5,
        fine_iterations: 5,
        validation_interval: 5,
        ..TrainConfig::new(variant, seed)
    }
}

fn pooled_mape(truth: &[StateVector], est: &[StateVector]) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for (x, y) in truth.iter().zip(est) {
        for (a, b) in x.concat().iter().zip(y.concat()) {
            if a.abs() >= 1e-9 {
                s += ((b - a) / a).abs();
                k += 1;
            }
        }
    }
    s / k as f64
}

#[test]
fn variants_parse_and_size_inputs() {
    for v in ModelVariant::ALL {
        assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
    }
    assert!("cnn".parse::<ModelVariant>().is_err());
    assert_eq!(ModelVariant::Chimera.input_width(14), 42);
    assert_eq!(ModelVariant::LstmRef.input_width(14), 28);
    assert_eq!(ModelVariant::MlpBaseline.input_width(14), 28);
}

#[test]
fn dc_slice_of_input_is_the_dc_estimate() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 64, 0.01, 2);
    for obs in Observation::from_records(&records) {
        let u = assemble_input(ModelVariant::Chimera, &obs);
        let expect = dc_estimate(&bundle, &obs.z[..14]).unwrap();
        for (a, b) in u[28..].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(&u[..28], obs.z.as_slice());
    }
}

/// Random measurements on the toy case, DC estimates consistent with them.
fn toy_observations(steps: usize, seed: u64) -> (GridCase, MatrixBundle, Vec<Observation>) {
    let case = GridCase::toy3();
    let bundle = build_matrices(&case).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = (0..steps)
        .map(|k| {
            let mut x = StateVector::flat(3);
            for i in case.non_reference() {
                x.theta[i] = rng.random_range(-0.1..0.1);
                x.v[i] = rng.random_range(0.97..1.03);
            }
            let z: Vec<f64> = h_measure(&case, &x)
                .into_iter()
                .map(|v| v + rng.random_range(-0.02..0.02))
                .collect();
            let theta_dc = dc_estimate(&bundle, &z[..3]).unwrap();
            Observation {
                z,
                theta_dc,
                has_prev: k > 0,
            }
        })
        .collect();
    (case, bundle, obs)
}

#[test]
fn composed_loss_gradient_matches_finite_differences() {
    let (case, bundle, obs) = toy_observations(12, 4);
    let split = crate::dataset::split_corpus(obs.len(), [1.0, 0.0, 0.0], 2).unwrap();
    let data = TrainSet::observations_only(obs, split);
    let cfg = TrainConfig {
        hidden: 4,
        seq_len: 3,
        gamma: 0.5,
        theta_scale: 0.5,
        v_scale: 0.5,
        ..TrainConfig::new(ModelVariant::Chimera, 9)
    };
    let model = TrainedModel::init(&case, cfg, InputNorm::identity(9)).unwrap();
    let starts = [0usize, 5];
    let (terms, grad) = loss_and_gradient(&model, &case, &bundle, &data, &starts).unwrap();
    assert!(terms.l_dynamic > 0.0);
    assert_eq!(terms.l_total, terms.l_static + 0.5 * terms.l_dynamic);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..grad.len() {
        let up = model.with_parameter_offset(k, eps);
        let dn = model.with_parameter_offset(k, -eps);
        let lu = loss_and_gradient(&up, &case, &bundle, &data, &starts).unwrap().0;
        let ld = loss_and_gradient(&dn, &case, &bundle, &data, &starts).unwrap().0;
        let fd = (lu.l_total - ld.l_total) / (2.0 * eps);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-7);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn physics_variants_never_hold_true_states() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 80, 0.01, 3);
    let mut poisoned = records.clone();
    for r in &mut poisoned {
        r.x_true.theta.fill(f64::NAN);
        r.x_true.v.fill(f64::NAN);
    }
    for variant in [ModelVariant::Chimera, ModelVariant::LstmRef] {
        let cfg = small_config(variant, 5);
        let a = TrainSet::from_records(&records, variant, cfg.split_fractions, 4).unwrap();
        let b = TrainSet::from_records(&poisoned, variant, cfg.split_fractions, 4).unwrap();
        assert!(!a.has_truth());
        let (ma, _) = train(&case, &bundle, &a, &cfg).unwrap();
        let (mb, _) = train(&case, &bundle, &b, &cfg).unwrap();
        assert_eq!(ma.parameters(), mb.parameters());
    }
    let mlp = TrainSet::from_records(&records, ModelVariant::MlpBaseline, [0.7, 0.15, 0.15], 1)
        .unwrap();
    assert!(mlp.has_truth());
    let cfg = small_config(ModelVariant::Chimera, 5);
    assert!(matches!(
        train(&case, &bundle, &mlp, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn same_seed_trains_identically() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 80, 0.01, 4);
    for variant in ModelVariant::ALL {
        let cfg = small_config(variant, 11);
        let data = TrainSet::from_records(&records, variant, cfg.split_fractions, 4).unwrap();
        let (a, la) = train(&case, &bundle, &data, &cfg).unwrap();
        let (b, lb) = train(&case, &bundle, &data, &cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(la, lb);
        assert_eq!(la.entries.len(), 10);
        assert!(la.entries.iter().all(|e| e.phase == if e.iteration < 5 { 1 } else { 2 }));
    }
}

#[test]
fn zero_output_decodes_to_flat_state() {
    let case = GridCase::ieee14();
    let mut model = TrainedModel::init(
        &case,
        small_config(ModelVariant::LstmRef, 1),
        InputNorm::identity(28),
    )
    .unwrap();
    if let Network::Lstm(net) = &mut model.net {
        net.head.w.fill(0.0);
        net.head.b.fill(0.0);
    }
    let records = corpus(&case, 64, 0.01, 1);
    let obs = Observation::from_records(&records);
    let x = model.estimate(&obs[..4]).unwrap();
    assert_eq!(x, StateVector::flat(14));
}

#[test]
fn short_history_is_a_warm_up_error() {
    let case = GridCase::ieee14();
    let model = TrainedModel::init(
        &case,
        small_config(ModelVariant::Chimera, 1),
        InputNorm::identity(42),
    )
    .unwrap();
    let obs = Observation::from_records(&corpus(&case, 64, 0.01, 1));
    assert!(matches!(
        model.estimate(&obs[..3]),
        Err(Error::WarmUp {
            needed: 4,
            available: 3
        })
    ));
    assert_eq!(model.estimate(&obs[..4]).unwrap(), model.estimate(&obs[..4]).unwrap());
    // padded series estimates agree with explicit windows once history exists
    let series = model.estimate_series(&obs, 0..10).unwrap();
    assert!(series[9].max_abs_diff(&model.estimate(&obs[6..10]).unwrap()) < 1e-14);
    let padded: Vec<Observation> = model.padded_window(&obs, 1);
    assert_eq!(padded[0], obs[0]);
    assert_eq!(padded[2], obs[0]);
    assert_eq!(padded[3], obs[1]);
    assert!(series[1].max_abs_diff(&model.estimate(&padded).unwrap()) < 1e-14);
}

#[test]
fn probe_reproduces_series_estimates_and_gradients() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let obs = Observation::from_records(&corpus(&case, 64, 0.01, 6));
    for variant in ModelVariant::ALL {
        let width = variant.input_width(14);
        let mut cfg = small_config(variant, 2);
        cfg.standardize = true;
        let mut norm = InputNorm::identity(width);
        norm.std.iter_mut().enumerate().for_each(|(k, s)| *s = 0.5 + 0.01 * k as f64);
        let model = TrainedModel::init(&case, cfg, norm).unwrap();
        let t = 20;
        let probe = model.probe(&bundle, &obs, t).unwrap();
        let series = model.estimate_series(&obs, t..t + 1).unwrap();
        assert!(probe.estimate(&obs[t].z).unwrap().max_abs_diff(&series[0]) < 1e-13);

        // gradient of Σ θ̂ + 3 Σ V̂ with respect to z
        let f = |x: &StateVector| x.theta.iter().sum::<f64>() + 3.0 * x.v.iter().sum::<f64>();
        let (_, g) = probe
            .estimate_with_grad(&obs[t].z, |x| {
                let mut g = vec![1.0; 14];
                g.extend(vec![3.0; 14]);
                let _ = x;
                g
            })
            .unwrap();
        let eps = 1e-6;
        for k in 0..28 {
            let mut up = obs[t].z.clone();
            up[k] += eps;
            let mut dn = obs[t].z.clone();
            dn[k] -= eps;
            let fd = (f(&probe.estimate(&up).unwrap()) - f(&probe.estimate(&dn).unwrap()))
                / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{variant} z{k}: {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_estimates() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 80, 0.01, 7);
    let obs = Observation::from_records(&records);
    for variant in ModelVariant::ALL {
        let cfg = small_config(variant, 3);
        let data = TrainSet::from_records(&records, variant, cfg.split_fractions, 4).unwrap();
        let (model, _) = train(&case, &bundle, &data, &cfg).unwrap();
        let text = serde_json::to_string(&model.to_checkpoint()).unwrap();
        let ck: crate::nn::Checkpoint = serde_json::from_str(&text).unwrap();
        let back = TrainedModel::from_checkpoint(&case, &ck).unwrap();
        assert_eq!(
            model.estimate_series(&obs, 0..80).unwrap(),
            back.estimate_series(&obs, 0..80).unwrap()
        );
    }
}

#[test]
fn chimera_smoke_training_halves_the_loss() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 200, 0.01, 8);
    let cfg = TrainConfig::new(ModelVariant::Chimera, 8);
    let data = TrainSet::from_records(&records, cfg.variant, cfg.split_fractions, 32).unwrap();
    let (_, log) = train(&case, &bundle, &data, &cfg).unwrap();
    let first = log.entries[0].loss.l_total;
    let tail: f64 = log.entries[log.entries.len() - 20..]
        .iter()
        .map(|e| e.loss.l_total)
        .sum::<f64>()
        / 20.0;
    assert!(tail < 0.5 * first, "first {first}, final {tail}");
    assert!(log.best_validation < log.initial_validation);
}

#[test]
fn mlp_fits_noise_free_data() {
    let case = GridCase::ieee14();
    let bundle = build_matrices(&case).unwrap();
    let records = corpus(&case, 300, 0.0, 9);
    let cfg = TrainConfig {
        coarse_iterations: 3000,
        ..TrainConfig::new(ModelVariant::MlpBaseline, 9)
    };
    let data = TrainSet::from_records(&records, cfg.variant, cfg.split_fractions, 1).unwrap();
    let (model, _) = train(&case, &bundle, &data, &cfg).unwrap();
    let test = data.split.test.clone();
    let est = model.estimate_series(&data.observations, test.clone()).unwrap();
    let truth: Vec<StateVector> = records[test].iter().map(|r| r.x_true.clone()).collect();
    let mape = pooled_mape(&truth, &est);
    assert!(mape < 0.02, "MAPE {mape}");
}
