use kat_core::augmentation::{compute_weights, generate_sites, synthesize, SiteGenConfig};
use kat_core::classical::{calibrate, mse};
use kat_core::diagnostics::{evaluate_point, TrainedModel};
use kat_core::harness::simulate;
use kat_core::neural::{init_params, read_params, write_params};
use kat_core::training::{train, DiagnosticFlags};
use kat_core::*;
use proptest::prelude::*;

const NET: &str = r#"{"input_dim": 24, "layers": [
  {"type": "dense", "in": 24, "out": 16, "activation": "relu"},
  {"type": "dense", "in": 16, "out": 24, "activation": "identity"}]}"#;

fn small_case1(seed: u64) -> harness::Simulated {
    let mut cfg = SimulatorConfig::for_task(Task::Um, seed);
    cfg.train_len = Some(60);
    cfg.test_len = Some(20);
    simulate(&cfg).unwrap()
}

#[test]
fn calibrate_augment_train_evaluate() {
    let sim = small_case1(4);
    let lib = [
        ModelDescriptor::new(ClassicalModelKind::Affine, 0),
        serde_json::from_str::<ModelDescriptor>(r#"{"kind": "kernel_ridge", "gamma": 0.05}"#).unwrap(),
    ];
    let fitted: Vec<CalibratedModel> = lib
        .iter()
        .map(|d| calibrate(d, &sim.train, CalibrationMethod::ClosedForm).unwrap())
        .collect();
    for m in &fitted {
        assert!((mse(m, &sim.train).unwrap() - m.e_star).abs() <= 1e-9 * m.e_star.max(1.0));
    }

    let errors: Vec<f64> = fitted.iter().map(|m| m.e_star).collect();
    let w = compute_weights(&errors, &AggregationConfig { alpha: 0.0, beta: 1e6 }).unwrap();
    assert!((w.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let sites = generate_sites(&sim.train, &SiteGenConfig::new(200, 1)).unwrap();
    let sd = synthesize(&fitted, &w, &sites).unwrap();
    assert_eq!(sd.n_synthetic(), 200);

    let hybrid = Dataset::merge(&sim.train, &sd).unwrap();
    assert_eq!((hybrid.n_historical(), hybrid.n_synthetic()), (60, 200));

    let spec: NetworkSpec = serde_json::from_str(NET).unwrap();
    let norm = Normalization::fit(&sim.train);
    let cfg = TrainConfig {
        iterations: 300,
        horizon: 100,
        ..Default::default()
    };
    let trace = train(&spec, &norm.apply(&hybrid), &cfg, DiagnosticFlags::default()).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(trace.eta.windows(2).all(|e| e[0] <= e[1]));
    assert!((trace.eta[299] - 0.95).abs() < 1e-12);

    let model = TrainedModel::new(&spec, trace.params.clone(), Some(norm)).unwrap();
    let report = evaluate_point(&model, &sim.train, &sim.test, LossKind::Mse).unwrap();
    let rmse = report.rmse.unwrap();
    assert!(rmse.is_finite() && rmse > 0.0);
    assert!((report.overfit_gap - (report.test_loss - report.train_loss)).abs() < 1e-12);
}

#[test]
fn training_is_reproducible() {
    let sim = small_case1(2);
    let spec: NetworkSpec = serde_json::from_str(NET).unwrap();
    let cfg = TrainConfig {
        iterations: 50,
        seed: 9,
        ..Default::default()
    };
    let a = train(&spec, &sim.train, &cfg, DiagnosticFlags::default()).unwrap();
    let b = train(&spec, &sim.train, &cfg, DiagnosticFlags::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csv_and_params_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = small_case1(1);
    let sd = augmentation::augment_da1(&sim.train, 15, 3).unwrap();
    let data = Dataset::merge(&sim.train, &sd)
        .unwrap()
        .with_normalization(Some(Normalization::fit(&sim.train)));
    let path = tmp.path().join("d.csv");
    data.write_csv(&path).unwrap();
    assert!(dataset::sidecar_path(&path).exists());
    // normalization statistics must survive the JSON sidecar bit for bit
    assert_eq!(Dataset::load_with_sidecar(&path).unwrap(), data);

    let spec: NetworkSpec = serde_json::from_str(NET).unwrap();
    let params = init_params(&spec, 5).unwrap();
    let p = tmp.path().join("p.katp");
    write_params(&p, &spec, &params).unwrap();
    assert_eq!(read_params(&p, &spec).unwrap(), params);
}

#[test]
fn simulator_splits_by_seed() {
    let a = small_case1(0);
    let b = small_case1(0);
    let c = small_case1(1);
    assert_eq!(a.train, b.train);
    assert_ne!(a.train, c.train);
    assert_eq!((a.train.len(), a.test.len()), (60, 20));
    assert_eq!(a.train.feature_dim(), 24);
}

proptest! {
    #[test]
    fn normalization_inverts(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..20),
        y in prop::collection::vec(-1e3f64..1e3, 3),
    ) {
        let samples = rows.iter().map(|r| Sample::historical(vec![r[0]], r.clone())).collect();
        let d = Dataset::from_samples(samples).unwrap();
        let n = Normalization::fit(&d);
        let back = n.denormalize_target(&n.target(&y));
        for (a, b) in back.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
