use kasa_core::harness::{least_squares_floor, make_task, SynthTask, TaskSpec};
use kasa_core::model::{fingerprint, AdaptedModel, AdapterSpec, Method};
use kasa_core::trainer::{train, AdamState, LrSchedule, OptimizerKind, TrainConfig};
use kasa_core::{KasaError, TruncatedBase};

fn small_task() -> SynthTask {
    make_task(&TaskSpec {
        n: 16,
        m: 12,
        planted_noise_rank: 3,
        task_delta_rank: 2,
        noise_scale: 0.5,
        samples: 200,
        seed: 3,
    })
    .unwrap()
}

fn spec() -> AdapterSpec {
    AdapterSpec {
        rank: 4,
        alpha: 8.0,
        truncation_k: 3,
        ..AdapterSpec::default()
    }
}

fn snapshot(model: &mut AdaptedModel) -> Vec<Vec<f64>> {
    model.param_groups_mut().iter().map(|g| g.values.to_vec()).collect()
}

#[test]
fn zero_learning_rate_step_is_a_pure_evaluation() {
    let task = small_task();
    for method in Method::ALL {
        let mut model = AdaptedModel::build(method, &task.w0, &spec(), 1).unwrap();
        let before = snapshot(&mut model);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 1,
            batch_size: 1000,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &task.data, &cfg).unwrap();
        assert_eq!(snapshot(&mut model), before, "{method}");
        assert_eq!(report.trace.len(), 1);
        let initial = model.loss(&task.data.train, &cfg.regularization()).unwrap();
        assert_eq!(report.trace[0].total, initial.total);
        assert_eq!(report.trace[0].l1, initial.l1_task);
    }
}

#[test]
fn zero_steps_rejected() {
    let task = small_task();
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &spec(), 1).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, &task.data, &cfg), Err(KasaError::InvalidArgument(_))));
}

#[test]
fn full_batch_sgd_descends() {
    let task = small_task();
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &spec(), 2).unwrap();
    // Move off the ΔU = 0 saddle so the first steps make progress.
    for g in model.param_groups_mut() {
        for (i, v) in g.values.iter_mut().enumerate() {
            *v += 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
        }
    }
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        steps: 50,
        batch_size: 10_000,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &task.data, &cfg).unwrap();
    for w in report.trace.windows(2) {
        assert!(w[1].total <= w[0].total, "{} -> {}", w[0].total, w[1].total);
    }
    assert!(report.trace[49].total < report.trace[0].total);
}

#[test]
fn teacher_student_reaches_a_tenth_of_initial_loss() {
    let task = make_task(&TaskSpec::default()).unwrap();
    let floor = least_squares_floor(&task).unwrap();
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &AdapterSpec::default(), 0).unwrap();
    let initial = model.task_loss(&task.data.train).unwrap();
    let report = train(&mut model, &task.data, &TrainConfig::desk()).unwrap();
    assert!(report.train_metric < 0.1 * initial, "{} vs {initial}", report.train_metric);
    // No linear map beats the unconstrained least-squares fit on its own data.
    assert!(floor.train_mse <= report.train_metric);
    assert!(report.train_metric < 2.0 * floor.train_mse);
}

#[test]
fn runs_are_deterministic_and_leave_the_base_alone() {
    let task = small_task();
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        steps: 40,
        batch_size: 32,
        weight_decay: 0.01,
        lr_schedule: LrSchedule::Linear,
        warmup_ratio: 0.1,
        ..TrainConfig::default()
    };
    for method in Method::ALL {
        let run = || {
            let mut model = AdaptedModel::build(method, &task.w0, &spec(), 9).unwrap();
            let before = model.frozen_fingerprint();
            let report = train(&mut model, &task.data, &cfg).unwrap();
            assert_eq!(model.frozen_fingerprint(), before);
            assert_eq!(report.base_fingerprint, before);
            report
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "{method}");
        assert_eq!(a.trace.len(), 40);
        let expected = match method {
            Method::Kasa => 16 * 4 + 4 + 12 * 4,
            _ => 16 * 4 + 4 * 12,
        };
        assert_eq!(a.parameter_count, expected);
    }
    let world = TruncatedBase::truncate(&task.w0, 3).unwrap();
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &spec(), 9).unwrap();
    train(&mut model, &task.data, &cfg).unwrap();
    assert_eq!(model.frozen_fingerprint(), fingerprint(world.w_world()));
}

#[test]
fn sample_stream_is_shared_across_methods() {
    let task = small_task();
    let cfg = TrainConfig {
        steps: 12,
        batch_size: 24,
        ..TrainConfig::default()
    };
    let hashes: Vec<String> = Method::ALL
        .iter()
        .map(|&m| {
            let mut model = AdaptedModel::build(m, &task.w0, &spec(), 4).unwrap();
            train(&mut model, &task.data, &cfg).unwrap().stream_hash
        })
        .collect();
    assert!(hashes.iter().all(|h| *h == hashes[0]));
    let other = TrainConfig { seed: 1, ..cfg };
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &spec(), 4).unwrap();
    assert_ne!(train(&mut model, &task.data, &other).unwrap().stream_hash, hashes[0]);
}

#[test]
fn divergence_reports_the_step() {
    let task = small_task();
    let mut model = AdaptedModel::build(Method::Lora, &task.w0, &spec(), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e6,
        steps: 200,
        batch_size: 1000,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    match train(&mut model, &task.data, &cfg) {
        Err(KasaError::Diverged { step }) => assert!(step > 0 && step < 200),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn weight_decay_skips_singular_values() {
    let task = small_task();
    let mut model = AdaptedModel::build(Method::Kasa, &task.w0, &spec(), 5).unwrap();
    let before = snapshot(&mut model);
    let zeros: Vec<Vec<f64>> = before.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut adam = AdamState::new(&before.iter().map(Vec::len).collect::<Vec<_>>());
    let mut groups = model.param_groups_mut();
    adam.step(&mut groups, &zeros, 0.1, 0.5);
    let after: Vec<Vec<f64>> = groups.iter().map(|g| g.values.to_vec()).collect();
    assert_eq!(groups[1].name, "delta_sigma");
    assert_eq!(after[1], before[1]);
    for (a, b) in after[2].iter().zip(&before[2]) {
        assert_eq!(*a, b - 0.05 * b);
    }
}
