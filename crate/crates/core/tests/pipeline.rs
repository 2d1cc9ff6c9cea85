use ndarray::Array2;

use tcens_core::ensemble::train_expert;
use tcens_core::harness::{load_expert, load_scorer, save_model, Model};
use tcens_core::indomain::{train_feature_extractor, DistanceKind, DmConfig, FeConfig, InDomainModel};
use tcens_core::losses::LossConfig;
use tcens_core::{build_split_mnist, EnsembleState, ExpertConfig, FusionMode, Rng, Samples, TaskDataset};

/// Digits as bright horizontal bands at different heights.
fn synthetic_split(per_digit: usize, rng: &mut Rng) -> Samples {
    let n = per_digit * 10;
    let mut x = Array2::zeros((n, 784));
    let mut digits = Vec::with_capacity(n);
    for i in 0..n {
        let d = i % 10;
        for p in 0..784 {
            x[[i, p]] = if p / 84 == d {
                rng.uniform(0.7, 1.0)
            } else {
                rng.uniform(0.0, 0.15)
            };
        }
        digits.push(d as u8);
    }
    Samples::from_mnist(x, digits).unwrap()
}

fn tasks() -> Vec<TaskDataset> {
    let mut rng = Rng::new(5);
    let train = synthetic_split(40, &mut rng);
    let test = synthetic_split(15, &mut rng);
    build_split_mnist(&train, &test)
}

#[test]
fn trained_models_survive_a_round_trip_and_fuse() {
    let tasks = tasks();
    assert_eq!(tasks.len(), 5);
    let expert_cfg = ExpertConfig {
        hidden: vec![32],
        epochs: 5,
        ..ExpertConfig::default()
    };
    let fe_cfg = FeConfig {
        hidden: vec![64],
        embedding_dim: 16,
        loss: LossConfig {
            epochs: 2,
            lr: 1e-3,
            ..LossConfig::default()
        },
    };
    let dm_cfg = DmConfig {
        k: 5,
        ..DmConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let rng = Rng::new(17);
    let mut state = EnsembleState::new(FusionMode::Dynamic, 1.0);
    for task in &tasks[..3] {
        let t = task.task_id as u64;
        let expert = train_expert(task.task_id, &task.train, &expert_cfg, &mut rng.fork(t)).unwrap();
        let fe = train_feature_extractor(&task.train, &fe_cfg, &mut rng.fork(100 + t)).unwrap();
        let dm = InDomainModel::fit(
            fe.fe,
            fe.center,
            task.train.inputs(),
            DistanceKind::Lof,
            &dm_cfg,
            &mut rng.fork(200 + t),
        )
        .unwrap();

        let ep = dir.path().join(format!("expert_{t}.tcm"));
        let dp = dir.path().join(format!("in_domain_{t}.tcm"));
        save_model(&ep, &Model::Expert(expert.clone())).unwrap();
        save_model(&dp, &Model::InDomain(dm)).unwrap();
        let back = load_expert(&ep).unwrap();
        assert_eq!(
            back.predict_batch(task.test.inputs()).unwrap(),
            expert.predict_batch(task.test.inputs()).unwrap()
        );
        state.push(back, Some(load_scorer(&dp).unwrap()));
    }

    for task in &tasks[..3] {
        let preds = state.predict_batch(task.test.inputs(), None).unwrap();
        let own = preds.iter().filter(|p| p.membership.argmax() == task.task_id).count();
        assert!(
            own * 10 >= preds.len() * 8,
            "task {}: own task chosen {own}/{}",
            task.task_id,
            preds.len()
        );
        for p in &preds {
            assert!((p.fused.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.membership.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn split_tasks_use_even_odd_labels() {
    for task in tasks() {
        let (lo, hi) = (2 * task.task_id as u8, 2 * task.task_id as u8 + 1);
        for (d, &y) in task.train.digits().iter().zip(task.train.labels()) {
            assert!(*d == lo || *d == hi);
            assert_eq!(y, (*d % 2) as usize);
        }
    }
}
