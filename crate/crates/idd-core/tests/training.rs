//! End-to-end training behavior at miniature scale: determinism, toggle
//! exactness, frozen-teacher invariance, gradient flow, and abort paths.

use idd_core::data::{generate_dataset, DatasetSpec, Split};
use idd_core::losses::{cross_entropy_with_grad, LossWeights};
use idd_core::models::{build_model, image_to_map, ModelSpec};
use idd_core::position::{pretrain_position_head, PosPretrainConfig};
use idd_core::trainer::{
    distill_student, run_ablation, train_supervised, TrainConfig,
};
use idd_core::Error;

fn tiny_dataset() -> (DatasetSpec, Vec<idd_core::data::Sample>, Vec<idd_core::data::Sample>) {
    let spec = DatasetSpec {
        num_classes: 6,
        height: 32,
        width: 32,
        train_count: 16,
        val_count: 4,
        seed: 11,
        ignore_fraction: 0.05,
    };
    let train = generate_dataset(&spec, Split::Train).unwrap();
    let val = generate_dataset(&spec, Split::Val).unwrap();
    (spec, train, val)
}

fn tiny_config(iters: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_size: 4,
        eval_every: iters.max(2) / 2,
        seed,
        weights: LossWeights::all_off(),
        ..TrainConfig::default()
    }
}

#[test]
fn supervised_training_is_deterministic_and_loss_decreases() {
    let (_, train, val) = tiny_dataset();
    let spec = ModelSpec::student_default(6);
    let cfg = tiny_config(60, 3);
    let a = train_supervised(&spec, &cfg, &train, &val, None).unwrap();
    let b = train_supervised(&spec, &cfg, &train, &val, None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.record.entries).unwrap(),
        serde_json::to_string(&b.record.entries).unwrap()
    );
    assert_eq!(a.record.final_val_miou, b.record.final_val_miou);
    assert_eq!(a.model.flatten_params(), b.model.flatten_params());

    let first = a.record.entries.first().unwrap().loss.total;
    let last = a.record.entries.last().unwrap().loss.total;
    assert!(last < first, "smoothed loss did not decrease: {first} -> {last}");
}

#[test]
fn all_off_distillation_equals_plain_training() {
    let (_, train, val) = tiny_dataset();
    let student = ModelSpec::student_default(6);
    let cfg = tiny_config(40, 9);

    let mut teacher = build_model(&ModelSpec::teacher_default(6), 77).unwrap();
    teacher.frozen = true;

    let plain = train_supervised(&student, &cfg, &train, &val, None).unwrap();
    let distilled = distill_student(&student, &cfg, &train, &val, &teacher, None, None).unwrap();
    assert_eq!(
        serde_json::to_string(&plain.record.entries).unwrap(),
        serde_json::to_string(&distilled.record.entries).unwrap()
    );
    assert_eq!(
        plain.model.flatten_params(),
        distilled.model.flatten_params()
    );
}

#[test]
fn distillation_with_all_terms_runs_and_keeps_teacher_intact() {
    let (_, train, val) = tiny_dataset();
    let student = ModelSpec::student_default(6);

    let teacher_cfg = tiny_config(30, 5);
    let teacher = train_supervised(
        &ModelSpec::teacher_default(6),
        &teacher_cfg,
        &train,
        &val,
        None,
    )
    .unwrap()
    .model;
    assert!(teacher.frozen);

    let (head, _) = pretrain_position_head(
        &teacher,
        &train,
        &val,
        &PosPretrainConfig {
            iters: 10,
            ..PosPretrainConfig::default()
        },
    )
    .unwrap();

    let cfg = TrainConfig {
        weights: LossWeights {
            affinity_grid: 8,
            ..LossWeights::default()
        },
        ..tiny_config(30, 21)
    };
    let before = teacher.flatten_params();
    let outcome =
        distill_student(&student, &cfg, &train, &val, &teacher, Some(&head), None).unwrap();
    assert_eq!(before, teacher.flatten_params(), "teacher parameters moved");
    assert!(outcome.student_head.is_some());
    assert!(outcome.record.final_val_miou.is_finite());
    for e in &outcome.record.entries {
        assert!(e.loss.total.is_finite());
        // decomposition contract on logged means
        let w = &cfg.weights;
        let recomposed = e.loss.l_tar
            + e.loss.l_skd
            + w.lambda1 * e.loss.l_cw
            + w.lambda2 * e.loss.l_id
            + w.lambda3 * e.loss.l_pi;
        assert_eq!(recomposed, e.loss.total);
    }
}

#[test]
fn position_term_requires_teacher_head() {
    let (_, train, val) = tiny_dataset();
    let student = ModelSpec::student_default(6);
    let mut teacher = build_model(&ModelSpec::teacher_default(6), 1).unwrap();
    teacher.frozen = true;
    let cfg = TrainConfig {
        weights: LossWeights::default(), // enable_pi = true
        ..tiny_config(10, 2)
    };
    let err = distill_student(&student, &cfg, &train, &val, &teacher, None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("position"));
}

#[test]
fn unfrozen_teacher_is_rejected() {
    let (_, train, val) = tiny_dataset();
    let student = ModelSpec::student_default(6);
    let teacher = build_model(&ModelSpec::teacher_default(6), 1).unwrap();
    let cfg = TrainConfig {
        weights: LossWeights::preset("skd").unwrap(),
        ..tiny_config(10, 2)
    };
    assert!(distill_student(&student, &cfg, &train, &val, &teacher, None, None).is_err());
}

#[test]
fn runaway_learning_rate_aborts_with_diagnostic() {
    let (_, train, val) = tiny_dataset();
    let spec = ModelSpec::student_default(6);
    let cfg = TrainConfig {
        base_lr: 1e14,
        ..tiny_config(20, 4)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train_supervised(&spec, &cfg, &train, &val, Some(dir.path())).unwrap_err();
    match err {
        Error::TrainAborted { reason, .. } => {
            assert!(reason.contains("snapshot"), "reason: {reason}");
            assert!(dir.path().join("nan_snapshot.json").exists());
        }
        other => panic!("expected TrainAborted, got {other}"),
    }
}

#[test]
fn every_parameter_receives_gradient_from_target_loss() {
    let (_, train, _) = tiny_dataset();
    for spec in [ModelSpec::student_default(6), ModelSpec::teacher_default(6)] {
        let model = build_model(&spec, 13).unwrap();
        let mut grads = vec![0.0f64; model.total_param_count()];
        for sample in train.iter().take(6) {
            let x = image_to_map(&sample.image);
            let (out, cache) = model.forward_train(&x).unwrap();
            let (_, dlogits) = cross_entropy_with_grad(&out.logits, &sample.labels).unwrap();
            let dfeat = ndarray::Array2::zeros(out.features.data.raw_dim());
            model.backward(&cache, &dfeat, &dlogits, &mut grads);
        }
        // check per-parameter-block: every conv weight and bias span must
        // carry signal somewhere
        let mut at = 0usize;
        let mut m = build_model(&spec, 13).unwrap();
        let mut block = 0usize;
        m.for_each_param_slice_mut(|slice| {
            let span = &grads[at..at + slice.len()];
            assert!(
                span.iter().any(|&g| g != 0.0),
                "parameter block {block} ({:?}) got no gradient",
                spec.role
            );
            at += slice.len();
            block += 1;
        });
    }
}

#[test]
fn eval_boundary_checkpoints_are_written() {
    let (_, train, val) = tiny_dataset();
    let spec = ModelSpec::student_default(6);
    let cfg = tiny_config(20, 8);
    let dir = tempfile::tempdir().unwrap();
    train_supervised(&spec, &cfg, &train, &val, Some(dir.path())).unwrap();
    assert!(dir.path().join("checkpoint_latest.ckpt").exists());
    assert!(dir.path().join("steps.jsonl").exists());
    assert!(dir.path().join("run.log.jsonl").exists());
    let steps = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 20);
    // per-step decomposition contract on the logged values
    for line in steps.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let l = &v["loss"];
        let total = l["total"].as_f64().unwrap();
        let recomposed = l["l_tar"].as_f64().unwrap()
            + l["l_skd"].as_f64().unwrap()
            + cfg.weights.lambda1 * l["l_cw"].as_f64().unwrap()
            + cfg.weights.lambda2 * l["l_id"].as_f64().unwrap()
            + cfg.weights.lambda3 * l["l_pi"].as_f64().unwrap();
        assert_eq!(total, recomposed);
    }
}

#[test]
fn ablation_emits_six_rows_plus_teacher_with_matching_flags() {
    let (_, train, val) = tiny_dataset();
    let student = ModelSpec::student_default(6);
    let teacher = train_supervised(
        &ModelSpec::teacher_default(6),
        &tiny_config(20, 5),
        &train,
        &val,
        None,
    )
    .unwrap()
    .model;
    let (head, _) = pretrain_position_head(
        &teacher,
        &train,
        &val,
        &PosPretrainConfig {
            iters: 5,
            ..PosPretrainConfig::default()
        },
    )
    .unwrap();

    let base = tiny_config(8, 1);
    let table = run_ablation(
        &student,
        &base,
        &train,
        &val,
        &teacher,
        Some(&head),
        &[1, 2],
        None,
    )
    .unwrap();

    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.teacher.name, "teacher");
    let flags: Vec<[bool; 4]> = table
        .rows
        .iter()
        .map(|r| [r.skd, r.cw, r.id, r.pi])
        .collect();
    assert_eq!(
        flags,
        vec![
            [false, false, false, false],
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, false, true],
            [true, true, true, true],
        ]
    );
    assert_eq!(table.per_seed.len(), 2);
    for st in &table.per_seed {
        assert_eq!(st.rows.len(), 6);
    }
    // mean rows really are the seed means
    for (i, row) in table.rows.iter().enumerate() {
        let mean: f64 = table.per_seed.iter().map(|s| s.rows[i].miou).sum::<f64>() / 2.0;
        assert!((row.miou - mean).abs() < 1e-12);
    }
}
