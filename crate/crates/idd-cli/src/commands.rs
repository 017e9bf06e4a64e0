//! The six CLI commands: dataset generation, teacher training, position
//! head pretraining, distillation, evaluation, and the ablation runner.
//!
//! Every command resolves its full configuration, writes `manifest.toml`
//! into the output directory before doing any work, and never mutates its
//! input artifacts. Re-running a command from its manifest reproduces the
//! run bit-for-bit.

use std::path::Path;

use anyhow::{bail, Context, Result};

use idd_core::checkpoint::{
    load_head_checkpoint, load_model_checkpoint, save_head_checkpoint, save_model_checkpoint,
};
use idd_core::data::{generate_dataset, load_dataset, save_dataset, Split, StoredDataset};
use idd_core::metrics::{evaluate_model, mean_interclass_distance, MetricsReport};
use idd_core::models::{Role, SegNet};
use idd_core::position::{pretrain_position_head, PositionHead};
use idd_core::trainer::{
    distill_student, run_ablation, train_supervised, AblationTable, RunRecord,
};

use crate::config::{guard_output_dir, write_manifest, RunConfig};
use crate::plot;

fn dataset_paths(cfg: &RunConfig) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        cfg.inputs.dataset_dir.join("train.idds"),
        cfg.inputs.dataset_dir.join("val.idds"),
    )
}

fn load_dataset_pair(cfg: &RunConfig) -> Result<(StoredDataset, StoredDataset)> {
    let (train_path, val_path) = dataset_paths(cfg);
    let train = load_dataset(&train_path)
        .with_context(|| format!("loading training split {}", train_path.display()))?;
    let val = load_dataset(&val_path)
        .with_context(|| format!("loading validation split {}", val_path.display()))?;
    for stored in [&train, &val] {
        stored
            .spec
            .expect_num_classes(cfg.dataset.num_classes)
            .context("dataset class count differs from the configured one")?;
        if (stored.spec.height, stored.spec.width) != (cfg.dataset.height, cfg.dataset.width) {
            bail!(
                "dataset resolution {}x{} differs from configured {}x{}",
                stored.spec.height,
                stored.spec.width,
                cfg.dataset.height,
                cfg.dataset.width
            );
        }
    }
    Ok((train, val))
}

fn load_frozen_teacher(cfg: &RunConfig) -> Result<SegNet> {
    let path = &cfg.inputs.teacher_checkpoint;
    let (mut teacher, _) = load_model_checkpoint(path)
        .with_context(|| format!("loading teacher checkpoint {}", path.display()))?;
    if teacher.spec.num_classes != cfg.dataset.num_classes {
        bail!(
            "teacher checkpoint has {} classes but the dataset has {}",
            teacher.spec.num_classes,
            cfg.dataset.num_classes
        );
    }
    teacher.frozen = true;
    Ok(teacher)
}

fn load_frozen_head(cfg: &RunConfig) -> Result<PositionHead> {
    let path = &cfg.inputs.teacher_poshead;
    let (mut head, _) = load_head_checkpoint(path)
        .with_context(|| format!("loading teacher position head {}", path.display()))?;
    head.frozen = true;
    Ok(head)
}

fn write_summary(out: &Path, record: &RunRecord) -> Result<()> {
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(record)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Generates and stores both dataset splits.
pub fn cmd_gen_data(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("gen-data".into());
    cfg.dataset
        .validate()
        .context("invalid dataset specification")?;
    write_manifest(&cfg, out)?;

    let train = generate_dataset(&cfg.dataset, Split::Train)?;
    let val = generate_dataset(&cfg.dataset, Split::Val)?;
    let train_path = out.join("train.idds");
    let val_path = out.join("val.idds");
    save_dataset(&cfg.dataset, Split::Train, &train, &train_path)?;
    save_dataset(&cfg.dataset, Split::Val, &val, &val_path)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train.len(),
        val_path.display(),
        val.len()
    );
    Ok(())
}

/// Trains the teacher on the target loss alone.
pub fn cmd_train_teacher(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("train-teacher".into());
    write_manifest(&cfg, out)?;

    let (train, val) = load_dataset_pair(&cfg)?;
    let spec = cfg
        .teacher
        .to_model_spec(Role::Teacher, cfg.dataset.num_classes);
    let outcome = train_supervised(
        &spec,
        &cfg.to_train_config(),
        &train.samples,
        &val.samples,
        Some(out),
    )?;
    save_model_checkpoint(
        &outcome.model,
        outcome.record.config.total_iters as u64,
        out.join("teacher.ckpt"),
    )?;
    write_summary(out, &outcome.record)?;
    println!(
        "teacher trained: val mIoU {:.4}, {} params",
        outcome.record.final_val_miou, outcome.record.params
    );
    Ok(())
}

/// Pretrains the teacher's position head on frozen teacher features.
pub fn cmd_pretrain_poshead(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("pretrain-poshead".into());
    write_manifest(&cfg, out)?;

    let (train, val) = load_dataset_pair(&cfg)?;
    let teacher = load_frozen_teacher(&cfg)?;
    let (head, stats) = pretrain_position_head(
        &teacher,
        &train.samples,
        &val.samples,
        &cfg.poshead.to_core(),
    )?;
    save_head_checkpoint(&head, cfg.poshead.iters as u64, out.join("teacher_poshead.ckpt"))?;
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&stats)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "position head pretrained: val MSE {:.6} -> {:.6}, mean mask correlation {:.4}",
        stats.initial_val_mse, stats.final_val_mse, stats.mean_corr
    );
    Ok(())
}

/// Distills a student against the stored teacher artifacts.
pub fn cmd_distill(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("distill".into());
    write_manifest(&cfg, out)?;

    let (train, val) = load_dataset_pair(&cfg)?;
    let any_term = cfg.loss.enable_skd || cfg.loss.enable_cw || cfg.loss.enable_id || cfg.loss.enable_pi;
    let teacher = if any_term {
        Some(load_frozen_teacher(&cfg)?)
    } else {
        None
    };
    let head = if cfg.loss.enable_pi {
        Some(load_frozen_head(&cfg)?)
    } else {
        None
    };
    let spec = cfg
        .student
        .to_model_spec(Role::Student, cfg.dataset.num_classes);
    let train_cfg = cfg.to_train_config();
    let outcome = match &teacher {
        Some(t) => distill_student(
            &spec,
            &train_cfg,
            &train.samples,
            &val.samples,
            t,
            head.as_ref(),
            Some(out),
        )?,
        None => train_supervised(&spec, &train_cfg, &train.samples, &val.samples, Some(out))?,
    };
    save_model_checkpoint(
        &outcome.model,
        train_cfg.total_iters as u64,
        out.join("student.ckpt"),
    )?;
    if let Some(h) = &outcome.student_head {
        save_head_checkpoint(h, train_cfg.total_iters as u64, out.join("student_poshead.ckpt"))?;
    }
    write_summary(out, &outcome.record)?;
    println!(
        "student distilled ({}): val mIoU {:.4}, {} params",
        cfg.preset.as_deref().unwrap_or("custom"),
        outcome.record.final_val_miou,
        outcome.record.params
    );
    Ok(())
}

/// Evaluates a checkpoint and writes the metrics report.
pub fn cmd_evaluate(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("evaluate".into());
    write_manifest(&cfg, out)?;

    let (train, val) = load_dataset_pair(&cfg)?;
    let path = &cfg.inputs.eval_checkpoint;
    let (mut model, _) = load_model_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.spec.num_classes != cfg.dataset.num_classes {
        bail!(
            "checkpoint has {} classes but the dataset has {}",
            model.spec.num_classes,
            cfg.dataset.num_classes
        );
    }
    model.frozen = true;

    let splits: Vec<(&str, &StoredDataset)> = match cfg.eval.split.as_str() {
        "val" => vec![("val", &val)],
        "train" => vec![("train", &train)],
        "both" => vec![("train", &train), ("val", &val)],
        other => bail!("eval split must be 'val', 'train', or 'both', got '{other}'"),
    };

    let n = cfg.dataset.num_classes;
    let mut reports = serde_json::Map::new();
    let mut last: Option<MetricsReport> = None;
    for (name, stored) in &splits {
        let iou = evaluate_model(&model, &stored.samples, n)?;
        let dist = mean_interclass_distance(&model, &stored.samples, n)?;
        let report = MetricsReport {
            per_class_iou: iou.per_class_iou,
            miou: iou.miou,
            params: model.total_param_count(),
            mean_interclass_distance: dist,
        };
        reports.insert((*name).to_string(), serde_json::to_value(&report)?);
        last = Some(report);
    }
    let report_path = out.join("report.json");
    let doc = if splits.len() == 1 {
        reports.values().next().expect("one split").clone()
    } else {
        serde_json::Value::Object(reports)
    };
    std::fs::write(&report_path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let report = last.expect("at least one split");
    let labels: Vec<String> = (0..n).map(|c| format!("class {c}")).collect();
    let values: Vec<f64> = report
        .per_class_iou
        .iter()
        .map(|v| v.unwrap_or(0.0))
        .collect();
    plot::bar_chart(
        &labels,
        &values,
        "per-class IoU",
        &out.join("per_class_iou.svg"),
    )?;
    // the contract: mIoU is the final stdout line
    println!("{:.6}", report.miou);
    Ok(())
}

fn render_ablation_text(table: &AblationTable) -> String {
    let mut s = String::new();
    s.push_str("backbone      skd  cw   id   pi   miou     params\n");
    let mark = |b: bool| if b { "x" } else { " " };
    let mut row_line = |name: &str, skd, cw, id, pi, miou: f64, params: usize| {
        s.push_str(&format!(
            "{name:<13} {:<4} {:<4} {:<4} {:<4} {miou:<8.4} {params}\n",
            mark(skd),
            mark(cw),
            mark(id),
            mark(pi)
        ));
    };
    row_line(
        &table.teacher.name,
        table.teacher.skd,
        table.teacher.cw,
        table.teacher.id,
        table.teacher.pi,
        table.teacher.miou,
        table.teacher.params,
    );
    for r in &table.rows {
        row_line(&r.name, r.skd, r.cw, r.id, r.pi, r.miou, r.params);
    }
    s
}

/// Runs the six-row ablation and writes table + plot artifacts.
pub fn cmd_ablate(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    guard_output_dir(out, force)?;
    cfg.command = Some("ablate".into());
    write_manifest(&cfg, out)?;

    let (train, val) = load_dataset_pair(&cfg)?;
    let teacher = load_frozen_teacher(&cfg)?;
    let head = load_frozen_head(&cfg)?;
    let student_spec = cfg
        .student
        .to_model_spec(Role::Student, cfg.dataset.num_classes);
    let seeds: Vec<u64> = (0..cfg.seeds.max(1) as u64)
        .map(|k| cfg.train.seed + k)
        .collect();
    let table = run_ablation(
        &student_spec,
        &cfg.to_train_config(),
        &train.samples,
        &val.samples,
        &teacher,
        Some(&head),
        &seeds,
        Some(out),
    )?;

    let json_path = out.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let text = render_ablation_text(&table);
    std::fs::write(out.join("ablation.txt"), &text).context("writing ablation.txt")?;

    // training curves per row from the per-row eval logs
    let mut series = Vec::new();
    for row in &table.rows {
        for &seed in seeds.iter() {
            let log = out
                .join("rows")
                .join(format!("{}-seed{}", row.name, seed))
                .join("run.log.jsonl");
            if let Ok(content) = std::fs::read_to_string(&log) {
                let pts: Vec<(f64, f64)> = content
                    .lines()
                    .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
                    .filter_map(|v| {
                        Some((v["iter"].as_f64()?, v["val_miou"].as_f64()?))
                    })
                    .collect();
                series.push((format!("{}-s{}", row.name, seed), pts));
            }
        }
    }
    plot::line_chart(&series, "validation mIoU", &out.join("ablation.svg"))?;

    print!("{text}");
    Ok(())
}
