//! SGD training: supervised pretraining, distillation, the polynomial
//! learning-rate schedule, and the ablation runner.
//!
//! One engine drives both plain supervised runs and distillation; with all
//! distillation terms disabled the engine never touches the teacher, so an
//! all-off distillation run is bit-identical to supervised training with
//! the same seed. Batch work is parallelized per sample but every
//! reduction happens sequentially in sample order, which keeps runs
//! reproducible at the bit level independent of thread count.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_head_checkpoint, save_model_checkpoint};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::interclass::{
    interclass_distance_loss, compute_distance_graph, scatter_token_gradients, token_gradients,
    TokenAccumulator,
};
use crate::losses::{
    channelwise_kd_with_grad, cross_entropy_with_grad, pairwise_affinity_with_grad,
    pixelwise_kd_with_grad, position_reference_masks, LossBreakdown, LossWeights, PiTarget,
};
use crate::metrics::evaluate_model;
use crate::models::{build_model, image_to_map, ForwardOutput, ModelSpec, SegNet, SegNetCache};
use crate::nn::FeatureMap;
use crate::position::{position_info_loss_with_grad, make_scaled_targets, PositionHead, PositionMasks};
use crate::rng::{stream_rng, tags};

/// Optimization hyperparameters and the loss configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub eval_every: usize,
    /// Hidden width of the student position head trained during
    /// distillation (only used when the position term is enabled).
    pub pos_head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 4000,
            batch_size: 8,
            base_lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 1,
            weights: LossWeights::default(),
            eval_every: 500,
            pos_head_hidden: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.lr_power < 0.0 {
            return Err(Error::Config("lr_power must be nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.pos_head_hidden == 0 {
            return Err(Error::Config("pos_head_hidden must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Polynomial decay: `base_lr * (1 - iter/total_iters)^power`.
pub fn poly_lr(iter: usize, config: &TrainConfig) -> Result<f64> {
    if iter > config.total_iters {
        return Err(Error::Config(format!(
            "iteration {} beyond schedule end {}",
            iter, config.total_iters
        )));
    }
    let frac = 1.0 - iter as f64 / config.total_iters as f64;
    Ok(config.base_lr * frac.powf(config.lr_power))
}

/// One per-evaluation record; these lines form the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub iter: usize,
    pub lr: f64,
    /// Field-wise mean of the per-step breakdowns since the last eval.
    pub loss: LossBreakdown,
    pub val_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Full account of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub model_spec: ModelSpec,
    pub config: TrainConfig,
    pub entries: Vec<EvalEntry>,
    pub final_val_miou: f64,
    pub params: usize,
    pub degenerate_graph_steps: u64,
    pub degenerate_target_steps: u64,
    pub zero_vector_rows: u64,
    /// Wall-clock seconds; excluded from the deterministic metric logs.
    pub wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct StepRecord<'a> {
    iter: usize,
    lr: f64,
    loss: &'a LossBreakdown,
}

/// Frozen teacher artifacts for distillation.
#[derive(Debug)]
pub struct DistillContext<'a> {
    pub teacher: &'a SegNet,
    pub teacher_head: Option<&'a PositionHead>,
}

/// Result of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SegNet,
    /// Student position head, present when the position term was enabled.
    pub student_head: Option<PositionHead>,
    pub record: RunRecord,
}

struct LogSink {
    steps: Option<std::io::BufWriter<std::fs::File>>,
    evals: Option<std::io::BufWriter<std::fs::File>>,
    dir: Option<PathBuf>,
}

impl LogSink {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let open = |path: &Path| -> Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(
                std::fs::File::create(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
            ))
        };
        match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
                Ok(LogSink {
                    steps: Some(open(&d.join("steps.jsonl"))?),
                    evals: Some(open(&d.join("run.log.jsonl"))?),
                    dir: Some(d.to_path_buf()),
                })
            }
            None => Ok(LogSink {
                steps: None,
                evals: None,
                dir: None,
            }),
        }
    }

    fn log_step(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = self.steps.as_mut() {
            serde_json::to_writer(&mut *w, rec)
                .map_err(|e| Error::Config(format!("step log encode: {e}")))?;
            writeln!(w).map_err(|e| Error::io("steps.jsonl", e))?;
        }
        Ok(())
    }

    fn log_eval(&mut self, entry: &EvalEntry) -> Result<()> {
        if let Some(w) = self.evals.as_mut() {
            serde_json::to_writer(&mut *w, entry)
                .map_err(|e| Error::Config(format!("eval log encode: {e}")))?;
            writeln!(w).map_err(|e| Error::io("run.log.jsonl", e))?;
        }
        Ok(())
    }

    fn checkpoint(
        &mut self,
        model: &SegNet,
        head: Option<&PositionHead>,
        iteration: u64,
    ) -> Result<()> {
        if let Some(d) = &self.dir {
            save_model_checkpoint(model, iteration, d.join("checkpoint_latest.ckpt"))?;
            if let Some(h) = head {
                save_head_checkpoint(h, iteration, d.join("poshead_latest.ckpt"))?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.steps.as_mut() {
            w.flush().map_err(|e| Error::io("steps.jsonl", e))?;
        }
        if let Some(w) = self.evals.as_mut() {
            w.flush().map_err(|e| Error::io("run.log.jsonl", e))?;
        }
        Ok(())
    }
}

fn sgd_update_with<F: FnOnce(&mut dyn FnMut(&mut [f64]))>(
    visit: F,
    grads: &[f64],
    momentum: &mut [f64],
    lr: f64,
    mu: f64,
    wd: f64,
) {
    let mut at = 0usize;
    let mut step = |slice: &mut [f64]| {
        for v in slice.iter_mut() {
            let g = grads[at] + wd * *v;
            momentum[at] = mu * momentum[at] + g;
            *v -= lr * momentum[at];
            at += 1;
        }
    };
    visit(&mut step);
}

/// Per-sample results of the parallel phase of one step.
struct SampleWork {
    idx: usize,
    cache: SegNetCache,
    student_features: FeatureMap,
    teacher_features: Option<FeatureMap>,
    dlogits: Array2<f64>,
    dfeatures: Array2<f64>,
    head_grads: Vec<f64>,
    l_tar: f64,
    l_skd: f64,
    l_cw: f64,
    l_pi: f64,
    zero_vectors: usize,
    degenerate_target: bool,
}

/// The shared training engine. `distill` carries the frozen teacher
/// artifacts; when every distillation term is disabled the teacher is
/// never evaluated and the run is identical to plain supervised training.
pub fn run_training(
    model_spec: &ModelSpec,
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    distill: Option<DistillContext<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate()?;
    model_spec.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let w = &config.weights;
    let any_distill = w.enable_skd || w.enable_cw || w.enable_id || w.enable_pi;
    if any_distill && distill.is_none() {
        return Err(Error::Config(
            "distillation terms enabled but no teacher was provided".into(),
        ));
    }
    let ctx = distill.as_ref();
    if let Some(ctx) = ctx {
        if any_distill && !ctx.teacher.frozen {
            return Err(Error::Config("teacher must be frozen for distillation".into()));
        }
        if w.enable_pi {
            match ctx.teacher_head {
                None => {
                    return Err(Error::Config(
                        "position loss enabled but no teacher position head was provided".into(),
                    ))
                }
                Some(h) if !h.frozen => {
                    return Err(Error::Config("teacher position head must be frozen".into()))
                }
                _ => {}
            }
        }
        if ctx.teacher.spec.num_classes != model_spec.num_classes {
            return Err(Error::Config(format!(
                "teacher has {} classes, student spec has {}",
                ctx.teacher.spec.num_classes, model_spec.num_classes
            )));
        }
    }

    let n = model_spec.num_classes;
    let (img_h, img_w) = {
        let (_, h, wdt) = train[0].image.dim();
        (h, wdt)
    };
    let mut model = build_model(model_spec, config.seed)?;
    let mut model_momentum = vec![0.0f64; model.total_param_count()];

    let mut student_head = if w.enable_pi {
        Some(PositionHead::new(
            model_spec.feature_dim,
            config.pos_head_hidden,
            config.seed,
        ))
    } else {
        None
    };
    let mut head_momentum = student_head
        .as_ref()
        .map(|h| vec![0.0f64; h.param_count()])
        .unwrap_or_default();
    let analytic_reference = if w.enable_pi && w.pi_target == PiTarget::Analytic {
        Some(make_scaled_targets(img_h, img_w)?)
    } else {
        None
    };

    // Teacher backbone outputs are constant across the run; compute them
    // once at low resolution and finalize per use (bit-identical to a full
    // teacher forward).
    let teacher_low: Vec<FeatureMap> = if any_distill {
        let teacher = ctx.expect("checked").teacher;
        train
            .par_iter()
            .map(|s| teacher.forward_backbone(&image_to_map(&s.image)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut sink = LogSink::new(out_dir)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = stream_rng(config.seed, tags::BATCH_ORDER);
    let mut cursor = order.len(); // trigger initial shuffle

    let mut entries: Vec<EvalEntry> = Vec::new();
    let mut window: Vec<LossBreakdown> = Vec::new();
    let mut degenerate_graph_steps = 0u64;
    let mut degenerate_target_steps = 0u64;
    let mut zero_vector_rows = 0u64;

    for iter in 0..config.total_iters {
        let lr = poly_lr(iter, config)?;
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let inv_b = 1.0 / config.batch_size as f64;
        // Phase A: per-sample forward passes and separable loss gradients.
        let mut works: Vec<SampleWork> = batch
            .par_iter()
            .map(|&idx| -> Result<SampleWork> {
                let sample = &train[idx];
                let x = image_to_map(&sample.image);
                let labels = &sample.labels;
                let (out_s, cache) = model.forward_train(&x)?;

                let teacher_out: Option<ForwardOutput> = if any_distill {
                    let teacher = ctx.expect("checked").teacher;
                    Some(teacher.finalize(&teacher_low[idx], img_h, img_w)?)
                } else {
                    None
                };

                let mut dlogits = Array2::<f64>::zeros(out_s.logits.data.raw_dim());
                let mut dfeatures = Array2::<f64>::zeros(out_s.features.data.raw_dim());
                let (ce, ce_grad) = cross_entropy_with_grad(&out_s.logits, labels)?;
                dlogits.scaled_add(inv_b, &ce_grad);

                let mut l_skd = 0.0;
                let mut l_cw = 0.0;
                let mut l_pi = 0.0;
                let mut zero_vectors = 0usize;
                let mut head_grads = Vec::new();

                if w.enable_skd {
                    let to = teacher_out.as_ref().expect("distill");
                    let (pk, g) =
                        pixelwise_kd_with_grad(&to.logits, &out_s.logits, w.tau_pixel)?;
                    dlogits.scaled_add(inv_b, &g);
                    let (pa, gf) = pairwise_affinity_with_grad(
                        &to.features,
                        &out_s.features,
                        w.affinity_grid,
                    )?;
                    dfeatures.scaled_add(inv_b, &gf.data);
                    l_skd = pk + pa;
                }
                if w.enable_cw {
                    let to = teacher_out.as_ref().expect("distill");
                    let (cw, g) =
                        channelwise_kd_with_grad(&to.logits, &out_s.logits, w.tau_channel)?;
                    dlogits.scaled_add(w.lambda1 * inv_b, &g);
                    l_cw = cw;
                }
                if w.enable_pi {
                    let head = student_head.as_ref().expect("enable_pi");
                    let (masks_s, head_cache) = head.forward_cached(&out_s.features)?;
                    let reference = position_reference_masks(
                        w,
                        ctx.expect("checked").teacher_head.expect("checked"),
                        teacher_out.as_ref().expect("distill"),
                        analytic_reference.as_ref(),
                    )?;
                    let (pi, gmask) = position_info_loss_with_grad(&reference, &masks_s)?;
                    let scaled = PositionMasks {
                        p_hor: gmask.p_hor.mapv(|v| v * w.lambda3 * inv_b),
                        p_ver: gmask.p_ver.mapv(|v| v * w.lambda3 * inv_b),
                    };
                    head_grads = vec![0.0f64; head.param_count()];
                    let dfeat_head = head.backward(&head_cache, &scaled, &mut head_grads);
                    dfeatures += &dfeat_head.data;
                    l_pi = pi.value;
                    zero_vectors = pi.zero_vectors;
                }

                Ok(SampleWork {
                    idx,
                    cache,
                    student_features: out_s.features,
                    teacher_features: if w.enable_id {
                        teacher_out.map(|t| t.features)
                    } else {
                        None
                    },
                    dlogits,
                    dfeatures,
                    head_grads,
                    l_tar: ce.value,
                    l_skd,
                    l_cw,
                    l_pi,
                    zero_vectors,
                    degenerate_target: ce.degenerate,
                })
            })
            .collect::<Result<_>>()?;

        // Phase B: batch-pooled inter-class distance term.
        let mut l_id = 0.0;
        if w.enable_id {
            let dim_t = works[0]
                .teacher_features
                .as_ref()
                .expect("enable_id")
                .channels();
            let mut acc_t = TokenAccumulator::new(n, dim_t);
            let mut acc_s = TokenAccumulator::new(n, model_spec.feature_dim);
            for work in &works {
                let labels = &train[work.idx].labels;
                acc_t.add(work.teacher_features.as_ref().expect("enable_id"), labels)?;
                acc_s.add(&work.student_features, labels)?;
            }
            let tokens_t = acc_t.finalize();
            let tokens_s = acc_s.finalize();
            let graph_t = compute_distance_graph(&tokens_t, n)?;
            let graph_s = compute_distance_graph(&tokens_s, n)?;
            let id = interclass_distance_loss(&graph_t, &graph_s)?;
            l_id = id.value;
            if id.degenerate {
                degenerate_graph_steps += 1;
            } else {
                let mut dtokens = token_gradients(&graph_t, &tokens_s, &graph_s)?;
                for g in dtokens.iter_mut().flatten() {
                    *g *= w.lambda2;
                }
                for work in works.iter_mut() {
                    let labels = &train[work.idx].labels;
                    let mut dmap = FeatureMap {
                        data: std::mem::take(&mut work.dfeatures),
                        h: img_h,
                        w: img_w,
                    };
                    scatter_token_gradients(&dtokens, &tokens_s.pixel_counts, labels, &mut dmap);
                    work.dfeatures = dmap.data;
                }
            }
        }

        // Phase C: backbone backward per sample, then ordered reduction.
        let grad_parts: Vec<Vec<f64>> = works
            .par_iter()
            .map(|work| {
                let mut grads = vec![0.0f64; model.total_param_count()];
                model.backward(&work.cache, &work.dfeatures, &work.dlogits, &mut grads);
                grads
            })
            .collect();
        let mut model_grads = vec![0.0f64; model.total_param_count()];
        for part in &grad_parts {
            for (a, b) in model_grads.iter_mut().zip(part) {
                *a += b;
            }
        }
        let mut head_grads_total = student_head
            .as_ref()
            .map(|h| vec![0.0f64; h.param_count()])
            .unwrap_or_default();
        let mut l_tar_sum = 0.0;
        let mut l_skd_sum = 0.0;
        let mut l_cw_sum = 0.0;
        let mut l_pi_sum = 0.0;
        for work in &works {
            l_tar_sum += work.l_tar;
            l_skd_sum += work.l_skd;
            l_cw_sum += work.l_cw;
            l_pi_sum += work.l_pi;
            zero_vector_rows += work.zero_vectors as u64;
            if work.degenerate_target {
                degenerate_target_steps += 1;
            }
            for (a, b) in head_grads_total.iter_mut().zip(&work.head_grads) {
                *a += b;
            }
        }
        let breakdown = LossBreakdown::from_parts(
            l_tar_sum * inv_b,
            l_skd_sum * inv_b,
            l_cw_sum * inv_b,
            l_id,
            l_pi_sum * inv_b,
            w,
        );
        if !breakdown.total.is_finite() {
            let reason = write_nan_snapshot(out_dir, iter, lr, &breakdown);
            sink.flush()?;
            return Err(Error::TrainAborted {
                iteration: iter,
                reason,
            });
        }

        sgd_update_with(
            |f| model.for_each_param_slice_mut(f),
            &model_grads,
            &mut model_momentum,
            lr,
            config.momentum,
            config.weight_decay,
        );
        if let Some(head) = student_head.as_mut() {
            sgd_update_with(
                |f| head.for_each_param_slice_mut(f),
                &head_grads_total,
                &mut head_momentum,
                lr,
                config.momentum,
                config.weight_decay,
            );
        }

        sink.log_step(&StepRecord {
            iter,
            lr,
            loss: &breakdown,
        })?;
        window.push(breakdown);

        let done = iter + 1 == config.total_iters;
        if (iter + 1) % config.eval_every == 0 || done {
            let report = evaluate_model(&model, val, n)?;
            let mean = mean_breakdown(&window, w);
            window.clear();
            let entry = EvalEntry {
                iter: iter + 1,
                lr,
                loss: mean,
                val_miou: report.miou,
                per_class_iou: report.per_class_iou,
            };
            sink.log_eval(&entry)?;
            sink.checkpoint(&model, student_head.as_ref(), (iter + 1) as u64)?;
            entries.push(entry);
        }
    }
    sink.flush()?;

    model.frozen = true;
    if let Some(h) = student_head.as_mut() {
        h.frozen = true;
    }
    let final_val_miou = entries.last().map(|e| e.val_miou).unwrap_or(0.0);
    let params = model.total_param_count();
    let record = RunRecord {
        model_spec: model_spec.clone(),
        config: config.clone(),
        entries,
        final_val_miou,
        params,
        degenerate_graph_steps,
        degenerate_target_steps,
        zero_vector_rows,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        student_head,
        record,
    })
}

fn mean_breakdown(window: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = window.len().max(1) as f64;
    let mut l_tar = 0.0;
    let mut l_skd = 0.0;
    let mut l_cw = 0.0;
    let mut l_id = 0.0;
    let mut l_pi = 0.0;
    for b in window {
        l_tar += b.l_tar;
        l_skd += b.l_skd;
        l_cw += b.l_cw;
        l_id += b.l_id;
        l_pi += b.l_pi;
    }
    LossBreakdown::from_parts(l_tar / n, l_skd / n, l_cw / n, l_id / n, l_pi / n, w)
}

fn write_nan_snapshot(
    out_dir: Option<&Path>,
    iteration: usize,
    lr: f64,
    breakdown: &LossBreakdown,
) -> String {
    let payload = serde_json::json!({
        "iteration": iteration,
        "lr": lr,
        "loss": breakdown,
    });
    match out_dir {
        Some(d) => {
            let path = d.join("nan_snapshot.json");
            let _ = std::fs::write(&path, serde_json::to_vec_pretty(&payload).unwrap_or_default());
            format!("non-finite loss; diagnostic snapshot at {}", path.display())
        }
        None => format!("non-finite loss; breakdown {payload}"),
    }
}

/// Supervised training on the target loss alone (the teacher-pretraining
/// path). Any distillation toggles in the config are ignored.
pub fn train_supervised(
    model_spec: &ModelSpec,
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        weights: LossWeights {
            // keep temperatures/grid for the record, disable every term
            enable_skd: false,
            enable_cw: false,
            enable_id: false,
            enable_pi: false,
            ..config.weights
        },
        ..config.clone()
    };
    run_training(model_spec, &cfg, train, val, None, out_dir)
}

/// Distills a student against a frozen teacher (and, when the position
/// term is enabled, its frozen position head).
pub fn distill_student(
    student_spec: &ModelSpec,
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    teacher: &SegNet,
    teacher_head: Option<&PositionHead>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run_training(
        student_spec,
        config,
        train,
        val,
        Some(DistillContext {
            teacher,
            teacher_head,
        }),
        out_dir,
    )
}

/// One ablation table row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub skd: bool,
    pub cw: bool,
    pub id: bool,
    pub pi: bool,
    pub miou: f64,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// The ablation artifact: one teacher row plus the six student term
/// combinations (seed-averaged), with per-seed tables archived.
#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub teacher: AblationRow,
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<SeedTable>,
}

/// Runs the six-configuration ablation over the given seeds. Rows write
/// their logs into `<out_dir>/rows/<preset>-seed<k>/` when a directory is
/// supplied.
pub fn run_ablation(
    student_spec: &ModelSpec,
    base_config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    teacher: &SegNet,
    teacher_head: Option<&PositionHead>,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let n = student_spec.num_classes;
    let teacher_report = evaluate_model(teacher, val, n)?;
    let teacher_row = AblationRow {
        name: "teacher".into(),
        skd: false,
        cw: false,
        id: false,
        pi: false,
        miou: teacher_report.miou,
        params: teacher.total_param_count(),
    };

    let mut per_seed: Vec<SeedTable> = seeds
        .iter()
        .map(|&seed| SeedTable {
            seed,
            rows: Vec::new(),
        })
        .collect();
    let mut mean_rows = Vec::new();
    for preset in LossWeights::preset_names() {
        let weights = LossWeights::preset(preset).expect("known preset");
        let mut miou_sum = 0.0;
        let mut params = 0usize;
        for (k, &seed) in seeds.iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                weights: LossWeights {
                    // keep tuned scalars from the base config
                    lambda1: base_config.weights.lambda1,
                    lambda2: base_config.weights.lambda2,
                    lambda3: base_config.weights.lambda3,
                    tau_pixel: base_config.weights.tau_pixel,
                    tau_channel: base_config.weights.tau_channel,
                    affinity_grid: base_config.weights.affinity_grid,
                    pi_target: base_config.weights.pi_target,
                    ..weights
                },
                ..base_config.clone()
            };
            let row_dir = out_dir.map(|d| d.join("rows").join(format!("{preset}-seed{seed}")));
            let outcome = distill_student(
                student_spec,
                &cfg,
                train,
                val,
                teacher,
                teacher_head,
                row_dir.as_deref(),
            )?;
            miou_sum += outcome.record.final_val_miou;
            params = outcome.record.params;
            per_seed[k].rows.push(AblationRow {
                name: preset.to_string(),
                skd: weights.enable_skd,
                cw: weights.enable_cw,
                id: weights.enable_id,
                pi: weights.enable_pi,
                miou: outcome.record.final_val_miou,
                params: outcome.record.params,
            });
        }
        mean_rows.push(AblationRow {
            name: preset.to_string(),
            skd: weights.enable_skd,
            cw: weights.enable_cw,
            id: weights.enable_id,
            pi: weights.enable_pi,
            miou: miou_sum / seeds.len() as f64,
            params,
        });
    }
    Ok(AblationTable {
        teacher: teacher_row,
        rows: mean_rows,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
        assert_eq!(poly_lr(cfg.total_iters, &cfg).unwrap(), 0.0);
        let linear = TrainConfig {
            lr_power: 1.0,
            total_iters: 100,
            ..TrainConfig::default()
        };
        assert!((poly_lr(50, &linear).unwrap() - 0.005).abs() < 1e-15);
        assert!(poly_lr(101, &linear).is_err());
    }

    #[test]
    fn poly_lr_is_monotonically_nonincreasing() {
        let cfg = TrainConfig {
            total_iters: 500,
            lr_power: 0.9,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for it in 0..=500 {
            let lr = poly_lr(it, &cfg).unwrap();
            assert!(lr <= prev + 1e-18, "lr increased at {it}");
            prev = lr;
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.base_lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.total_iters = 0;
        assert!(cfg.validate().is_err());
    }
}
