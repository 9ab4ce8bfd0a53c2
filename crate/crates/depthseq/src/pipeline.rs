//! Orchestration: the SGD training loop with early stopping,
//! cross-validated evaluation, single-volume inference, segment-label
//! assignment from landmarks, and the ablation harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hemisplit::HemisphereResult;
use crate::metrics::{
    self, ConfusionMatrix, LandmarkSet, MetricRow, MetricsReport, PredictionSet,
};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, DstModel, ModelConfig, ModelOutput, PaddingSide,
};
use crate::phantom::{FoldSplit, PhantomCase};
use crate::tensor::Sgd;
use crate::volume::{BinaryMask, LabelMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub padding_side: PaddingSide,
    pub attention_enabled: bool,
    pub manifest_path: PathBuf,
    pub fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 2e-3,
            momentum: 0.9,
            batch_size: 8,
            max_epochs: 60,
            patience: 8,
            seed: 0,
            padding_side: PaddingSide::Left,
            attention_enabled: true,
            manifest_path: PathBuf::new(),
            fold: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.patience < 1 || self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("patience/epochs/batch must be >= 1".into()));
        }
        self.effective_model().validate()
    }

    /// ModelConfig with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.padding_side = self.padding_side;
        m.attention_enabled = self.attention_enabled;
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub checkpoint_path: PathBuf,
    pub wall_seconds: f64,
}

fn batch_loss(model: &DstModel, out: &ModelOutput, batch: &[&PhantomCase]) -> Result<crate::tensor::Tensor> {
    let mut terms = Vec::new();
    if batch.iter().all(|c| !c.landmarks.is_empty()) {
        let truths: Vec<&LandmarkSet> = batch.iter().map(|c| &c.landmarks).collect();
        terms.push(metrics::loss_loc(
            &out.loc_logits_full,
            &truths,
            &out.slice_valid,
            out.first_valid,
        )?);
    }
    if batch.iter().all(|c| c.class_label.is_some()) {
        let labels: Vec<usize> = batch.iter().map(|c| c.class_label.unwrap() as usize).collect();
        terms.push(metrics::loss_cls(&out.cls_logits, &labels)?);
    }
    match terms.len() {
        0 => Err(Error::Argument(
            "cases carry neither landmarks nor class labels".into(),
        )),
        1 => Ok(terms.pop().unwrap()),
        _ => Ok(crate::tensor::ops::add(&terms[0], &terms[1])),
    }
    .and_then(|t| {
        let _ = model;
        Ok(t)
    })
}

/// Group case indices into batches of identical dims so each batch
/// shares one tensor shape.
fn batches(cases: &[&PhantomCase], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut open: Vec<((usize, usize, usize), Vec<usize>)> = Vec::new();
    for &i in order {
        let dims = cases[i].volume.dims;
        match open.iter_mut().find(|(d, _)| *d == dims) {
            Some((_, b)) => {
                b.push(i);
                if b.len() == batch_size {
                    out.push(std::mem::take(b));
                    open.retain(|(_, b)| !b.is_empty());
                }
            }
            None => open.push((dims, vec![i])),
        }
    }
    for (_, b) in open {
        if !b.is_empty() {
            out.push(b);
        }
    }
    out
}

fn forward_batch(model: &DstModel, batch: &[&PhantomCase], rng: Option<&mut ChaCha8Rng>) -> Result<ModelOutput> {
    let vols: Vec<&crate::volume::Volume> = batch.iter().map(|c| &c.volume).collect();
    let x = DstModel::volumes_to_input(&vols)?;
    model.forward(&x, rng)
}

/// Validation metric, lower is better: mean MAE for localization cases,
/// error rate for classification-only cases.
fn val_metric(model: &DstModel, cases: &[&PhantomCase]) -> Result<(f64, f64)> {
    let mut mae_sum = 0.0;
    let mut mae_n = 0usize;
    let mut cls_err = 0usize;
    let mut cls_n = 0usize;
    let mut loss_sum = 0.0;
    for chunk in cases.chunks(1) {
        let out = forward_batch(model, chunk, None)?;
        loss_sum += batch_loss(model, &out, chunk)?.scalar();
        let case = chunk[0];
        if !case.landmarks.is_empty() {
            let p = PredictionSet {
                probs: out.landmark_probs[0].clone(),
            };
            let pred = metrics::argmax_prediction(&p);
            mae_sum += metrics::mae(&pred, &case.landmarks)?;
            mae_n += 1;
        }
        if let Some(label) = case.class_label {
            let logits = out.cls_logits.values();
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            cls_n += 1;
            if best != label as usize {
                cls_err += 1;
            }
        }
    }
    let metric = if mae_n > 0 {
        mae_sum / mae_n as f64
    } else if cls_n > 0 {
        cls_err as f64 / cls_n as f64
    } else {
        return Err(Error::Argument("empty validation split".into()));
    };
    Ok((metric, loss_sum / cases.len() as f64))
}

fn select<'a>(cases: &'a [PhantomCase], ids: &[String]) -> Result<Vec<&'a PhantomCase>> {
    ids.iter()
        .map(|id| {
            cases
                .iter()
                .find(|c| &c.case_id == id)
                .ok_or_else(|| Error::Argument(format!("missing case {id}")))
        })
        .collect()
}

/// SGD with momentum, early stopping on the validation metric, best
/// checkpoint persisted; deterministic under a fixed seed.
pub fn train(
    cfg: &TrainConfig,
    cases: &[PhantomCase],
    split: &FoldSplit,
    ckpt_path: impl AsRef<Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let train_cases = select(cases, &split.train)?;
    let val_cases = select(cases, &split.val)?;
    if train_cases.is_empty() {
        return Err(Error::Argument("empty training split".into()));
    }
    if val_cases.is_empty() {
        return Err(Error::Argument("empty validation split".into()));
    }
    let model = DstModel::new(cfg.effective_model(), cfg.seed)?;
    let params = model.params.tensors();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x64726f70);

    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_mae: Vec::new(),
        best_epoch: 0,
        best_val_metric: f64::INFINITY,
        checkpoint_path: ckpt_path.as_ref().to_path_buf(),
        wall_seconds: 0.0,
    };
    let mut since_best = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in batches(&train_cases, &order, cfg.batch_size) {
            let batch: Vec<&PhantomCase> = batch_idx.iter().map(|&i| train_cases[i]).collect();
            let out = forward_batch(&model, &batch, Some(&mut dropout_rng))?;
            let loss = batch_loss(&model, &out, &batch)?;
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, value });
            }
            epoch_loss += value * batch.len() as f64;
            seen += batch.len();
            loss.backward()?;
            // heads outside the active loss (e.g. the classification
            // head during localization training) get zero gradients
            for p in &params {
                if p.grad().is_none() {
                    p.accum_grad(&vec![0.0; p.len()]);
                }
            }
            sgd.step(&params)?;
        }
        report.train_loss.push(epoch_loss / seen as f64);

        let (metric, vloss) = val_metric(&model, &val_cases)?;
        report.val_loss.push(vloss);
        report.val_mae.push(metric);
        if metric < report.best_val_metric {
            report.best_val_metric = metric;
            report.best_epoch = epoch;
            since_best = 0;
            save_checkpoint(
                &Checkpoint {
                    config: model.cfg.clone(),
                    seed: cfg.seed,
                    epoch,
                    val_metric: metric,
                    model: DstModel {
                        cfg: model.cfg.clone(),
                        params: clone_params(&model)?,
                    },
                },
                &ckpt_path,
            )?;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Snapshot of the current parameter values as a fresh model (so the
/// persisted checkpoint is not mutated by further training).
fn clone_params(model: &DstModel) -> Result<crate::model::DstParams> {
    let copy = DstModel::new(model.cfg.clone(), 0)?;
    for ((_, src), (_, dst)) in model.params.named().iter().zip(copy.params.named().iter()) {
        dst.set_values(&src.values());
    }
    Ok(copy.params)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub landmark: usize,
    pub z_true: usize,
    pub z_pred: usize,
    pub abs_err: usize,
    pub top1: bool,
    pub top2: bool,
    pub within_tau1: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub rows: Vec<CaseRow>,
    /// Classification accuracy when the cases carry class labels.
    pub cls_accuracy: Option<f64>,
}

fn kappa_from_pairs(pairs: &[(usize, usize)]) -> Option<f64> {
    let hi = pairs.iter().map(|&(a, b)| a.max(b)).max()?;
    let k = hi + 2; // at least 2 categories
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
    let cm = ConfusionMatrix::from_ratings(&a, &b, k).ok()?;
    metrics::quadratic_weighted_kappa(&cm).ok()
}

pub fn evaluate(model: &DstModel, cases: &[&PhantomCase]) -> Result<EvalOutput> {
    if cases.is_empty() {
        return Err(Error::Argument("empty evaluation split".into()));
    }
    let n = model.cfg.n_landmarks;
    let mut rows = Vec::new();
    let mut per_lm_pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut per_lm_top: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut cls_hits = 0usize;
    let mut cls_n = 0usize;
    for case in cases {
        let out = forward_batch(model, &[case], None)?;
        if let Some(label) = case.class_label {
            let logits = out.cls_logits.values();
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            cls_n += 1;
            if best == label as usize {
                cls_hits += 1;
            }
        }
        if case.landmarks.is_empty() {
            continue;
        }
        if case.landmarks.len() != n {
            return Err(Error::Argument(format!(
                "case {} has {} landmarks, model expects {n}",
                case.case_id,
                case.landmarks.len()
            )));
        }
        let p = PredictionSet {
            probs: out.landmark_probs[0].clone(),
        };
        p.validate()?;
        let pred = metrics::argmax_prediction(&p);
        for j in 0..n {
            let (zt, zp) = (case.landmarks.indices[j], pred.indices[j]);
            let single = PredictionSet {
                probs: vec![p.probs[j].clone()],
            };
            let truth = LandmarkSet::new(vec![zt]);
            let top1 = metrics::top_k_accuracy(&single, &truth, 1)? > 0.5;
            let top2 = metrics::top_k_accuracy(&single, &truth, 2.min(p.probs[j].len()))? > 0.5;
            rows.push(CaseRow {
                case_id: case.case_id.clone(),
                landmark: j,
                z_true: zt,
                z_pred: zp,
                abs_err: zt.abs_diff(zp),
                top1,
                top2,
                within_tau1: zt.abs_diff(zp) <= 1,
            });
            per_lm_pairs[j].push((zt, zp));
            per_lm_top[j].push((top1 as u8 as f64, top2 as u8 as f64));
        }
    }
    let cls_accuracy = (cls_n > 0).then(|| cls_hits as f64 / cls_n as f64);
    if rows.is_empty() {
        return Ok(EvalOutput {
            report: MetricsReport {
                per_landmark: Vec::new(),
                aggregate: MetricRow::default(),
                kappa_pooled: None,
                dice: None,
                per_segment_volume_mm3: None,
            },
            rows,
            cls_accuracy,
        });
    }
    let mut per_landmark = Vec::with_capacity(n);
    for j in 0..n {
        let pairs = &per_lm_pairs[j];
        let m = pairs.len() as f64;
        let mae = pairs.iter().map(|&(a, b)| a.abs_diff(b) as f64).sum::<f64>() / m;
        let acc1 = pairs.iter().filter(|&&(a, b)| a.abs_diff(b) <= 1).count() as f64 / m;
        let top1 = per_lm_top[j].iter().map(|t| t.0).sum::<f64>() / m;
        let top2 = per_lm_top[j].iter().map(|t| t.1).sum::<f64>() / m;
        per_landmark.push(MetricRow {
            mae,
            top1,
            top2,
            acc_tau1: acc1,
            kappa: kappa_from_pairs(pairs),
        });
    }
    let total = rows.len() as f64;
    let aggregate = MetricRow {
        mae: rows.iter().map(|r| r.abs_err as f64).sum::<f64>() / total,
        top1: rows.iter().filter(|r| r.top1).count() as f64 / total,
        top2: rows.iter().filter(|r| r.top2).count() as f64 / total,
        acc_tau1: rows.iter().filter(|r| r.within_tau1).count() as f64 / total,
        kappa: None,
    };
    let pooled: Vec<(usize, usize)> = per_lm_pairs.iter().flatten().cloned().collect();
    Ok(EvalOutput {
        report: MetricsReport {
            per_landmark,
            aggregate,
            kappa_pooled: kappa_from_pairs(&pooled),
            dice: None,
            per_segment_volume_mm3: None,
        },
        rows,
        cls_accuracy,
    })
}

/// Mean and standard deviation of a per-fold metric.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferOutput {
    pub landmarks: LandmarkSet,
    pub predictions: PredictionSet,
}

pub fn infer(model: &DstModel, volume: &crate::volume::Volume) -> Result<InferOutput> {
    let x = DstModel::volumes_to_input(&[volume])?;
    if volume.dims.2 > model.cfg.d_max {
        return Err(Error::Argument(format!(
            "volume depth {} exceeds d_max {}",
            volume.dims.2, model.cfg.d_max
        )));
    }
    let out = model.forward(&x, None)?;
    let predictions = PredictionSet {
        probs: out.landmark_probs[0].clone(),
    };
    predictions.validate()?;
    let landmarks = metrics::argmax_prediction(&predictions);
    Ok(InferOutput {
        landmarks,
        predictions,
    })
}

// ---------------------------------------------------------------- segments

/// Segment labels: 1-4 cervical/petrous/cavernous/supraclinoid on the
/// left, 5-8 on the right. Boundary slices belong to the proximal
/// segment (z <= c1 is cervical, etc.).
pub fn assign_segments(
    calc_mask: &BinaryMask,
    landmarks: &LandmarkSet,
    hemis: &HemisphereResult,
) -> Result<LabelMask> {
    if calc_mask.dims != hemis.left.dims || calc_mask.dims != hemis.right.dims {
        return Err(Error::Shape("mask dims differ from hemisphere dims".into()));
    }
    if landmarks.len() != 6 {
        return Err(Error::Argument("segment assignment needs 6 landmarks".into()));
    }
    landmarks.validate(calc_mask.dims.2)?;
    let (h, w, d) = calc_mask.dims;
    let mut labels = vec![0u8; h * w * d];
    let seg = |z: usize, lm: &[usize]| -> u8 {
        if z <= lm[0] {
            1
        } else if z <= lm[1] {
            2
        } else if z <= lm[2] {
            3
        } else {
            4
        }
    };
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let i = x + h * (y + w * z);
                if !calc_mask.bits[i] {
                    continue;
                }
                labels[i] = if hemis.right.bits[i] {
                    seg(z, &landmarks.indices[3..6]) + 4
                } else {
                    seg(z, &landmarks.indices[0..3])
                };
            }
        }
    }
    Ok(LabelMask {
        labels,
        dims: calc_mask.dims,
    })
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    WoAttention,
    RightPadding,
    Layers,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<AblationAxis> {
        match s {
            "wo_attention" => Ok(AblationAxis::WoAttention),
            "right_padding" => Ok(AblationAxis::RightPadding),
            "layers" => Ok(AblationAxis::Layers),
            other => Err(Error::Argument(format!("unknown ablation axis {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    /// Per-fold test metric: MAE for localization axes, accuracy for the
    /// layer sweep.
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub metric: String,
    pub arms: Vec<AblationArm>,
}

fn train_eval_fold(
    cfg: &TrainConfig,
    cases: &[PhantomCase],
    split: &FoldSplit,
    ckpt: &Path,
) -> Result<(f64, Option<f64>)> {
    train(cfg, cases, split, ckpt)?;
    let loaded = load_checkpoint(ckpt)?;
    let test = select(cases, &split.test)?;
    let out = evaluate(&loaded.model, &test)?;
    let mae = out.report.aggregate.mae;
    Ok((mae, out.cls_accuracy))
}

/// Trains baseline and variant arms under identical seeds and splits and
/// reports the per-fold test metric side by side.
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
    cases: &[PhantomCase],
    folds: &[FoldSplit],
    work_dir: impl AsRef<Path>,
) -> Result<AblationReport> {
    let work_dir = work_dir.as_ref();
    std::fs::create_dir_all(work_dir)?;
    let variants: Vec<(String, TrainConfig)> = match axis {
        AblationAxis::WoAttention => {
            let mut v = base.clone();
            v.attention_enabled = false;
            vec![("full".into(), base.clone()), ("wo_attention".into(), v)]
        }
        AblationAxis::RightPadding => {
            let mut v = base.clone();
            v.padding_side = PaddingSide::Right;
            vec![("left_padding".into(), base.clone()), ("right_padding".into(), v)]
        }
        AblationAxis::Layers => [0usize, 1, 8]
            .iter()
            .map(|&n| {
                let mut v = base.clone();
                v.model.n_layers = n;
                (format!("layers_{n}"), v)
            })
            .collect(),
    };
    let metric = match axis {
        AblationAxis::Layers => "accuracy",
        _ => "mae",
    };
    use rayon::prelude::*;
    let mut arms = Vec::new();
    for (name, cfg) in &variants {
        let per_fold: Vec<f64> = folds
            .par_iter()
            .enumerate()
            .map(|(i, split)| {
                let mut fold_cfg = cfg.clone();
                fold_cfg.fold = i;
                let ckpt = work_dir.join(format!("{name}_fold{i}.ckpt"));
                let (mae, acc) = train_eval_fold(&fold_cfg, cases, split, &ckpt)?;
                Ok(match axis {
                    AblationAxis::Layers => acc.ok_or_else(|| {
                        Error::Argument("layer sweep needs classification cases".into())
                    })?,
                    _ => mae,
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&per_fold);
        arms.push(AblationArm {
            name: name.clone(),
            per_fold,
            mean,
            std,
        });
    }
    Ok(AblationReport {
        axis,
        metric: metric.into(),
        arms,
    })
}
