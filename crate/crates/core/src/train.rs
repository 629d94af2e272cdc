//! Optimizers, the training loop, evaluation, and the threshold and
//! scaling-mode sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{LayerKind, ModelGraph, Precision};
use crate::autodiff::{SteConfig, Tape};
use crate::data::{batches, Augment, Dataset};
use crate::error::{BnnError, Result};
use crate::layers::{qconv_forward, qdense_forward, LatentWeights, QKernel, ScalingMode};
use crate::model::{ForwardOptions, Model, Phase};
use crate::tensor::FloatTensor;

/// Default `t_clip` grid of [`sweep_tclip`].
pub const DEFAULT_TCLIP_GRID: [f64; 7] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    pub const SGD: Optimizer = Optimizer::SgdMomentum { momentum: 0.9 };
}

/// Multiplies the learning rate by `factor` once for every milestone epoch
/// (zero-based) that has been reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Decay by 0.1 at 60% and 90% of `epochs`.
    pub fn step_decay(epochs: usize) -> Self {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        LrSchedule {
            factor: 0.1,
            milestones: vec![at(0.6), at(0.9)],
        }
    }

    pub fn constant() -> Self {
        LrSchedule {
            factor: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let hits = self
            .milestones
            .iter()
            .filter(|&&m| m > 0 && epoch >= m)
            .count();
        base * self.factor.powi(hits as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// L2 penalty on full-precision conv and dense weights only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t_clip: f64,
    pub scaling_mode: ScalingMode,
    pub seed: u64,
    pub augment: Option<Augment>,
    pub eval_batch: usize,
    /// Train on the first `n` items only.
    pub train_limit: Option<usize>,
    /// Evaluate on the first `n` test items only.
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_epochs(30)
    }
}

impl TrainConfig {
    /// Defaults with the learning-rate milestones placed for `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::ADAM,
            lr: 1e-3,
            schedule: LrSchedule::step_decay(epochs),
            weight_decay: 0.0,
            epochs,
            batch_size: 100,
            t_clip: SteConfig::DEFAULT_T_CLIP,
            scaling_mode: ScalingMode::N,
            seed: 0,
            augment: None,
            eval_batch: 500,
            train_limit: None,
            test_limit: None,
        }
    }

    /// `lr = 0` is accepted so that a run can leave weights untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(BnnError::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(BnnError::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(BnnError::invalid("batch sizes must be at least 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(BnnError::invalid(
                "weight decay must be finite and non-negative",
            ));
        }
        if !(self.schedule.factor.is_finite() && self.schedule.factor > 0.0) {
            return Err(BnnError::invalid("schedule factor must be positive"));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1)
                    || !(0.0..1.0).contains(&beta2)
                    || !(eps.is_finite() && eps > 0.0)
                {
                    return Err(BnnError::invalid(
                        "Adam needs beta1, beta2 in [0, 1) and eps > 0",
                    ));
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(BnnError::invalid("momentum must be in [0, 1)"));
                }
            }
        }
        SteConfig::new(self.t_clip)?;
        Ok(())
    }

    pub fn ste(&self) -> Result<SteConfig> {
        SteConfig::new(self.t_clip)
    }
}

/// One epoch of a [`TrainReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub train_acc: f64,
    pub test_top1: f64,
    pub test_top5: Option<f64>,
    pub seconds: f64,
}

/// Wall time is excluded so that reports of identical runs compare equal.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.loss == o.loss
            && self.train_acc == o.train_acc
            && self.test_top1 == o.test_top1
            && self.test_top5 == o.test_top5
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,test_top1,test_top5,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{:.3}",
                r.epoch,
                r.loss,
                r.train_acc,
                r.test_top1,
                opt_cell(r.test_top5),
                r.seconds
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    /// Present when the dataset has at least five classes.
    pub top5: Option<f64>,
    pub loss: f64,
}

/// Rank of `label` among `row`, ties broken towards the lower index so that
/// rank 0 coincides with the first-maximum argmax.
fn label_rank(row: &[f32], label: usize) -> usize {
    let y = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

fn cross_entropy_row(row: &[f32], label: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max
        + row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    lse - row[label] as f64
}

/// Top-1, top-5 and mean cross-entropy of logits against labels.
pub fn score_logits(logits: &FloatTensor, labels: &[usize]) -> Result<EvalResult> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(BnnError::shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(BnnError::invalid("cannot score an empty set"));
    }
    let classes = logits.dim(1);
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0f64);
    for (row, &y) in logits.values().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(BnnError::invalid(format!("label {y} outside 0..{classes}")));
        }
        let rank = label_rank(row, y);
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
        loss += cross_entropy_row(row, y);
    }
    let n = labels.len() as f64;
    Ok(EvalResult {
        top1: top1 as f64 / n,
        top5: (classes >= 5).then(|| top5 as f64 / n),
        loss: loss / n,
    })
}

/// Scores `model` on `ds` in the eval phase with the given binary kernel.
pub fn evaluate_with(
    model: &Model,
    ds: &Dataset,
    kernel: QKernel,
    chunk: usize,
) -> Result<EvalResult> {
    if ds.item_shape() != model.input_shape() {
        return Err(BnnError::shape(format!(
            "dataset items {:?} do not match model input {:?}",
            ds.item_shape(),
            model.input_shape()
        )));
    }
    let logits = model.logits_chunked(&ds.images, chunk, kernel)?;
    score_logits(&logits, &ds.labels)
}

/// Scores `model` on `ds` through the bit-packed kernels.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalResult> {
    evaluate_with(model, ds, QKernel::Packed, 500)
}

fn stream_seed(seed: u64, stream: u64, epoch: usize) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// Per-tensor optimizer state.
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: bool,
}

struct OptimizerState {
    kind: Optimizer,
    slots: Vec<Vec<Slot>>,
    step: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, model: &Model) -> Self {
        let slots = model
            .graph
            .nodes
            .iter()
            .zip(&model.params)
            .map(|(node, tensors)| {
                let full = matches!(
                    node.kind,
                    LayerKind::Conv {
                        precision: Precision::Full,
                        ..
                    } | LayerKind::Dense {
                        precision: Precision::Full,
                        ..
                    }
                );
                node.params()
                    .iter()
                    .zip(tensors)
                    .map(|(spec, t)| Slot {
                        m: vec![0.0; t.len()],
                        v: match kind {
                            Optimizer::Adam { .. } => vec![0.0; t.len()],
                            Optimizer::SgdMomentum { .. } => Vec::new(),
                        },
                        decay: full && spec.name == "weight",
                    })
                    .collect()
            })
            .collect();
        OptimizerState {
            kind,
            slots,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Vec<FloatTensor>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let wd = weight_decay as f32;
        for ((tensors, slots), gs) in model.params.iter_mut().zip(&mut self.slots).zip(grads) {
            for ((t, slot), g) in tensors.iter_mut().zip(slots).zip(gs) {
                let wd = if slot.decay { wd } else { 0.0 };
                match self.kind {
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let (b1, b2) = (beta1 as f32, beta2 as f32);
                        let c1 = 1.0 - beta1.powi(self.step);
                        let c2 = 1.0 - beta2.powi(self.step);
                        let step = (lr * c2.sqrt() / c1) as f32;
                        let eps = (eps * c2.sqrt()) as f32;
                        for (((w, &g), m), v) in t
                            .values_mut()
                            .iter_mut()
                            .zip(g.values())
                            .zip(&mut slot.m)
                            .zip(&mut slot.v)
                        {
                            let g = g + wd * *w;
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *w -= step * *m / (v.sqrt() + eps);
                        }
                    }
                    Optimizer::SgdMomentum { momentum } => {
                        let (mu, lr) = (momentum as f32, lr as f32);
                        for ((w, &g), m) in
                            t.values_mut().iter_mut().zip(g.values()).zip(&mut slot.m)
                        {
                            let g = g + wd * *w;
                            *m = mu * *m + g;
                            *w -= lr * *m;
                        }
                    }
                }
            }
        }
    }
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug)]
struct StepStats {
    loss: f64,
    correct: usize,
}

fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    images: FloatTensor,
    labels: &[usize],
    ste: SteConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let opts = ForwardOptions {
        phase: Phase::Train,
        ste,
        kernel: QKernel::Packed,
    };
    let pass = model.forward(&mut tape, x, &opts)?;
    let loss_var = tape.softmax_cross_entropy(pass.logits, labels)?;
    let loss = tape.value(loss_var).values()[0] as f64;
    if !loss.is_finite() {
        let at = model
            .first_non_finite(&tape, &pass)
            .map(|n| format!("first non-finite output at layer {n}"))
            .unwrap_or_else(|| "all layer outputs finite, loss overflowed".into());
        return Err(BnnError::Numeric(format!(
            "training diverged: loss is {loss}; {at}"
        )));
    }
    let correct = tape
        .value(pass.logits)
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let mut g = tape.backward(loss_var)?;
    let grads: Vec<Vec<FloatTensor>> = pass
        .params
        .iter()
        .map(|vars| {
            vars.iter()
                .map(|&v| {
                    g.take(v)
                        .unwrap_or_else(|| FloatTensor::zeros(tape.value(v).shape().to_vec()))
                })
                .collect()
        })
        .collect();
    model.update_running(&pass);
    opt.apply(model, &grads, lr, weight_decay);
    model.clip_latent();
    Ok(StepStats { loss, correct })
}

fn limited(ds: &Dataset, limit: Option<usize>) -> Result<Option<Dataset>> {
    match limit {
        Some(n) if n < ds.len() => Ok(Some(ds.subset(&(0..n).collect::<Vec<_>>())?)),
        _ => Ok(None),
    }
}

/// Trains `model` in place for `cfg.epochs` epochs and scores it on `test`
/// after each one. The binary layers run in `cfg.scaling_mode`.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let ste = cfg.ste()?;
    for ds in [train, test] {
        if ds.item_shape() != model.input_shape() {
            return Err(BnnError::shape(format!(
                "dataset items {:?} do not match model input {:?}",
                ds.item_shape(),
                model.input_shape()
            )));
        }
        if ds.class_count > model.num_classes() {
            return Err(BnnError::shape(format!(
                "dataset has {} classes, model outputs {}",
                ds.class_count,
                model.num_classes()
            )));
        }
    }
    let train_sub = limited(train, cfg.train_limit)?;
    let train = train_sub.as_ref().unwrap_or(train);
    let test_sub = limited(test, cfg.test_limit)?;
    let test = test_sub.as_ref().unwrap_or(test);
    if train.is_empty() || test.is_empty() {
        return Err(BnnError::invalid(
            "training and test sets must be non-empty",
        ));
    }
    model.graph = model.graph.with_scaling_mode(cfg.scaling_mode);

    let mut opt = OptimizerState::new(cfg.optimizer, model);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, AUGMENT_STREAM, epoch));
        let (mut loss_sum, mut correct, mut steps) = (0f64, 0usize, 0usize);
        for batch in batches(
            train,
            cfg.batch_size,
            Some(stream_seed(cfg.seed, SHUFFLE_STREAM, epoch)),
        )? {
            let mut batch = batch?;
            if let Some(a) = cfg.augment {
                a.apply(&mut batch.images, &mut aug_rng);
            }
            let s = train_step(
                model,
                &mut opt,
                batch.images,
                &batch.labels,
                ste,
                lr,
                cfg.weight_decay,
            )?;
            loss_sum += s.loss;
            correct += s.correct;
            steps += 1;
        }
        let eval = evaluate_with(model, test, QKernel::Packed, cfg.eval_batch)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_top1: eval.top1,
            test_top5: eval.top5,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch={} lr={:e} loss={:.6} train_acc={:.6} test_top1={:.6} test_top5={} seconds={:.3}",
            rec.epoch,
            lr,
            rec.loss,
            rec.train_acc,
            rec.test_top1,
            opt_cell(rec.test_top5),
            rec.seconds
        );
        report.epochs.push(rec);
    }
    Ok(report)
}

/// Initializes a model for `graph` from `cfg.seed` with the training split's
/// normalization and trains it.
pub fn train(
    graph: &ModelGraph,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let mut model = Model::init(graph.clone(), train.norm.clone(), cfg.seed)?;
    let report = fit(&mut model, train, test, cfg)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TclipRow {
    pub t_clip: f64,
    pub test_top1: f64,
    pub test_top5: Option<f64>,
    pub final_loss: f64,
}

/// Rows of a threshold sweep. The CSV carries no timing so that equal runs
/// produce identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TclipSweep {
    pub rows: Vec<TclipRow>,
}

impl TclipSweep {
    pub const CSV_HEADER: &'static str = "t_clip,test_top1,test_top5,final_loss";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{},{:.6}",
                r.t_clip,
                r.test_top1,
                opt_cell(r.test_top5),
                r.final_loss
            );
        }
        s
    }

    /// Threshold with the highest top-1; the first one on ties.
    pub fn best(&self) -> Option<&TclipRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&TclipRow>, r| match best {
                Some(b) if b.test_top1 >= r.test_top1 => Some(b),
                _ => Some(r),
            })
    }
}

/// Trains one model per threshold; everything except `t_clip` is shared.
pub fn sweep_tclip(
    graph: &ModelGraph,
    train_ds: &Dataset,
    test_ds: &Dataset,
    thresholds: &[f64],
    cfg: &TrainConfig,
) -> Result<TclipSweep> {
    if thresholds.is_empty() {
        return Err(BnnError::invalid("threshold list is empty"));
    }
    for &t in thresholds {
        SteConfig::new(t)?;
    }
    let mut out = TclipSweep::default();
    for &t in thresholds {
        let c = TrainConfig {
            t_clip: t,
            ..cfg.clone()
        };
        log::info!("sweep=tclip t_clip={t}");
        let (_, report) = train(graph, train_ds, test_ds, &c)?;
        let last = report.last().expect("at least one epoch");
        out.rows.push(TclipRow {
            t_clip: t,
            test_top1: last.test_top1,
            test_top5: last.test_top5,
            final_loss: last.loss,
        });
    }
    Ok(out)
}

/// Per-epoch test top-1 of the three scaling modes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingComparison {
    /// Index 0, 1, 2 hold modes N, B, FB.
    pub reports: [TrainReport; 3],
    /// Largest relative deviation seen in the pre-training check
    /// `FB = N × α`.
    pub smoke_max_rel_err: f64,
}

impl ScalingComparison {
    pub const CSV_HEADER: &'static str = "epoch,N,B,FB";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for i in 0..self.reports[0].epochs.len() {
            let r: Vec<&EpochRecord> = self.reports.iter().map(|rep| &rep.epochs[i]).collect();
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r[0].epoch, r[0].test_top1, r[1].test_top1, r[2].test_top1
            );
        }
        s
    }
}

/// Largest relative deviation of `FB` from `N × α` over every binary layer
/// of a freshly initialized model, on a seeded random input.
pub fn scaling_smoke_check(graph: &ModelGraph, seed: u64) -> Result<f64> {
    use rand::Rng;
    let model = Model::init(
        graph.clone(),
        crate::data::NormStats::identity(graph.input_shape[0]),
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for (i, node) in graph.nodes.iter().enumerate() {
        let Some(cfg) = node.kind.qconfig() else {
            continue;
        };
        let w = LatentWeights::new(model.params[i][0].clone());
        let alpha = w.alpha()?;
        let in_shape = &graph.nodes[node.inputs[0]].out_shape;
        let mut shape = vec![2];
        shape.extend_from_slice(in_shape);
        let x = FloatTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let dense = matches!(node.kind, LayerKind::Dense { .. });
        let run = |mode| {
            let c = cfg.with_scaling(mode);
            if dense {
                qdense_forward(&x, &w, &c, QKernel::Packed, false)
            } else {
                qconv_forward(&x, &w, &c, QKernel::Packed, false)
            }
            .map(|(y, _)| y)
        };
        let n = run(ScalingMode::N)?;
        let fb = run(ScalingMode::FB)?;
        for (&a, &b) in n.values().iter().zip(fb.values()) {
            let want = (a * alpha) as f64;
            let err = ((b as f64) - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            if want != 0.0 || b != 0.0 {
                worst = worst.max(err);
            }
        }
    }
    if worst > 1e-6 {
        return Err(BnnError::Internal(format!(
            "scaling check failed: FB deviates from N×α by {worst:e}"
        )));
    }
    Ok(worst)
}

/// Trains the N, B and FB variants of `graph` with identical seeds.
pub fn compare_scaling_modes(
    graph: &ModelGraph,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<ScalingComparison> {
    let smoke = scaling_smoke_check(graph, cfg.seed)?;
    log::info!("sweep=scaling smoke_max_rel_err={smoke:e}");
    let mut reports: Vec<TrainReport> = Vec::with_capacity(3);
    for mode in ScalingMode::ALL {
        log::info!("sweep=scaling mode={mode}");
        let c = TrainConfig {
            scaling_mode: mode,
            ..cfg.clone()
        };
        reports.push(train(graph, train_ds, test_ds, &c)?.1);
    }
    let reports: [TrainReport; 3] = reports.try_into().expect("three modes");
    Ok(ScalingComparison {
        reports,
        smoke_max_rel_err: smoke,
    })
}
