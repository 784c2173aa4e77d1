//! The training loop: view generation, pseudo-labels and masks, the combined
//! objective, SGD with (Nesterov) momentum under a truncated cosine
//! schedule, and the EMA shadow used for evaluation.

use std::f64::consts::PI;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::augment::{apply_cutmix, mix_pseudolabels, sample_cutmix_mask, strong_augment, weak_augment, CutMixMask};
use crate::checkpoint::save_checkpoint;
use crate::config::{DataSource, EmbeddingSource, RunConfig};
use crate::data::{
    generate_synthetic_dataset, generate_synthetic_test_set, load_binary_records, split_labeled, BatchStream,
    Dataset, Image, LabeledExample, LabeledSet, Remainder, UnlabeledSet, CIFAR10_CLASSES,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{top_k_error, utilization, MetricsRow};
use crate::model::{
    backward, channel_stats, ema_update, forward_full, forward_with_tape, init_params, softmax, ArchSpec, Gradients,
    ModelParams, Probabilities,
};
use crate::objective::{
    contrastive_lower_loss, cutmix_loss, one_hot_targets, pseudo_supervised_loss, supervised_loss, total_loss,
    LossBreakdown,
};
use crate::rng::{stream, Tag};
pub use crate::config::TrainConfig;
use crate::threshold::{make_pseudolabels, ThresholdState};

/// `lr0 * cos(7 pi t / (16 T))`.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (7.0 * PI * t / 16.0).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub ema: ModelParams,
    /// Momentum buffers, one per parameter block.
    pub velocity: Gradients,
    pub threshold: ThresholdState,
    pub step: u64,
    pub total_steps: u64,
    /// Every random stream is keyed by this seed and the step counter, so
    /// `(seed, step)` is the complete RNG state.
    pub seed: u64,
}

impl TrainState {
    pub fn new(arch: &ArchSpec, config: &RunConfig) -> Result<Self> {
        let params = init_params(arch, config.seed)?;
        let th = &config.threshold;
        Ok(Self {
            velocity: Gradients::zeros_like(&params),
            ema: params.clone(),
            params,
            threshold: ThresholdState::new(th.mode, arch.classes, th.momentum, th.fixed_value)?,
            step: 0,
            total_steps: config.train.total_steps,
            seed: config.seed,
        })
    }
}

/// One SGD step: `v = mu v + g`, direction `g + mu v` (Nesterov) or `v`,
/// then `theta -= lr * (direction + wd * theta)` with decay skipped for
/// biases.
pub fn sgd_update(
    params: &mut ModelParams,
    velocity: &mut Gradients,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
) {
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((block, v), g) in params.blocks.iter_mut().zip(&mut velocity.blocks).zip(&grads.blocks) {
        let wd = if block.is_bias() { 0.0 } else { weight_decay as f32 };
        for ((p, vi), &gi) in block.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi;
            let d = if nesterov { gi + mu * *vi } else { *vi };
            *p -= lr * (d + wd * *p);
        }
    }
}

/// Training pool, labeled subset and optional evaluation set.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: Option<Dataset>,
    pub class_count: usize,
}

impl TrainData {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let d = &config.data;
        let (pool, test) = match d.source {
            DataSource::Synthetic => {
                let spec = d
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::config("missing required key `data.synthetic`"))?;
                (
                    generate_synthetic_dataset(spec)?,
                    Some(generate_synthetic_test_set(spec, d.test_per_class)?),
                )
            }
            DataSource::Cifar10 => {
                let mut pool: Option<Dataset> = None;
                for f in &d.train_files {
                    let part = load_binary_records(f, CIFAR10_CLASSES)
                        .map_err(|e| Error::config(format!("dataset `{}`: {e}", f.display())))?;
                    match &mut pool {
                        Some(p) => p.labeled.extend(part.labeled),
                        None => pool = Some(part),
                    }
                }
                let pool = pool.ok_or_else(|| Error::config("missing required key `data.train_files`"))?;
                let test = match &d.test_file {
                    Some(f) => Some(
                        load_binary_records(f, CIFAR10_CLASSES)
                            .map_err(|e| Error::config(format!("dataset `{}`: {e}", f.display())))?,
                    ),
                    None => None,
                };
                (pool, test)
            }
        };
        let (labeled, unlabeled) = split_labeled(&pool, d.labels_per_class, config.seed)?;
        Ok(Self {
            class_count: pool.class_count,
            labeled,
            unlabeled,
            test,
        })
    }

    /// Architecture for this data, standardized with pool statistics.
    pub fn arch(&self, config: &RunConfig) -> Result<ArchSpec> {
        let first = self
            .unlabeled
            .images
            .first()
            .ok_or_else(|| Error::config("empty training pool"))?;
        let (c, h, w) = first.dims();
        let mut arch = ArchSpec::small_cnn(c, h, w, config.model.conv_channels.clone(), self.class_count);
        arch.kind = config.model.arch;
        let (mean, std) = channel_stats(&self.unlabeled.images);
        arch.input_mean = mean;
        arch.input_std = std;
        arch.validate()?;
        Ok(arch)
    }
}

/// Per-step diagnostics besides the loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub mask_rate: f64,
    /// `(correct, total)` pseudo-labels among gated rows with known truth.
    pub pseudo_hits: (usize, usize),
}

struct ViewBatch {
    weak: Vec<Image>,
    strong1: Vec<Image>,
    strong2: Vec<Image>,
    cutmix: Vec<Image>,
    masks: Vec<CutMixMask>,
    etas: Vec<f64>,
    partners: Vec<usize>,
}

fn make_views(config: &RunConfig, seed: u64, step: u64, batch: &[&Image]) -> Result<ViewBatch> {
    let aug = &config.augment;
    let obj = &config.objective;
    let weak: Vec<Image> = batch
        .iter()
        .enumerate()
        .map(|(i, img)| weak_augment(img, &aug.weak, &mut stream(seed, Tag::WeakAugment, &[step, i as u64])))
        .collect();
    let (mut strong1, mut strong2) = (Vec::new(), Vec::new());
    if obj.use_pseudo || obj.use_lower {
        for (i, img) in batch.iter().enumerate() {
            let key = [step, i as u64];
            strong1.push(strong_augment(img, &aug.strong, &mut stream(seed, Tag::Strong1, &key)));
            strong2.push(strong_augment(img, &aug.strong, &mut stream(seed, Tag::Strong2, &key)));
        }
    }
    let (mut cutmix, mut masks, mut etas, mut partners) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    if obj.use_cutmix && !batch.is_empty() {
        partners = (0..batch.len()).collect();
        partners.shuffle(&mut stream(seed, Tag::CutMixPartner, &[step]));
        let (_, h, w) = batch[0].dims();
        for i in 0..batch.len() {
            let (m, eta) = sample_cutmix_mask(h, w, aug.cutmix_alpha, &mut stream(seed, Tag::CutMixMask, &[step, i as u64]))?;
            masks.push(m);
            etas.push(eta);
        }
        cutmix = apply_cutmix(&weak, &partners, &masks)?;
    }
    Ok(ViewBatch {
        weak,
        strong1,
        strong2,
        cutmix,
        masks,
        etas,
        partners,
    })
}

fn all_zero(m: &Matrix) -> bool {
    m.as_slice().iter().all(|&v| v == 0.0)
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    out
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s;
    }
}

/// One iteration of the training algorithm on explicit batches.
/// `unlabeled_truth` carries withheld labels for diagnostics only.
pub fn train_step(
    state: &mut TrainState,
    labeled_batch: &[&LabeledExample],
    unlabeled_batch: &[&Image],
    unlabeled_truth: &[Option<usize>],
    config: &RunConfig,
) -> Result<StepReport> {
    let step = state.step;
    let seed = state.seed;
    let obj = &config.objective;
    let k = state.params.arch.classes;
    let lambda = if obj.use_lower { obj.lambda } else { 0.0 };

    let labeled_views: Vec<Image> = labeled_batch
        .iter()
        .enumerate()
        .map(|(i, e)| weak_augment(&e.image, &config.augment.weak, &mut stream(seed, Tag::LabeledAugment, &[step, i as u64])))
        .collect();
    let views = make_views(config, seed, step, unlabeled_batch)?;

    let mut mask_rate = 0.0;
    let mut pseudo_hits = (0, 0);
    let mut pseudo = None;
    if (obj.use_pseudo || obj.use_cutmix) && !unlabeled_batch.is_empty() {
        // Pseudo-label path: forward only, no tape, so no gradient.
        let weak_out = forward_full(&state.params, &views.weak)?;
        let y_weak: Probabilities = softmax(&weak_out.logits);
        let phat = make_pseudolabels(&y_weak);
        let mask = state.threshold.update_and_mask(&y_weak)?;
        mask_rate = utilization(&mask);
        for (i, (&gate, c)) in mask.gates().iter().zip(phat.classes()).enumerate() {
            if let (true, Some(Some(truth))) = (gate, unlabeled_truth.get(i)) {
                pseudo_hits.1 += 1;
                if *truth == c {
                    pseudo_hits.0 += 1;
                }
            }
        }
        pseudo = Some((phat, mask));
    }

    let mut grads = Gradients::zeros_like(&state.params);

    let (lab_out, lab_tape) = forward_with_tape(&state.params, &labeled_views)?;
    let labels: Vec<usize> = labeled_batch.iter().map(|e| e.label).collect();
    let sup = supervised_loss(&lab_out.logits, &one_hot_targets(&labels, k)?)?;
    if !labeled_batch.is_empty() {
        grads.accumulate(&backward(&state.params, &lab_tape, &sup.grad, None)?);
    }

    let (mut l_pseudo, mut l_cutmix, mut l_lower) = (0.0, 0.0, 0.0);
    if !views.strong1.is_empty() {
        let (out1, tape1) = forward_with_tape(&state.params, &views.strong1)?;
        let (out2, tape2) = forward_with_tape(&state.params, &views.strong2)?;
        let n = out1.logits.0.rows();
        let mut dz1 = Matrix::zeros(n, k);
        let mut dz2 = Matrix::zeros(n, k);
        let mut de: Option<(Matrix, Matrix)> = None;
        if obj.use_pseudo {
            if let Some((phat, mask)) = &pseudo {
                let p = pseudo_supervised_loss(&out1.logits, &out2.logits, phat, mask)?;
                l_pseudo = p.value;
                add_into(&mut dz1, &p.grad1);
                add_into(&mut dz2, &p.grad2);
            }
        }
        if obj.use_lower {
            match config.model.embedding {
                EmbeddingSource::Logits => {
                    let c = contrastive_lower_loss(&out1.logits.0, &out2.logits.0)?;
                    l_lower = c.value;
                    add_into(&mut dz1, &scaled(&c.grad1, lambda));
                    add_into(&mut dz2, &scaled(&c.grad2, lambda));
                }
                EmbeddingSource::Penultimate => {
                    let c = contrastive_lower_loss(&out1.embedding, &out2.embedding)?;
                    l_lower = c.value;
                    de = Some((scaled(&c.grad1, lambda), scaled(&c.grad2, lambda)));
                }
            }
        }
        let live = |dz: &Matrix, e: Option<&Matrix>| !all_zero(dz) || e.is_some_and(|m| !all_zero(m));
        let (de1, de2) = match &de {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        if live(&dz1, de1) {
            grads.accumulate(&backward(&state.params, &tape1, &dz1, de1)?);
        }
        if live(&dz2, de2) {
            grads.accumulate(&backward(&state.params, &tape2, &dz2, de2)?);
        }
    }

    if obj.use_cutmix && !views.cutmix.is_empty() {
        if let Some((phat, mask)) = &pseudo {
            let n = views.cutmix.len();
            let mut targets = Matrix::zeros(n, k);
            for i in 0..n {
                let r = views.partners[i];
                let mixed = mix_pseudolabels(phat.0.row(i), phat.0.row(r), &mask.row(i), &mask.row(r), views.etas[i]);
                targets.row_mut(i).copy_from_slice(&mixed);
            }
            debug_assert_eq!(views.masks.len(), n);
            let (outc, tapec) = forward_with_tape(&state.params, &views.cutmix)?;
            let c = cutmix_loss(&outc.logits, &targets)?;
            l_cutmix = c.value;
            if !all_zero(&c.grad) {
                grads.accumulate(&backward(&state.params, &tapec, &c.grad, None)?);
            }
        }
    }

    let breakdown = total_loss(sup.value, l_pseudo, l_cutmix, l_lower, lambda)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            step,
            breakdown: breakdown.to_string(),
        });
    }

    let t = &config.train;
    let lr = lr_schedule(step, state.total_steps, t.lr0);
    sgd_update(&mut state.params, &mut state.velocity, &grads, lr, t.momentum, t.nesterov, t.weight_decay);
    if !state.params.is_finite() {
        return Err(Error::NonFinite {
            step,
            breakdown: format!("{breakdown} (parameters diverged)"),
        });
    }
    ema_update(&mut state.ema, &state.params, t.ema_decay)?;
    state.step += 1;
    Ok(StepReport {
        breakdown,
        lr,
        mask_rate,
        pseudo_hits,
    })
}

/// Top-1 and top-`k` error of `params` on `dataset`, no augmentation.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, batch: usize, top_k: usize) -> Result<(f64, f64)> {
    let mut probs = Vec::with_capacity(dataset.labeled.len() * params.arch.classes);
    for chunk in dataset.labeled.chunks(batch.max(1)) {
        let imgs: Vec<Image> = chunk.iter().map(|e| e.image.clone()).collect();
        let y = softmax(&forward_full(params, &imgs)?.logits);
        probs.extend_from_slice(y.0.as_slice());
    }
    let probs = Probabilities(Matrix::from_vec(dataset.labeled.len(), params.arch.classes, probs)?);
    let labels = dataset.labels();
    let k = top_k.min(params.arch.classes);
    Ok((top_k_error(&probs, &labels, 1)?, top_k_error(&probs, &labels, k)?))
}

#[derive(Default)]
struct Window {
    steps: u64,
    sums: [f64; 6],
    hits: (usize, usize),
}

impl Window {
    fn push(&mut self, r: &StepReport) {
        let b = &r.breakdown;
        self.steps += 1;
        for (s, v) in self.sums.iter_mut().zip([b.l_sup, b.l_pseudo, b.l_cutmix, b.l_lower, b.total, r.mask_rate]) {
            *s += v;
        }
        self.hits.0 += r.pseudo_hits.0;
        self.hits.1 += r.pseudo_hits.1;
    }

    fn mean(&self, i: usize) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.sums[i] / self.steps as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
}

/// Hooks invoked while training runs.
pub trait TrainObserver {
    fn on_row(&mut self, _row: &MetricsRow) {}
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Writes `ckpt_<step>.bin` and `latest.bin` into a directory.
pub struct CheckpointWriter<'a> {
    pub dir: &'a Path,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        save_checkpoint(state, self.dir.join(format!("ckpt_{:08}.bin", state.step)))?;
        save_checkpoint(state, self.dir.join("latest.bin"))
    }
}

/// Incremental driver: owns the configuration, data, state and batch
/// streams, and advances one step at a time.
pub struct Trainer {
    config: RunConfig,
    data: TrainData,
    state: TrainState,
    labeled_stream: BatchStream,
    unlabeled_stream: BatchStream,
    window: Window,
    rows: Vec<MetricsRow>,
}

impl Trainer {
    /// Starts from `resume` when given, which must match the configured
    /// architecture, seed and step budget.
    pub fn new(config: RunConfig, data: TrainData, resume: Option<TrainState>) -> Result<Self> {
        config.validate()?;
        let arch = data.arch(&config)?;
        let state = match resume {
            Some(s) => {
                if s.params.arch != arch {
                    return Err(Error::config("checkpoint architecture does not match the configured data/model"));
                }
                if s.seed != config.seed || s.total_steps != config.train.total_steps {
                    return Err(Error::config("checkpoint seed/total_steps differ from the configuration"));
                }
                s
            }
            None => TrainState::new(&arch, &config)?,
        };
        let t = &config.train;
        let labeled_stream = BatchStream::new(
            data.labeled.examples.len(),
            t.labeled_batch,
            state.seed,
            Tag::LabeledBatches,
            Remainder::Emit,
        )?;
        let unlabeled_stream = BatchStream::new(
            data.unlabeled.len(),
            t.unlabeled_batch,
            state.seed,
            Tag::UnlabeledBatches,
            Remainder::Continuous,
        )?;
        Ok(Self {
            config,
            data,
            state,
            labeled_stream,
            unlabeled_stream,
            window: Window::default(),
            rows: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    /// One training step. Returns the metrics row when this step closes a
    /// logging window. Checkpoint hooks fire on checkpoint boundaries.
    pub fn step(&mut self, observer: &mut dyn TrainObserver) -> Result<Option<MetricsRow>> {
        if self.is_done() {
            return Ok(None);
        }
        let step = self.state.step;
        let data = &self.data;
        let lab_idx = self.labeled_stream.batch_at(step);
        let unl_idx = self.unlabeled_stream.batch_at(step);
        let lab: Vec<&LabeledExample> = lab_idx.iter().map(|&i| &data.labeled.examples[i]).collect();
        let unl: Vec<&Image> = unl_idx.iter().map(|&i| &data.unlabeled.images[i]).collect();
        let truth: Vec<Option<usize>> = unl_idx.iter().map(|&i| data.unlabeled.hidden_labels[i]).collect();
        let report = train_step(&mut self.state, &lab, &unl, &truth, &self.config)?;
        self.window.push(&report);
        debug!("step {step}: {}", report.breakdown);
        let t = &self.config.train;
        let mut logged = None;
        if self.state.step % t.log_interval == 0 || self.state.step == self.state.total_steps {
            let row = log_row(&self.state, data, &self.config, &self.window, report.lr)?;
            info!(
                "step {} total {:.4} mask {:.3} tau {:.3} err_ema {:?}",
                row.step, row.total, row.mask_rate, row.tau, row.top1_err_ema
            );
            observer.on_row(&row);
            self.rows.push(row.clone());
            self.window = Window::default();
            logged = Some(row);
        }
        if t.checkpoint_interval > 0 && self.state.step % t.checkpoint_interval == 0 {
            observer.on_checkpoint(&self.state)?;
        }
        Ok(logged)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            state: self.state,
            rows: self.rows,
        }
    }
}

/// Runs from `resume` (or a fresh state) to `train.total_steps`. Rows are
/// logged every `log_interval` steps and at the final step.
pub fn run_training(
    config: &RunConfig,
    data: &TrainData,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data.clone(), resume)?;
    info!("training from step {} to {}", trainer.state.step, trainer.state.total_steps);
    while !trainer.is_done() {
        trainer.step(observer)?;
    }
    Ok(trainer.into_outcome())
}

fn log_row(state: &TrainState, data: &TrainData, config: &RunConfig, w: &Window, lr: f64) -> Result<MetricsRow> {
    let (ema_err, raw_err) = match &data.test {
        Some(test) if !test.labeled.is_empty() => (
            Some(evaluate(&state.ema, test, config.train.eval_batch, 1)?.0),
            Some(evaluate(&state.params, test, config.train.eval_batch, 1)?.0),
        ),
        _ => (None, None),
    };
    Ok(MetricsRow {
        step: state.step,
        lr,
        l_sup: w.mean(0),
        l_pseudo: w.mean(1),
        l_cutmix: w.mean(2),
        l_lower: w.mean(3),
        total: w.mean(4),
        mask_rate: w.mean(5),
        tau: state.threshold.global(),
        top1_err_ema: ema_err,
        top1_err_raw: raw_err,
        pseudo_acc: (w.hits.1 > 0).then(|| w.hits.0 as f64 / w.hits.1 as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 0.03), 0.03);
        assert_relative_eq!(lr_schedule(100, 100, 0.03), 0.03 * (7.0 * PI / 16.0).cos(), epsilon = 1e-15);
        assert_relative_eq!(lr_schedule(100, 100, 0.03), 0.005_852_709_660_483_85, epsilon = 1e-12);
        let lrs: Vec<f64> = (0..=100).map(|s| lr_schedule(s, 100, 0.03)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&v| v > 0.0));
    }
}
