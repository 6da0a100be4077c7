//! Training loop, learning-rate schedule, and the segment/crop evaluation
//! protocol.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rra_tensor::{Graph, Mode, Tensor, TensorError};

use crate::config::{join, KeyValues};
use crate::data::augment::{augment, AugmentSpec, MULTI_SCALES};
use crate::data::sampling::{sample_train_frames, test_indices, SamplingSpec};
use crate::data::{pack_frames, Dataset, Frame, VideoSample};
use crate::error::{io_err, Error, Result};
use crate::heads::{argmax, one_hot, predict, total_loss, LossKind, LossSpec, PredictMode};
use crate::model::{ModelConfig, RraModel};
use crate::optim::Adam;
use crate::seeds::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub segments: usize,
    pub crops: usize,
    pub flip: bool,
}

impl EvalProtocol {
    pub fn sampling(&self) -> SamplingSpec {
        SamplingSpec::test(self.segments, self.crops, self.flip)
    }

    pub fn inputs_per_video(&self) -> usize {
        self.sampling().inputs_per_video()
    }
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            segments: 8,
            crops: 1,
            flip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone parameters stay fixed for epochs `< freeze_backbone_until`.
    pub freeze_backbone_until: usize,
    /// Backbone batch norm always uses its running statistics.
    pub freeze_bn: bool,
    pub seed: u64,
    pub loss: LossSpec,
    pub train_segments: usize,
    pub scales: Vec<f64>,
    pub train_flip: bool,
    pub eval: EvalProtocol,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 2e-4,
            lr_decay: 0.1,
            decay_every: 30,
            epochs: 25,
            batch_size: 8,
            freeze_backbone_until: 0,
            freeze_bn: false,
            seed: 0,
            loss: LossSpec::default(),
            train_segments: 4,
            scales: MULTI_SCALES.to_vec(),
            train_flip: true,
            eval: EvalProtocol::default(),
            eval_every: 1,
        }
    }
}

/// Every key understood by [`TrainConfig::from_kv`].
pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "lr_decay",
    "decay_every",
    "epochs",
    "batch_size",
    "freeze_backbone_until",
    "freeze_bn",
    "seed",
    "loss",
    "weight_lc",
    "weight_li",
    "weight_le",
    "train_segments",
    "scales",
    "train_flip",
    "eval_segments",
    "eval_crops",
    "eval_flip",
    "eval_every",
    "input_size",
    "backbone_channels",
    "backbone_kernel",
    "backbone_stride",
    "backbone_batchnorm",
    "num_classes",
    "in_channels",
    "glimpses",
    "variant",
    "parallel",
    "dropout",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let dm = &d.model;
        let mut loss: LossSpec = kv.get_or("loss", d.loss)?;
        for kind in LossKind::ALL {
            let key = format!("weight_{}", kind.token());
            let slot = match kind {
                LossKind::Concat => &mut loss.lc,
                LossKind::Individual => &mut loss.li,
                LossKind::Ensemble => &mut loss.le,
            };
            if let Some(w) = slot.as_mut() {
                *w = kv.get_or(&key, *w)?;
            }
        }
        let cfg = TrainConfig {
            model: ModelConfig {
                in_channels: kv.get_or("in_channels", dm.in_channels)?,
                input_size: kv.get_or("input_size", dm.input_size)?,
                backbone_channels: kv.get_list_or("backbone_channels", dm.backbone_channels.clone())?,
                backbone_kernel: kv.get_or("backbone_kernel", dm.backbone_kernel)?,
                backbone_stride: kv.get_or("backbone_stride", dm.backbone_stride)?,
                backbone_batchnorm: kv.get_or("backbone_batchnorm", dm.backbone_batchnorm)?,
                num_classes: kv.get_or("num_classes", dm.num_classes)?,
                glimpses: kv.get_or("glimpses", dm.glimpses)?,
                variant: kv.get_or("variant", dm.variant)?,
                parallel: kv.get_or("parallel", dm.parallel)?,
                dropout: kv.get_or("dropout", dm.dropout)?,
            },
            lr: kv.get_or("lr", d.lr)?,
            lr_decay: kv.get_or("lr_decay", d.lr_decay)?,
            decay_every: kv.get_or("decay_every", d.decay_every)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            freeze_backbone_until: kv.get_or("freeze_backbone_until", d.freeze_backbone_until)?,
            freeze_bn: kv.get_or("freeze_bn", d.freeze_bn)?,
            seed: kv.get_or("seed", d.seed)?,
            loss,
            train_segments: kv.get_or("train_segments", d.train_segments)?,
            scales: kv.get_list_or("scales", d.scales.clone())?,
            train_flip: kv.get_or("train_flip", d.train_flip)?,
            eval: EvalProtocol {
                segments: kv.get_or("eval_segments", d.eval.segments)?,
                crops: kv.get_or("eval_crops", d.eval.crops)?,
                flip: kv.get_or("eval_flip", d.eval.flip)?,
            },
            eval_every: kv.get_or("eval_every", d.eval_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Complete key set; parsing it back yields the same config.
    pub fn to_kv(&self) -> KeyValues {
        let m = &self.model;
        let mut kv = KeyValues::new();
        kv.set("lr", self.lr);
        kv.set("lr_decay", self.lr_decay);
        kv.set("decay_every", self.decay_every);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("freeze_backbone_until", self.freeze_backbone_until);
        kv.set("freeze_bn", self.freeze_bn);
        kv.set("seed", self.seed);
        kv.set("loss", self.loss);
        for (kind, w) in self.loss.enabled() {
            kv.set(&format!("weight_{}", kind.token()), w);
        }
        kv.set("train_segments", self.train_segments);
        kv.set("scales", join(&self.scales));
        kv.set("train_flip", self.train_flip);
        kv.set("eval_segments", self.eval.segments);
        kv.set("eval_crops", self.eval.crops);
        kv.set("eval_flip", self.eval.flip);
        kv.set("eval_every", self.eval_every);
        kv.set("in_channels", m.in_channels);
        kv.set("input_size", m.input_size);
        kv.set("backbone_channels", join(&m.backbone_channels));
        kv.set("backbone_kernel", m.backbone_kernel);
        kv.set("backbone_stride", m.backbone_stride);
        kv.set("backbone_batchnorm", m.backbone_batchnorm);
        kv.set("num_classes", m.num_classes);
        kv.set("glimpses", m.glimpses);
        kv.set("variant", m.variant);
        kv.set("parallel", m.parallel);
        kv.set("dropout", m.dropout);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.train_segments == 0 {
            return Err(Error::Config("batch_size, decay_every and train_segments must be positive".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config("crop scales must lie in (0, 1]".into()));
        }
        self.eval.sampling().validate()
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            input_size: self.model.input_size,
            scales: self.scales.clone(),
            train_flip: self.train_flip,
            test_crops: self.eval.crops,
            test_flip: self.eval.flip,
        }
    }

    /// `lr · decay^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.lr_decay, self.decay_every, epoch)
    }
}

pub fn lr_at(lr: f64, decay: f64, decay_every: usize, epoch: usize) -> f64 {
    lr * decay.powi((epoch / decay_every.max(1)) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub terms: Vec<(LossKind, f64)>,
    pub eval_top1: Option<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: RraModel,
    pub optim: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = RraModel::new(config.model.clone(), config.seed)?;
        let optim = Adam::new(&model.store);
        Ok(TrainState {
            model,
            optim,
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Adopts the class count and channel count of `data`.
pub fn fit_to_dataset(config: &mut TrainConfig, data: &Dataset) -> Result<()> {
    data.validate()?;
    let first = data
        .train
        .first()
        .or(data.test.first())
        .and_then(|v| v.frames.first())
        .ok_or_else(|| Error::Data("dataset has no videos".into()))?;
    config.model.num_classes = data.num_classes;
    config.model.in_channels = first.channels;
    config.validate()
}

fn train_input(video: &VideoSample, config: &TrainConfig, spec: &AugmentSpec, epoch: usize) -> Result<Vec<Frame>> {
    let sampling = SamplingSpec::train(config.train_segments, config.seed);
    // one crop and flip per video and epoch, shared by its frames
    let aug_seed = derive_seed(config.seed, &[&"augment", &video.id, &epoch]);
    let mut out = Vec::with_capacity(config.train_segments);
    for i in sample_train_frames(video, &sampling, epoch) {
        out.extend(augment(&video.frames[i], spec, Mode::Train, aug_seed)?);
    }
    Ok(out)
}

fn non_finite(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Runs one epoch on `data.train`, then evaluates on `data.test` when
/// scheduled.
pub fn train_epoch(state: &mut TrainState, config: &TrainConfig, data: &Dataset) -> Result<EpochRecord> {
    if data.train.is_empty() {
        return Err(Error::Data("no training videos".into()));
    }
    let epoch = state.epoch;
    let lr = config.lr_at(epoch);
    let frozen = epoch < config.freeze_backbone_until;
    state.model.set_backbone_frozen(frozen);
    let spec = config.augment_spec();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng_for(config.seed, &[&"shuffle", &epoch]));

    let mut loss_sum = 0.0;
    let mut term_sums: Vec<(LossKind, f64)> = config.loss.enabled().map(|(k, _)| (k, 0.0)).collect();
    for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
        let videos: Vec<&VideoSample> = chunk.iter().map(|&i| &data.train[i]).collect();
        let inputs = videos
            .iter()
            .map(|v| train_input(v, config, &spec, epoch))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
        let targets = one_hot(&labels, config.model.num_classes)?;

        let mut g = Graph::new();
        let vars = state.model.store.bind(&mut g);
        let frames = g.constant(pack_frames(&inputs)?);
        let mut rng = rng_for(config.seed, &[&"dropout", &epoch, &batch]);
        let step = (|| {
            let out = state
                .model
                .forward(&mut g, &vars, frames, videos.len(), Mode::Train, config.freeze_bn, &mut rng)?;
            let loss = total_loss(&mut g, &config.loss, &out.scores, &out.probs, &targets)?;
            let grads = g.backward(loss.total)?;
            Ok::<_, Error>((g.value(loss.total).item(), loss.terms, grads))
        })();
        let (value, terms, grads) = step.map_err(non_finite(epoch, batch))?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch });
        }
        state.optim.step(&mut state.model.store, &vars, &grads, lr)?;
        let n = videos.len() as f64;
        loss_sum += value * n;
        for ((_, acc), (_, t)) in term_sums.iter_mut().zip(&terms) {
            *acc += t * n;
        }
    }
    let count = data.train.len() as f64;
    state.epoch += 1;
    let last = state.epoch == config.epochs;
    let scheduled = config.eval_every > 0 && state.epoch.is_multiple_of(config.eval_every);
    let eval_top1 = if (last || scheduled) && !data.test.is_empty() {
        Some(evaluate(&mut state.model, &data.test, config.model.num_classes, &config.eval, &spec)?.top1)
    } else {
        None
    };
    let record = EpochRecord {
        epoch,
        lr,
        train_loss: loss_sum / count,
        terms: term_sums.into_iter().map(|(k, s)| (k, s / count)).collect(),
        eval_top1,
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Trains until `config.epochs` epochs are complete, calling `after_epoch`
/// once per finished epoch (e.g. to write a checkpoint).
pub fn train(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &Dataset,
    mut after_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    while state.epoch < config.epochs {
        let rec = train_epoch(state, config, data)?;
        after_epoch(state, &rec)?;
    }
    Ok(())
}

/// Anything that maps frame sequences to per-glimpse raw class scores
/// (`[inputs.len(), C]` each).
pub trait VideoScorer {
    fn score(&mut self, inputs: &[Vec<Frame>]) -> Result<Vec<Tensor>>;
}

impl VideoScorer for RraModel {
    fn score(&mut self, inputs: &[Vec<Frame>]) -> Result<Vec<Tensor>> {
        self.score_frames(inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub inputs_per_video: usize,
    /// Ensemble-mode top-1 accuracy.
    pub top1: f64,
    pub top1_concat: f64,
    pub per_class: Vec<f64>,
    pub mean_per_class: f64,
    pub per_glimpse_top1: Vec<f64>,
    /// Ensemble-mode predicted class per video.
    pub predictions: Vec<usize>,
}

/// Model inputs for one test video: one sequence per crop variant, each
/// holding that variant of every sampled frame.
pub fn test_inputs(video: &VideoSample, protocol: &EvalProtocol, spec: &AugmentSpec) -> Result<Vec<Vec<Frame>>> {
    let spec = AugmentSpec {
        test_crops: protocol.crops,
        test_flip: protocol.flip,
        ..spec.clone()
    };
    let variants = spec.variants_per_frame();
    let mut inputs = vec![Vec::with_capacity(protocol.segments); variants];
    for i in test_indices(video.frames.len(), protocol.segments) {
        for (slot, f) in inputs.iter_mut().zip(augment(&video.frames[i], &spec, Mode::Eval, 0)?) {
            slot.push(f);
        }
    }
    Ok(inputs)
}

const EVAL_CHUNK: usize = 8;

/// Scores every video under `protocol`; raw scores are averaged over crop
/// variants before the softmax.
pub fn evaluate<S: VideoScorer + ?Sized>(
    scorer: &mut S,
    videos: &[VideoSample],
    num_classes: usize,
    protocol: &EvalProtocol,
    spec: &AugmentSpec,
) -> Result<EvalReport> {
    protocol.sampling().validate()?;
    if videos.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut correct_concat = 0usize;
    let mut per_glimpse: Vec<usize> = Vec::new();
    let mut class_total = vec![0usize; num_classes];
    let mut class_hit = vec![0usize; num_classes];
    let mut predictions = Vec::with_capacity(videos.len());
    let mut inputs_per_video = 0;
    for chunk in videos.chunks(EVAL_CHUNK) {
        let mut inputs = Vec::new();
        for v in chunk {
            let vi = test_inputs(v, protocol, spec)?;
            inputs_per_video = vi.iter().map(Vec::len).sum();
            inputs.extend(vi);
        }
        let variants = inputs.len() / chunk.len();
        let scores = scorer.score(&inputs)?;
        if per_glimpse.is_empty() {
            per_glimpse = vec![0; scores.len()];
        }
        for (vi, v) in chunk.iter().enumerate() {
            if v.label >= num_classes {
                return Err(Error::Data(format!("video {} label {} >= {num_classes}", v.id, v.label)));
            }
            let averaged: Vec<Tensor> = scores
                .iter()
                .map(|s| average_rows(s, vi * variants, variants, num_classes))
                .collect::<Result<_>>()?;
            let (_, ens) = predict(&averaged, PredictMode::Ensemble)?;
            let (_, cat) = predict(&averaged, PredictMode::Concat)?;
            for (k, a) in averaged.iter().enumerate() {
                per_glimpse[k] += usize::from(argmax(a.data()) == v.label);
            }
            class_total[v.label] += 1;
            if ens[0] == v.label {
                correct += 1;
                class_hit[v.label] += 1;
            }
            correct_concat += usize::from(cat[0] == v.label);
            predictions.push(ens[0]);
        }
    }
    let n = videos.len() as f64;
    let per_class: Vec<f64> = class_hit
        .iter()
        .zip(&class_total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_class
        .iter()
        .zip(&class_total)
        .filter(|(_, &t)| t > 0)
        .map(|(&a, _)| a)
        .collect();
    Ok(EvalReport {
        videos: videos.len(),
        inputs_per_video,
        top1: correct as f64 / n,
        top1_concat: correct_concat as f64 / n,
        mean_per_class: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        per_glimpse_top1: per_glimpse.iter().map(|&c| c as f64 / n).collect(),
        predictions,
    })
}

fn average_rows(scores: &Tensor, start: usize, count: usize, classes: usize) -> Result<Tensor> {
    let (rows, cols) = scores.as_matrix();
    if cols != classes || start + count > rows {
        return Err(Error::Data(format!("scorer returned shape {:?}", scores.shape())));
    }
    let mut out = vec![0.0; cols];
    for r in start..start + count {
        for (o, s) in out.iter_mut().zip(&scores.data()[r * cols..(r + 1) * cols]) {
            *o += s / count as f64;
        }
    }
    Ok(Tensor::new(&[1, cols], out)?)
}

/// Metrics CSV: `epoch,lr,train_loss,loss_<term>…,eval_top1`.
pub fn metrics_csv(loss: &LossSpec, history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss");
    for (k, _) in loss.enabled() {
        write!(out, ",loss_{}", k.token()).expect("write to string");
    }
    out.push_str(",eval_top1\n");
    for r in history {
        write!(out, "{},{},{:.8}", r.epoch, r.lr, r.train_loss).expect("write to string");
        for (_, t) in &r.terms {
            write!(out, ",{t:.8}").expect("write to string");
        }
        match r.eval_top1 {
            Some(a) => writeln!(out, ",{a:.6}"),
            None => writeln!(out, ","),
        }
        .expect("write to string");
    }
    out
}

pub fn write_metrics(path: &Path, loss: &LossSpec, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(loss, history)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_boundaries() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 2e-4);
        assert!((c.lr_at(30) - 2e-5).abs() < 1e-20);
        assert!((c.lr_at(59) - 2e-5).abs() < 1e-20);
        assert!((c.lr_at(60) - 2e-6).abs() < 1e-21);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.loss = "li+le".parse().unwrap();
        c.loss.le = Some(0.5);
        c.model.glimpses = 2;
        c.scales = vec![1.0, 0.75];
        let kv = KeyValues::parse(&c.to_kv().to_text()).unwrap();
        kv.check_known(TRAIN_KEYS).unwrap();
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut kv = KeyValues::new();
        kv.set("lr_decay", 0);
        assert!(TrainConfig::from_kv(&kv).is_err());
        let mut kv = KeyValues::new();
        kv.set("loss", "lq");
        assert!(TrainConfig::from_kv(&kv).is_err());
        let mut kv = KeyValues::new();
        kv.set("eval_crops", 3);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }
}
