//! MiniVGG construction, pretext pretraining, head surgery and fine-tuning
//! with a rolling-window early stop.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    batch_gradient, mix_seed, sgd_step, LayerKind, LayerSpec, LrGroup, LrMap, Network, NnError, Param, Params, Tensor,
};

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error("canvas {canvas} cannot pass through {pools} 2x2 pools")]
    IncompatibleDims { canvas: usize, pools: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TransferError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_canvas: usize,
    pub input_bands: usize,
    /// `(conv layers, channels)` per block; every block ends in a 2x2 pool.
    pub conv_blocks: Vec<(usize, usize)>,
    /// Dense widths; the last one is the class count.
    pub dense_units: Vec<usize>,
    pub n_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
}

fn default_dropout() -> f32 {
    0.5
}

impl ModelConfig {
    /// Desk-scale preset: 64 px canvas, three two-conv blocks (8/16/32
    /// channels), dense 64-64-classes.
    pub fn desk(input_bands: usize, n_classes: usize) -> Self {
        ModelConfig {
            input_canvas: 64,
            input_bands,
            conv_blocks: vec![(2, 8), (2, 16), (2, 32)],
            dense_units: vec![64, 64, n_classes],
            n_classes,
            dropout: 0.5,
        }
    }

    /// VGG-19 layout: 224 px canvas, 16 conv layers in five blocks, dense
    /// 4096-4096-classes.
    pub fn fidelity(input_bands: usize, n_classes: usize) -> Self {
        ModelConfig {
            input_canvas: 224,
            input_bands,
            conv_blocks: vec![(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)],
            dense_units: vec![4096, 4096, n_classes],
            n_classes,
            dropout: 0.5,
        }
    }

    pub fn with_bands(&self, input_bands: usize) -> Self {
        ModelConfig {
            input_bands,
            ..self.clone()
        }
    }

    pub fn with_classes(&self, n_classes: usize) -> Self {
        let mut dense_units = self.dense_units.clone();
        if let Some(last) = dense_units.last_mut() {
            *last = n_classes;
        }
        ModelConfig {
            n_classes,
            dense_units,
            ..self.clone()
        }
    }
}

/// Layer stack for `cfg`: `conv{b}_{i}` + ReLU per conv, `pool{b}` per
/// block, `fc{i}` dense layers with ReLU and dropout after the first two,
/// softmax cross-entropy on top. Only the last dense layer is `Head`.
pub fn build_layers(cfg: &ModelConfig) -> Result<Vec<LayerSpec>> {
    let pools = cfg.conv_blocks.len();
    if cfg.input_canvas == 0 || pools >= usize::BITS as usize || !cfg.input_canvas.is_multiple_of(1 << pools) {
        return Err(TransferError::IncompatibleDims {
            canvas: cfg.input_canvas,
            pools,
        });
    }
    if cfg.input_bands == 0 || cfg.n_classes < 2 {
        return Err(TransferError::InvalidConfig(
            "need at least one band and two classes".into(),
        ));
    }
    if cfg.dense_units.last() != Some(&cfg.n_classes) {
        return Err(TransferError::InvalidConfig(format!(
            "final dense width {:?} must equal n_classes {}",
            cfg.dense_units.last(),
            cfg.n_classes
        )));
    }
    if cfg.conv_blocks.iter().any(|&(n, c)| n == 0 || c == 0) || cfg.dense_units.contains(&0) {
        return Err(TransferError::InvalidConfig("empty conv block or dense layer".into()));
    }

    let bb = LrGroup::Backbone;
    let mut layers = Vec::new();
    let mut channels = cfg.input_bands;
    for (bi, &(convs, width)) in cfg.conv_blocks.iter().enumerate() {
        for ci in 0..convs {
            let name = format!("{}_{}", bi + 1, ci + 1);
            layers.push(LayerSpec::new(
                format!("conv{name}"),
                LayerKind::Conv3x3 {
                    in_channels: channels,
                    out_channels: width,
                },
                bb,
            ));
            layers.push(LayerSpec::new(format!("relu{name}"), LayerKind::Relu, bb));
            channels = width;
        }
        layers.push(LayerSpec::new(format!("pool{}", bi + 1), LayerKind::MaxPool2, bb));
    }
    let side = cfg.input_canvas >> pools;
    let mut inputs = channels * side * side;
    let last = cfg.dense_units.len() - 1;
    for (i, &units) in cfg.dense_units.iter().enumerate() {
        let group = if i == last { LrGroup::Head } else { bb };
        layers.push(LayerSpec::new(
            format!("fc{}", i + 1),
            LayerKind::Dense { inputs, units },
            group,
        ));
        if i < last {
            layers.push(LayerSpec::new(format!("relu_fc{}", i + 1), LayerKind::Relu, bb));
            if i < 2 && cfg.dropout > 0.0 {
                layers.push(LayerSpec::new(
                    format!("drop{}", i + 1),
                    LayerKind::Dropout { p: cfg.dropout },
                    bb,
                ));
            }
        }
        inputs = units;
    }
    layers.push(LayerSpec::new("loss", LayerKind::SoftmaxXent, LrGroup::Head));
    Ok(layers)
}

pub fn build_network(cfg: &ModelConfig) -> Result<Network> {
    let layers = build_layers(cfg)?;
    Ok(Network::new(
        [cfg.input_bands, cfg.input_canvas, cfg.input_canvas],
        layers,
    )?)
}

/// Network plus He-initialized `f32` parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(Network, Params<f32>)> {
    let net = build_network(cfg)?;
    let params = net.init_params(seed);
    Ok((net, params))
}

fn head_layer_index(net: &Network) -> Result<usize> {
    net.layers
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
        .ok_or_else(|| TransferError::InvalidConfig("network has no dense layer".into()))
}

/// Swaps the final dense layer for a freshly initialized `n_classes`-wide
/// one. All other tensors are carried over unchanged.
pub fn replace_head(
    net: &Network,
    params: &Params<f32>,
    n_classes: usize,
    seed: u64,
) -> Result<(Network, Params<f32>)> {
    net.check_params(params)?;
    let hi = head_layer_index(net)?;
    let mut layers = net.layers.clone();
    let LayerKind::Dense { inputs, .. } = layers[hi].kind else {
        unreachable!("head index points at a dense layer")
    };
    layers[hi].kind = LayerKind::Dense {
        inputs,
        units: n_classes,
    };
    layers[hi].lr_group = LrGroup::Head;
    let new_net = Network::new(net.input_shape, layers)?;
    let fresh: Params<f32> = new_net.init_params(seed);
    let head_names = [
        format!("{}.weight", new_net.layers[hi].name),
        format!("{}.bias", new_net.layers[hi].name),
    ];
    let tensors = fresh
        .tensors
        .into_iter()
        .map(|p| {
            if head_names.contains(&p.name) {
                p
            } else {
                params.get(&p.name).cloned().expect("non-head tensors are shared")
            }
        })
        .collect();
    Ok((new_net, Params { tensors }))
}

/// Re-targets the first conv layer to `bands` input channels. Each new
/// channel gets the sum of the old per-channel kernels divided by `bands`,
/// so an input whose channels are all equal produces the same response as
/// the original network fed that image on every one of its channels. The
/// layer's weight `lr_scale` is divided by the same channel ratio, so one
/// SGD step on a channel-replicated input also moves the response exactly
/// as it would have moved in the original network.
pub fn adapt_input_bands(net: &Network, params: &Params<f32>, bands: usize) -> Result<(Network, Params<f32>)> {
    net.check_params(params)?;
    let first = net
        .layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Conv3x3 { .. }))
        .ok_or_else(|| TransferError::InvalidConfig("network has no conv layer".into()))?;
    let LayerKind::Conv3x3 {
        in_channels,
        out_channels,
    } = net.layers[first].kind
    else {
        unreachable!()
    };
    if in_channels == bands {
        return Ok((net.clone(), params.clone()));
    }
    let mut layers = net.layers.clone();
    layers[first].kind = LayerKind::Conv3x3 {
        in_channels: bands,
        out_channels,
    };
    // Every inflated channel receives its own gradient, so the layer's
    // response would move `bands / in_channels` times faster per step.
    let lr_scale = layers[first].lr_scale * in_channels as f64 / bands as f64;
    layers[first].lr_scale = lr_scale;
    let [_, h, w] = net.input_shape;
    let new_net = Network::new([bands, h, w], layers)?;
    let wname = format!("{}.weight", net.layers[first].name);
    let old = &params.get(&wname).expect("conv weight present").tensor;
    let scale = 1.0 / bands as f32;
    let mut data = Vec::with_capacity(out_channels * bands * 9);
    for k in 0..out_channels {
        let mut summed = [0f32; 9];
        for c in 0..in_channels {
            for (t, s) in summed.iter_mut().enumerate() {
                *s += old.data[(k * in_channels + c) * 9 + t];
            }
        }
        for _ in 0..bands {
            data.extend(summed.iter().map(|v| v * scale));
        }
    }
    let tensors = params
        .tensors
        .iter()
        .map(|p| {
            if p.name == wname {
                Param {
                    name: p.name.clone(),
                    group: p.group,
                    lr_scale,
                    tensor: Tensor::new(vec![out_channels, bands, 3, 3], data.clone()).expect("shape"),
                }
            } else {
                p.clone()
            }
        })
        .collect();
    Ok((new_net, Params { tensors }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub early_stop_window: usize,
    pub early_stop_threshold: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Hold backbone tensors fixed (ablation).
    #[serde(default)]
    pub freeze_backbone: bool,
    /// Shift and scale each input band to zero mean, unit variance using
    /// training-set statistics.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone_lr: 0.0001,
            head_lr: 0.002,
            minibatch: 90,
            max_epochs: 500,
            early_stop_window: 50,
            early_stop_threshold: 0.98,
            rng_seed: 0,
            freeze_backbone: false,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TransferError::InvalidConfig(m.into()));
        if !(self.backbone_lr >= 0.0 && self.head_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.minibatch == 0 || self.max_epochs == 0 || self.early_stop_window == 0 {
            return bad("minibatch, max_epochs and early_stop_window must be >= 1");
        }
        if !(self.early_stop_threshold > 0.0 && self.early_stop_threshold <= 1.0) {
            return bad("early_stop_threshold must lie in (0, 1]");
        }
        Ok(())
    }

    /// Desk-scale fine-tuning: the default schedule with both learning
    /// rates raised 50x, keeping the 20:1 head-to-backbone ratio.
    pub fn desk() -> Self {
        TrainConfig {
            backbone_lr: 0.005,
            head_lr: 0.1,
            ..TrainConfig::default()
        }
    }

    /// Pretext pretraining: one learning rate throughout, small minibatches
    /// and a fixed epoch budget.
    pub fn pretext() -> Self {
        TrainConfig {
            backbone_lr: 0.03,
            head_lr: 0.03,
            minibatch: 32,
            max_epochs: 40,
            early_stop_window: 50,
            early_stop_threshold: 0.99,
            rng_seed: 1,
            freeze_backbone: false,
            standardize: false,
        }
    }

    pub fn lr_map(&self) -> LrMap {
        LrMap {
            backbone: if self.freeze_backbone { 0.0 } else { self.backbone_lr },
            head: self.head_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Minibatch training accuracy per iteration.
    pub accuracies: Vec<f64>,
    pub losses: Vec<f64>,
    pub stop_reason: StopReason,
    pub iterations_run: usize,
    pub epochs_run: usize,
    pub wall_time: f64,
}

/// Rolling-window early stop: fires at the first iteration `t >= window`
/// whose last `window` accuracies average at least `threshold`.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    window: usize,
    threshold: f64,
    recent: VecDeque<f64>,
}

impl EarlyStop {
    pub fn new(window: usize, threshold: f64) -> Self {
        EarlyStop {
            window,
            threshold,
            recent: VecDeque::with_capacity(window + 1),
        }
    }

    /// Records one iteration's accuracy; true when training should stop.
    pub fn push(&mut self, accuracy: f64) -> bool {
        self.recent.push_back(accuracy);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        self.recent.len() == self.window && self.recent.iter().sum::<f64>() / self.window as f64 >= self.threshold
    }
}

/// Minibatch index lists for one epoch: a seeded shuffle cut into
/// `minibatch`-sized chunks with the trailing partial chunk dropped. A set
/// smaller than one minibatch forms a single minibatch.
pub fn epoch_batches(n: usize, minibatch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    if n <= minibatch {
        return vec![order];
    }
    order.chunks_exact(minibatch).map(<[usize]>::to_vec).collect()
}

/// Outcome of one optimizer iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub accuracy: f64,
    pub loss: f64,
}

/// The training schedule without the model: iterates epochs and
/// minibatches, calls `step` once per minibatch with `(iteration, batch)`
/// and applies the early-stop rule to the returned accuracies.
pub fn run_schedule<E>(
    n: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(usize, &[usize]) -> std::result::Result<StepOutcome, E>,
) -> std::result::Result<TrainHistory, E> {
    let start = Instant::now();
    let mut stopper = EarlyStop::new(cfg.early_stop_window, cfg.early_stop_threshold);
    let mut accuracies = Vec::new();
    let mut losses = Vec::new();
    let mut reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        for batch in epoch_batches(n, cfg.minibatch, cfg.rng_seed, epoch) {
            let out = step(accuracies.len(), &batch)?;
            accuracies.push(out.accuracy);
            losses.push(out.loss);
            if stopper.push(out.accuracy) {
                reason = StopReason::EarlyStop;
                break 'epochs;
            }
        }
    }
    Ok(TrainHistory {
        iterations_run: accuracies.len(),
        accuracies,
        losses,
        stop_reason: reason,
        epochs_run,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn check_training_set(inputs: &[&[f32]], targets: &[usize], classes: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(TransferError::DegenerateDataset(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let mut seen = vec![false; classes];
    for &t in targets {
        if t >= classes {
            return Err(TransferError::DegenerateDataset(format!(
                "label {t} for {classes} classes"
            )));
        }
        seen[t] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(TransferError::DegenerateDataset(
            "training set needs at least two classes".into(),
        ));
    }
    Ok(())
}

/// Minibatch SGD with per-group learning rates and the early-stop rule.
pub fn train(
    net: &Network,
    params: &mut Params<f32>,
    inputs: &[&[f32]],
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_training_set(inputs, targets, net.n_classes())?;
    let lr = cfg.lr_map();
    let n = inputs.len() as u64;
    run_schedule(inputs.len(), cfg, |iteration, batch| {
        let xs: Vec<&[f32]> = batch.iter().map(|&i| inputs[i]).collect();
        let ts: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
        let seeds: Vec<u64> = (0..batch.len() as u64)
            .map(|j| mix_seed(cfg.rng_seed ^ 0xd0d0, iteration as u64 * n + j))
            .collect();
        let stats = batch_gradient(net, params, &xs, &ts, &seeds)?;
        sgd_step(params, &stats.grads, lr)?;
        Ok::<_, TransferError>(StepOutcome {
            accuracy: stats.correct as f64 / batch.len() as f64,
            loss: stats.mean_loss,
        })
    })
}

/// Per-band affine input normalization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScaler {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl BandScaler {
    /// Fits mean and reciprocal standard deviation per band over every pixel
    /// of every CHW input. Constant bands get scale 1.
    pub fn fit(inputs: &[&[f32]], bands: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(TransferError::EmptyDataset);
        }
        let len = inputs[0].len();
        if bands == 0 || !len.is_multiple_of(bands) || inputs.iter().any(|x| x.len() != len) {
            return Err(TransferError::InvalidConfig(format!(
                "inputs of {len} values do not split into {bands} bands"
            )));
        }
        let plane = len / bands;
        let count = (plane * inputs.len()) as f64;
        let mut mean = Vec::with_capacity(bands);
        let mut scale = Vec::with_capacity(bands);
        for b in 0..bands {
            let band = || {
                inputs
                    .iter()
                    .flat_map(|x| &x[b * plane..(b + 1) * plane])
                    .map(|&v| v as f64)
            };
            let m = band().sum::<f64>() / count;
            let var = band().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean.push(m as f32);
            scale.push(if var > 0.0 { (1.0 / var.sqrt()) as f32 } else { 1.0 });
        }
        Ok(BandScaler { mean, scale })
    }

    pub fn apply(&self, input: &[f32]) -> Vec<f32> {
        let plane = input.len() / self.mean.len();
        input
            .chunks(plane)
            .zip(self.mean.iter().zip(&self.scale))
            .flat_map(|(c, (&m, &s))| c.iter().map(move |&v| (v - m) * s))
            .collect()
    }
}

/// Fraction of argmax predictions equal to the target; ties resolve to the
/// lower class index.
pub fn evaluate(net: &Network, params: &Params<f32>, inputs: &[&[f32]], targets: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    let preds = predict_all(net, params, inputs)?;
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / inputs.len() as f64)
}

pub fn predict_all(net: &Network, params: &Params<f32>, inputs: &[&[f32]]) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    inputs
        .par_iter()
        .map(|x| {
            let p = net.predict(params, x)?;
            Ok(nn_argmax(&p))
        })
        .collect()
}

fn nn_argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub classes: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validation_accuracy: f64,
    pub history: TrainHistory,
}

/// Pretrains a network on a labeled pretext set. Every fifth sample of each
/// class (by position) is held out for validation.
pub fn pretrain_backbone(
    cfg: &ModelConfig,
    inputs: &[&[f32]],
    targets: &[usize],
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(Network, Params<f32>, PretrainReport)> {
    let classes = targets.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut v = targets.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct < 2 {
        return Err(TransferError::DegenerateDataset(format!(
            "pretext set has {distinct} class(es)"
        )));
    }
    let model_cfg = cfg.with_classes(classes);
    let (net, mut params) = build_model(&model_cfg, init_seed)?;

    let mut per_class_seen = vec![0usize; classes];
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, &t) in targets.iter().enumerate() {
        per_class_seen[t] += 1;
        if per_class_seen[t] % 5 == 0 {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    let tr_x: Vec<&[f32]> = tr.iter().map(|&i| inputs[i]).collect();
    let tr_t: Vec<usize> = tr.iter().map(|&i| targets[i]).collect();
    let history = train(&net, &mut params, &tr_x, &tr_t, train_cfg)?;
    let va_x: Vec<&[f32]> = va.iter().map(|&i| inputs[i]).collect();
    let va_t: Vec<usize> = va.iter().map(|&i| targets[i]).collect();
    let validation_accuracy = if va.is_empty() {
        0.0
    } else {
        evaluate(&net, &params, &va_x, &va_t)?
    };
    let report = PretrainReport {
        classes,
        train_samples: tr.len(),
        validation_samples: va.len(),
        validation_accuracy,
        history,
    };
    Ok((net, params, report))
}

/// Turns a pretrained network into a fine-tunable `n_classes` model on
/// `bands` input channels.
pub fn prepare_finetune(
    pretrained_net: &Network,
    pretrained: &Params<f32>,
    bands: usize,
    n_classes: usize,
    head_seed: u64,
) -> Result<(Network, Params<f32>)> {
    let (net, params) = adapt_input_bands(pretrained_net, pretrained, bands)?;
    replace_head(&net, &params, n_classes, head_seed)
}
