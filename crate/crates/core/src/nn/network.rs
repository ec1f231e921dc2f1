use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, ConvShape};
use super::{NnError, Result, Scalar, Tensor};

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LrGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool2,
    /// Fully connected; the input is read flat.
    Dense {
        inputs: usize,
        units: usize,
    },
    Dropout {
        p: f32,
    },
    SoftmaxXent,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub lr_group: LrGroup,
    /// Multiplier on the group learning rate for this layer's weight tensor;
    /// the bias uses the plain group rate.
    #[serde(default = "unit_scale")]
    pub lr_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, lr_group: LrGroup) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            lr_group,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: LrGroup,
    /// Multiplier on the group rate (the layer's `lr_scale` for weights,
    /// 1 for biases).
    pub lr_scale: f64,
    pub tensor: Tensor<T>,
}

/// Name, routing and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub group: LrGroup,
    pub lr_scale: f64,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// Named parameter tensors in layer order: `<layer>.weight`, `<layer>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Param<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.tensors.iter().find(|p| p.name == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    lr_scale: p.lr_scale,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over name, shape and little-endian `f32` bytes of every tensor
    /// in `group` (all tensors when `None`), hex encoded.
    pub fn digest(&self, group: Option<LrGroup>) -> String {
        let mut h = Sha256::new();
        for p in self.tensors.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            h.update(p.name.as_bytes());
            for &d in &p.tensor.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.tensor.data {
                h.update(v.as_f32().to_le_bytes());
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Parameter gradients aligned with [`Params::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &Params<T>) -> Self {
        Grads {
            tensors: params.tensors.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMap {
    pub backbone: f64,
    pub head: f64,
}

impl LrMap {
    pub fn rate(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Backbone => self.backbone,
            LrGroup::Head => self.head,
        }
    }
}

/// `p ← p − lr(group(p)) · scale(p) · g` for every parameter, where
/// `scale` is the tensor's `lr_scale` (1 unless set).
pub fn sgd_step<T: Scalar>(params: &mut Params<T>, grads: &Grads<T>, lr: LrMap) -> Result<()> {
    if params.tensors.len() != grads.tensors.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradient tensors",
            params.tensors.len(),
            grads.tensors.len()
        )));
    }
    for (p, g) in params.tensors.iter().zip(&grads.tensors) {
        if p.tensor.len() != g.len() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient for {} has {} values",
                p.name,
                g.len()
            )));
        }
    }
    for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
        let rate = T::lit(lr.rate(p.group) * p.lr_scale);
        if rate == T::zero() {
            continue;
        }
        for (w, &d) in p.tensor.data.iter_mut().zip(g) {
            *w = *w - rate * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Caches activations for backward; dropout masks derive from `seed`.
    Train { seed: u64 },
    /// No caching, dropout is the identity.
    Eval,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Empty,
    Conv(Vec<T>),
    Relu(Vec<T>),
    Pool(Vec<u32>, usize),
    Dense(Vec<T>),
    Dropout(Vec<T>),
    Softmax,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
    pub probs: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    /// Argmax class; ties go to the lower index.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A validated layer stack over a fixed `[C, H, W]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Output shape of each layer.
    shapes: Vec<Vec<usize>>,
    /// Index of each parameterized layer's weight in `Params::tensors`.
    param_slot: Vec<Option<usize>>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let bad = |msg: String| Err(NnError::InvalidSpec(msg));
        let mut shape = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_slot = Vec::with_capacity(layers.len());
        let mut slot = 0;
        let mut seen_dense = false;
        for (i, layer) in layers.iter().enumerate() {
            let flat: usize = shape.iter().product();
            match layer.kind {
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return bad(format!(
                            "{}: expects {in_channels} channels, input {shape:?}",
                            layer.name
                        ));
                    }
                    if out_channels == 0 {
                        return bad(format!("{}: zero output channels", layer.name));
                    }
                    shape = vec![out_channels, shape[1], shape[2]];
                }
                LayerKind::Relu => {}
                LayerKind::MaxPool2 => {
                    if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) || shape[1] == 0 {
                        return bad(format!("{}: cannot pool {shape:?}", layer.name));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerKind::Dense { inputs, units } => {
                    if inputs != flat || units == 0 {
                        return bad(format!("{}: expects {inputs} inputs, got {flat}", layer.name));
                    }
                    seen_dense = true;
                    shape = vec![units];
                }
                LayerKind::Dropout { p } => {
                    let next_param = layers[i + 1..].iter().find(|l| l.kind.has_params());
                    let between = seen_dense && matches!(next_param.map(|l| l.kind), Some(LayerKind::Dense { .. }));
                    if !between {
                        return bad(format!("{}: dropout must sit between dense layers", layer.name));
                    }
                    if !(0.0..1.0).contains(&p) {
                        return bad(format!("{}: drop probability {p}", layer.name));
                    }
                }
                LayerKind::SoftmaxXent => {
                    if i + 1 != layers.len() || shape.len() != 1 {
                        return bad(format!(
                            "{}: softmax-xent must be the final layer on a vector",
                            layer.name
                        ));
                    }
                }
            }
            if layer.kind.has_params() {
                param_slot.push(Some(slot));
                slot += 2;
            } else {
                param_slot.push(None);
            }
            shapes.push(shape.clone());
        }
        if !matches!(layers.last().map(|l| l.kind), Some(LayerKind::SoftmaxXent)) {
            return bad("network must end with softmax-xent".into());
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
            param_slot,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Every parameter tensor in order.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for l in &self.layers {
            let (w, b, fan_in) = match l.kind {
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                } => (
                    vec![out_channels, in_channels, 3, 3],
                    vec![out_channels],
                    in_channels * 9,
                ),
                LayerKind::Dense { inputs, units } => (vec![units, inputs], vec![units], inputs),
                _ => continue,
            };
            for (suffix, shape, lr_scale) in [("weight", w, l.lr_scale), ("bias", b, 1.0)] {
                out.push(ParamSlot {
                    name: format!("{}.{suffix}", l.name),
                    group: l.lr_group,
                    lr_scale,
                    shape,
                    fan_in,
                });
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// He-uniform weights (`±sqrt(6 / fan_in)`), zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .param_layout()
            .into_iter()
            .map(|slot| {
                let tensor = if slot.name.ends_with(".weight") {
                    let bound = (6.0 / slot.fan_in as f64).sqrt();
                    Tensor::from_fn(&slot.shape, |_| T::lit(rng.gen_range(-bound..bound)))
                } else {
                    Tensor::zeros(&slot.shape)
                };
                Param {
                    name: slot.name,
                    group: slot.group,
                    lr_scale: slot.lr_scale,
                    tensor,
                }
            })
            .collect();
        Params { tensors }
    }

    /// Fails unless `params` has exactly this network's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != params.tensors.len() {
            return Err(NnError::ShapeMismatch(format!(
                "network has {} parameter tensors, params have {}",
                layout.len(),
                params.tensors.len()
            )));
        }
        for (slot, p) in layout.iter().zip(&params.tensors) {
            if slot.name != p.name || slot.shape != p.tensor.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, p.name, p.tensor.shape
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, params: &Params<T>, input: &[T], mode: Mode) -> Result<Trace<T>> {
        let (probs, caches) = self.forward_prefix(params, input, mode, self.layers.len())?;
        Ok(Trace { caches, probs })
    }

    /// Inference-mode input to the last dense layer (the penultimate
    /// feature vector).
    pub fn embed<T: Scalar>(&self, params: &Params<T>, input: &[T]) -> Result<Vec<T>> {
        let head = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .ok_or_else(|| NnError::ShapeMismatch("network has no dense layer".into()))?;
        Ok(self.forward_prefix(params, input, Mode::Eval, head)?.0)
    }

    /// Runs the first `end` layers.
    fn forward_prefix<T: Scalar>(
        &self,
        params: &Params<T>,
        input: &[T],
        mode: Mode,
        end: usize,
    ) -> Result<(Vec<T>, Vec<Cache<T>>)> {
        if input.len() != self.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, network expects {:?}",
                input.len(),
                self.input_shape
            )));
        }
        let train = matches!(mode, Mode::Train { .. });
        let mut x = input.to_vec();
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers[..end].iter().enumerate() {
            let (y, cache) = match layer.kind {
                LayerKind::Conv3x3 { .. } => {
                    let slot = self.param_slot[i].expect("conv has params");
                    let cs = ConvShape {
                        channels: shape[0],
                        height: shape[1],
                        width: shape[2],
                    };
                    let padded = layers::pad_input(&x, cs);
                    let y = layers::conv_forward_padded(
                        &padded,
                        cs,
                        &params.tensors[slot].tensor.data,
                        &params.tensors[slot + 1].tensor.data,
                    );
                    (y, if train { Cache::Conv(padded) } else { Cache::Empty })
                }
                LayerKind::Relu => {
                    let y = layers::relu_forward(&x);
                    let cache = if train { Cache::Relu(y.clone()) } else { Cache::Empty };
                    (y, cache)
                }
                LayerKind::MaxPool2 => {
                    let (y, arg) = layers::maxpool_forward(&x, shape[0], shape[1], shape[2]);
                    (y, if train { Cache::Pool(arg, x.len()) } else { Cache::Empty })
                }
                LayerKind::Dense { .. } => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let y = layers::dense_forward(
                        &x,
                        &params.tensors[slot].tensor.data,
                        &params.tensors[slot + 1].tensor.data,
                    );
                    (y, if train { Cache::Dense(x) } else { Cache::Empty })
                }
                LayerKind::Dropout { p } => match mode {
                    Mode::Train { seed } => {
                        let mask = layers::dropout_mask(x.len(), p, seed, i as u64);
                        (layers::apply_mask(&x, &mask), Cache::Dropout(mask))
                    }
                    Mode::Eval => (x, Cache::Empty),
                },
                LayerKind::SoftmaxXent => {
                    let p = layers::softmax(&x);
                    (p, if train { Cache::Softmax } else { Cache::Empty })
                }
            };
            x = y;
            shape.clone_from(&self.shapes[i]);
            caches.push(cache);
        }
        Ok((x, caches))
    }

    /// Loss and parameter gradients for one sample from a training trace.
    pub fn backward<T: Scalar>(&self, params: &Params<T>, trace: &Trace<T>, target: usize) -> Result<(T, Grads<T>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(NnError::MissingForwardCache(trace.caches.len()));
        }
        if target >= self.n_classes() {
            return Err(NnError::ShapeMismatch(format!(
                "target {target} for {} classes",
                self.n_classes()
            )));
        }
        let mut grads = Grads::zeros_like(params);
        let mut loss = T::zero();
        let mut d: Vec<T> = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0;
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            d = match (&self.layers[i].kind, &trace.caches[i]) {
                (LayerKind::SoftmaxXent, Cache::Softmax) => {
                    let (l, g) = layers::softmax_xent(&trace.probs, target);
                    loss = l;
                    g
                }
                (LayerKind::Dropout { .. }, Cache::Dropout(mask)) => layers::apply_mask(&d, mask),
                (LayerKind::Dense { .. }, Cache::Dense(x)) => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let (dw, db, dx) = layers::dense_backward(x, &params.tensors[slot].tensor.data, &d, need_input);
                    grads.tensors[slot] = dw;
                    grads.tensors[slot + 1] = db;
                    dx.unwrap_or_default()
                }
                (LayerKind::Relu, Cache::Relu(y)) => layers::relu_backward(y, &d),
                (LayerKind::MaxPool2, Cache::Pool(arg, len)) => layers::maxpool_backward(arg, &d, *len),
                (LayerKind::Conv3x3 { .. }, Cache::Conv(padded)) => {
                    let slot = self.param_slot[i].expect("conv has params");
                    let cs = ConvShape {
                        channels: in_shape[0],
                        height: in_shape[1],
                        width: in_shape[2],
                    };
                    let (dw, db, dx) =
                        layers::conv_backward_padded(padded, cs, &params.tensors[slot].tensor.data, &d, need_input);
                    grads.tensors[slot] = dw;
                    grads.tensors[slot + 1] = db;
                    dx.unwrap_or_default()
                }
                _ => return Err(NnError::MissingForwardCache(i)),
            };
        }
        Ok((loss, grads))
    }

    /// Loss of a single sample, no gradients.
    pub fn loss<T: Scalar>(&self, params: &Params<T>, input: &[T], target: usize, mode: Mode) -> Result<T> {
        let trace = self.forward(params, input, mode)?;
        Ok(layers::softmax_xent(&trace.probs, target).0)
    }

    pub fn predict<T: Scalar>(&self, params: &Params<T>, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(params, input, Mode::Eval)?.probs)
    }
}

/// Samples per partial gradient sum in [`batch_gradient`].
const SUM_CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean_loss: f64,
    pub correct: usize,
    pub grads: Grads<T>,
}

/// Mean loss and mean gradient over a minibatch. Chunks of samples are
/// evaluated in parallel with a fixed summation order, so the result does
/// not depend on the thread count. `seeds[i]` drives the
/// dropout masks of sample `i`.
pub fn batch_gradient<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    inputs: &[&[T]],
    targets: &[usize],
    seeds: &[u64],
) -> Result<BatchStats<T>> {
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != seeds.len() {
        return Err(NnError::ShapeMismatch(format!(
            "batch of {} inputs, {} targets, {} seeds",
            inputs.len(),
            targets.len(),
            seeds.len()
        )));
    }
    // Samples are summed sequentially within fixed-size chunks and the
    // chunk sums are added in chunk order, so the association depends only
    // on the batch size.
    let per_chunk: Vec<Result<(f64, usize, Grads<T>)>> = (0..inputs.len())
        .collect::<Vec<_>>()
        .par_chunks(SUM_CHUNK)
        .map(|idx| {
            let mut sum = Grads::zeros_like(params);
            let (mut loss_sum, mut correct) = (0.0, 0);
            for &i in idx {
                let trace = net.forward(params, inputs[i], Mode::Train { seed: seeds[i] })?;
                correct += (trace.predicted() == targets[i]) as usize;
                let (loss, grads) = net.backward(params, &trace, targets[i])?;
                loss_sum += loss.as_f64();
                sum.add_assign(&grads);
            }
            Ok((loss_sum, correct, sum))
        })
        .collect();

    let mut total = Grads::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for r in per_chunk {
        let (l, c, g) = r?;
        loss_sum += l;
        correct += c;
        total.add_assign(&g);
    }
    let n = inputs.len();
    total.scale(T::lit(1.0 / n as f64));
    Ok(BatchStats {
        mean_loss: loss_sum / n as f64,
        correct,
        grads: total,
    })
}
