//! Fault-free training: Glorot-uniform init, inverted dropout, categorical
//! cross-entropy and Adadelta over shuffled minibatches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::clean_error;
use crate::nn::{propagate, softmax, DropoutSource, Layer, NoFaults, StageTrace, TrainedModel};
use crate::rng::{Stream, StreamKey};
use crate::spec::{LayerShape, ModelSpec};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_conv: f64,
    pub dropout_dense: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 15,
            dropout_conv: 0.25,
            dropout_dense: 0.5,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        for (name, rate) in [("dropout_conv", self.dropout_conv), ("dropout_dense", self.dropout_dense)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} = {rate} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) || self.adadelta_eps.is_nan() || self.adadelta_eps <= 0.0 {
            return bad("adadelta needs rho in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Tensor of i.i.d. draws from U(-limit, limit), limit = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Domain("glorot fans must be >= 1".into()));
    }
    let limit = glorot_limit(fan_in, fan_out);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..=limit)).collect())
}

/// Fresh model: Glorot weights, zero biases. Stage `i` draws from its own substream.
pub fn init_model(spec: ModelSpec, seed: u64) -> TrainedModel {
    let key = StreamKey::root(seed).named("init");
    let layers = spec
        .layer_plan()
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let (fan_in, fan_out) = shape.fans();
            Layer {
                weights: glorot_init(shape.weight_shape(), fan_in, fan_out, &mut key.child(i as u64).rng())
                    .expect("plan fans are positive"),
                bias: Tensor::zeros(vec![shape.bias_len()]),
            }
        })
        .collect();
    TrainedModel::new(spec, layers).expect("shapes come from the plan")
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else 1/(1-rate).
pub fn dropout_multipliers<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let m = dropout_multipliers(x.len(), rate, rng);
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(m).map(|(v, k)| v * k).collect(),
    )
}

/// Inverted dropout with an explicit keep mask.
pub fn apply_dropout_mask(x: &Tensor, keep: &[bool], rate: f64) -> Result<Tensor> {
    check_rate(rate)?;
    if keep.len() != x.len() {
        return Err(Error::shape(x.shape(), keep.len()));
    }
    let scale = 1.0 / (1.0 - rate);
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(keep)
            .map(|(v, &k)| if k { v * scale } else { 0.0 })
            .collect(),
    )
}

/// Mean over rows of `-ln(max(p_true, 1e-12))`.
pub fn crossentropy_loss(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() || probs.shape().len() != 2 {
        return Err(Error::shape(targets.shape(), probs.shape()));
    }
    let (rows, classes) = (probs.shape()[0], probs.shape()[1]);
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .chunks(classes)
        .zip(targets.data().chunks(classes))
        .map(|(p, t)| sample_loss(p, t))
        .sum();
    Ok(total / rows as f64)
}

fn sample_loss(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t > 0.0 { -t * p.max(PROB_FLOOR).ln() } else { 0.0 })
        .sum()
}

/// Per-stage dropout during training: conv stages use `conv_rate`, hidden
/// dense stages `dense_rate`. The first stage and the classifier never drop.
pub struct TrainingDropout<'a> {
    pub rng: &'a mut Stream,
    pub conv_rate: f64,
    pub dense_rate: f64,
}

impl DropoutSource for TrainingDropout<'_> {
    fn multipliers(&mut self, _stage: usize, is_conv: bool, len: usize) -> Option<Vec<f64>> {
        let rate = if is_conv { self.conv_rate } else { self.dense_rate };
        (rate > 0.0).then(|| dropout_multipliers(len, rate, self.rng))
    }
}

/// Replays masks in the order they were requested; lets a gradient be
/// checked against finite differences with dropout held fixed.
#[derive(Debug, Clone, Default)]
pub struct FrozenDropout {
    masks: Vec<Option<Vec<f64>>>,
    cursor: usize,
}

impl FrozenDropout {
    pub fn record(source: &mut dyn DropoutSource) -> Recorder<'_> {
        Recorder {
            inner: source,
            masks: Vec::new(),
        }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

impl DropoutSource for FrozenDropout {
    fn multipliers(&mut self, _: usize, _: bool, len: usize) -> Option<Vec<f64>> {
        let m = self.masks[self.cursor % self.masks.len()].clone();
        self.cursor += 1;
        debug_assert!(m.as_ref().is_none_or(|m| m.len() == len));
        m
    }
}

pub struct Recorder<'a> {
    inner: &'a mut dyn DropoutSource,
    masks: Vec<Option<Vec<f64>>>,
}

impl Recorder<'_> {
    pub fn finish(self) -> FrozenDropout {
        FrozenDropout {
            masks: self.masks,
            cursor: 0,
        }
    }
}

impl DropoutSource for Recorder<'_> {
    fn multipliers(&mut self, stage: usize, is_conv: bool, len: usize) -> Option<Vec<f64>> {
        let m = self.inner.multipliers(stage, is_conv, len);
        self.masks.push(m.clone());
        m
    }
}

/// Borrowed minibatch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub targets: Vec<&'a [f64]>,
}

impl<'a> Batch<'a> {
    pub fn from_dataset(data: &'a Dataset, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| data.image(i)).collect(),
            targets: indices.iter().map(|&i| data.target(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(model: &TrainedModel) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| Layer {
                    weights: Tensor::zeros(l.weights.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }
}

fn check_batch(model: &TrainedModel, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let spec = model.spec();
    let (n_in, n_out) = (spec.input().len(), spec.num_classes());
    for (x, t) in batch.inputs.iter().zip(&batch.targets) {
        if x.len() != n_in || t.len() != n_out {
            return Err(Error::shape(
                format!("inputs of {n_in}, targets of {n_out}"),
                format!("inputs of {}, targets of {}", x.len(), t.len()),
            ));
        }
    }
    if batch.inputs.len() != batch.targets.len() {
        return Err(Error::shape(batch.inputs.len(), batch.targets.len()));
    }
    Ok(())
}

/// Mean batch loss under the given dropout (no gradients).
pub fn batch_loss(model: &TrainedModel, batch: &Batch, mut dropout: Option<&mut (dyn DropoutSource + '_)>) -> Result<f64> {
    check_batch(model, batch)?;
    let total: f64 = batch
        .inputs
        .iter()
        .zip(&batch.targets)
        .map(|(x, t)| {
            let logits = propagate(model, x, &mut NoFaults, dropout.as_deref_mut(), None);
            sample_loss(&softmax(&logits), t)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of the mean batch loss, using the recipe's dropout drawn from `rng`.
pub fn backward(model: &TrainedModel, batch: &Batch, cfg: &TrainConfig, rng: &mut Stream) -> Result<(Gradients, f64)> {
    let mut dropout = TrainingDropout {
        rng,
        conv_rate: cfg.dropout_conv,
        dense_rate: cfg.dropout_dense,
    };
    backward_with(model, batch, Some(&mut dropout))
}

/// Gradient of the mean batch loss and the loss itself. Dropout masks, if
/// any, are treated as constants.
pub fn backward_with(
    model: &TrainedModel,
    batch: &Batch,
    mut dropout: Option<&mut (dyn DropoutSource + '_)>,
) -> Result<(Gradients, f64)> {
    check_batch(model, batch)?;
    let plan = model.plan();
    let clip = model.spec().clip();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut trace = Vec::with_capacity(plan.len());

    for (x, target) in batch.inputs.iter().zip(&batch.targets) {
        trace.clear();
        let logits = propagate(model, x, &mut NoFaults, dropout.as_deref_mut(), Some(&mut trace));
        let probs = softmax(&logits);
        loss += sample_loss(&probs, target);

        let mut delta: Vec<f64> = probs.iter().zip(*target).map(|(p, t)| (p - t) * scale).collect();
        for stage in (0..plan.len()).rev() {
            let st = &trace[stage];
            if stage + 1 != plan.len() {
                delta = through_activation(st, delta, clip);
            }
            delta = linear_backward(&plan[stage], &model.layers()[stage], &mut grads.layers[stage], st, &delta, stage > 0);
        }
    }
    Ok((grads, loss * scale))
}

/// Map a gradient w.r.t. the stage output back to its pre-activation.
fn through_activation(st: &StageTrace, mut delta: Vec<f64>, clip: f64) -> Vec<f64> {
    if let Some(m) = &st.dropout {
        for (d, k) in delta.iter_mut().zip(m) {
            *d *= k;
        }
    }
    if let Some(argmax) = &st.argmax {
        let mut unpooled = vec![0.0; st.pre_activation.len()];
        for (&src, &d) in argmax.iter().zip(&delta) {
            unpooled[src] += d;
        }
        delta = unpooled;
    }
    for (d, &z) in delta.iter_mut().zip(&st.pre_activation) {
        if !(z > 0.0 && z < clip) {
            *d = 0.0;
        }
    }
    delta
}

/// Accumulate parameter gradients; return the input gradient if requested.
fn linear_backward(
    shape: &LayerShape,
    layer: &Layer,
    grad: &mut Layer,
    st: &StageTrace,
    delta: &[f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let x = &st.input;
    let w = layer.weights.data();
    let mut dx = if want_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    match *shape {
        LayerShape::Dense { inputs, .. } => {
            let dw = grad.weights.data_mut();
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &xv) in dw[i * inputs..(i + 1) * inputs].iter_mut().zip(x) {
                    *g += d * xv;
                }
                if want_input_grad {
                    for (g, &wv) in dx.iter_mut().zip(&w[i * inputs..(i + 1) * inputs]) {
                        *g += d * wv;
                    }
                }
            }
            for (g, &d) in grad.bias.data_mut().iter_mut().zip(delta) {
                *g += d;
            }
        }
        LayerShape::Conv {
            cols,
            channels,
            kernel: k,
            maps,
            ..
        } => {
            let (out_rows, out_cols) = shape.conv_out().unwrap();
            let db = grad.bias.data_mut();
            for pos in 0..out_rows * out_cols {
                for (g, &d) in db.iter_mut().zip(&delta[pos * maps..(pos + 1) * maps]) {
                    *g += d;
                }
            }
            let dw = grad.weights.data_mut();
            for oy in 0..out_rows {
                for ox in 0..out_cols {
                    let d = &delta[(oy * out_cols + ox) * maps..][..maps];
                    if d.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = ((oy + ky) * cols + ox + kx) * channels;
                            let tap = (ky * k + kx) * channels * maps;
                            for c in 0..channels {
                                let xv = x[at + c];
                                let row = tap + c * maps;
                                for (g, &dv) in dw[row..row + maps].iter_mut().zip(d) {
                                    *g += xv * dv;
                                }
                                if want_input_grad {
                                    dx[at + c] += w[row..row + maps].iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adadelta accumulators, one buffer per parameter tensor (W0, b0, W1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub eg2: Vec<Vec<f64>>,
    pub edx2: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(model: &TrainedModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .layers()
            .iter()
            .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
            .collect();
        Self {
            eg2: zeros.clone(),
            edx2: zeros,
        }
    }
}

/// One Adadelta step on a scalar; returns the applied update.
#[inline]
pub fn adadelta_step(param: &mut f64, grad: f64, eg2: &mut f64, edx2: &mut f64, rho: f64, eps: f64) -> f64 {
    *eg2 = rho * *eg2 + (1.0 - rho) * grad * grad;
    let delta = -((*edx2 + eps).sqrt() / (*eg2 + eps).sqrt()) * grad;
    *edx2 = rho * *edx2 + (1.0 - rho) * delta * delta;
    *param += delta;
    delta
}

pub fn adadelta_update(
    model: &mut TrainedModel,
    grads: &Gradients,
    state: &mut AdadeltaState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let params = model
        .layers_mut()
        .iter_mut()
        .flat_map(|l| [&mut l.weights, &mut l.bias]);
    let gs = grads.layers.iter().flat_map(|l| [&l.weights, &l.bias]);
    for (((p, g), eg2), edx2) in params.zip(gs).zip(&mut state.eg2).zip(&mut state.edx2) {
        if p.shape() != g.shape() || eg2.len() != p.len() || edx2.len() != p.len() {
            return Err(Error::shape(p.shape(), g.shape()));
        }
        for (((pv, &gv), e), d) in p.data_mut().iter_mut().zip(g.data()).zip(eg2.iter_mut()).zip(edx2.iter_mut()) {
            adadelta_step(pv, gv, e, d, rho, eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub clean_test_error: Option<f64>,
}

pub fn train(spec: ModelSpec, data: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    train_observed(spec, data, test, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_observed(
    spec: ModelSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let features: usize = data.sample_shape().iter().product();
    if features != spec.input().len() {
        return Err(Error::shape(spec.input().len(), data.sample_shape()));
    }

    let key = StreamKey::root(cfg.seed);
    let mut model = init_model(spec, cfg.seed);
    let mut state = AdadeltaState::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut key.named("shuffle").child(epoch as u64).rng());
        let mut dropout_rng = key.named("dropout").child(epoch as u64).rng();
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_dataset(data, chunk);
            let (grads, loss) = backward(&model, &batch, cfg, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            adadelta_update(&mut model, &grads, &mut state, cfg.adadelta_rho, cfg.adadelta_eps)?;
            total += loss * chunk.len() as f64;
            steps += 1;
        }
        let mean = total / data.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }

    let clean_test_error = test.map(|t| clean_error(&model, t)).transpose()?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            steps,
            clean_test_error,
        },
    ))
}
