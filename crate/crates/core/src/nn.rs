//! Layer algebra and full-network inference.
//!
//! Layouts: images are `rows × cols × channels` (channel-last), conv
//! kernels are `k × k × in_channels × maps`, dense weights are
//! `outputs × inputs`. All row-major.
//!
//! Per stage the forward pass computes the pre-activation, hands it to an
//! [`Injector`] (the fault hook), applies the clipped ReLU and then, for
//! convolutional stages, max pooling. The classifier's logits also go
//! through the injector before a fault-free softmax.

use crate::error::{Error, Result};
use crate::fault::DeviationConfig;
use crate::rng::LayerStreams;
use crate::spec::{LayerShape, ModelSpec};
use crate::tensor::Tensor;

/// Weight tensor and bias vector of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl TrainedModel {
    pub fn new(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        let plan = spec.layer_plan();
        if plan.len() != layers.len() {
            return Err(Error::shape(
                format!("{} layers for {spec}", plan.len()),
                format!("{} layers", layers.len()),
            ));
        }
        for (shape, layer) in plan.iter().zip(&layers) {
            layer.weights.check_shape(&shape.weight_shape())?;
            layer.bias.check_shape(&[shape.bias_len()])?;
        }
        Ok(Self { spec, layers })
    }

    /// All parameters zero; mostly useful in tests.
    pub fn zeros(spec: ModelSpec) -> Self {
        let layers = spec
            .layer_plan()
            .iter()
            .map(|s| Layer {
                weights: Tensor::zeros(s.weight_shape()),
                bias: Tensor::zeros(vec![s.bias_len()]),
            })
            .collect();
        Self { spec, layers }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn plan(&self) -> Vec<LayerShape> {
        self.spec.layer_plan()
    }
}

/// Per-stage hook receiving each pre-activation buffer before the
/// nonlinearity. `stage` counts from 0; the classifier is the last stage.
pub trait Injector {
    fn inject(&mut self, stage: usize, pre_activation: &mut [f64]);
}

/// Reliable computation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFaults;

impl Injector for NoFaults {
    fn inject(&mut self, _: usize, _: &mut [f64]) {}
}

/// Samples deviations from `dev` on the per-stage substreams of `streams`.
#[derive(Debug, Clone, Copy)]
pub struct FaultInjector<'a> {
    pub dev: &'a DeviationConfig,
    pub streams: &'a LayerStreams,
}

impl Injector for FaultInjector<'_> {
    fn inject(&mut self, stage: usize, pre_activation: &mut [f64]) {
        if self.dev.is_active() {
            let mut rng = self.streams.layer(stage);
            self.dev.inject(pre_activation, &mut rng);
        }
    }
}

/// Supplies inverted-dropout multipliers during training. Only called for
/// hidden stages after the first.
pub trait DropoutSource {
    fn multipliers(&mut self, stage: usize, is_conv: bool, len: usize) -> Option<Vec<f64>>;
}

/// Values recorded for one stage during a traced forward pass.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub input: Vec<f64>,
    /// Pre-activation after injection.
    pub pre_activation: Vec<f64>,
    /// For each pooled output, the index of its maximum in the activation.
    pub argmax: Option<Vec<usize>>,
    pub dropout: Option<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn propagate(
    model: &TrainedModel,
    x: &[f64],
    injector: &mut dyn Injector,
    mut dropout: Option<&mut (dyn DropoutSource + '_)>,
    mut trace: Option<&mut Vec<StageTrace>>,
) -> Vec<f64> {
    let plan = model.plan();
    let clip = model.spec.clip();
    let last = plan.len() - 1;
    let mut current = x.to_vec();
    for (stage, (shape, layer)) in plan.iter().zip(&model.layers).enumerate() {
        let mut pre = vec![0.0; shape.pre_activation_len()];
        linear_into(shape, layer, &current, &mut pre);
        injector.inject(stage, &mut pre);
        if stage == last {
            if let Some(t) = trace.as_deref_mut() {
                t.push(StageTrace {
                    input: std::mem::take(&mut current),
                    pre_activation: pre.clone(),
                    argmax: None,
                    dropout: None,
                    output: pre.clone(),
                });
            }
            return pre;
        }
        let activated: Vec<f64> = pre.iter().map(|&v| clipped(v, clip)).collect();
        let (mut out, argmax) = match *shape {
            LayerShape::Conv { pool, maps, .. } if pool > 1 => {
                let (r, c) = shape.conv_out().unwrap();
                let (o, idx) = pool_kernel(&activated, r, c, maps, pool);
                (o, Some(idx))
            }
            _ => (activated, None),
        };
        let multipliers = match dropout.as_deref_mut() {
            Some(source) if stage > 0 => source.multipliers(stage, shape.is_conv(), out.len()),
            _ => None,
        };
        if let Some(m) = &multipliers {
            for (v, k) in out.iter_mut().zip(m) {
                *v *= k;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(StageTrace {
                input: std::mem::take(&mut current),
                pre_activation: pre,
                argmax,
                dropout: multipliers,
                output: out.clone(),
            });
        }
        current = out;
    }
    unreachable!("layer plan always ends with the classifier")
}

fn linear_into(shape: &LayerShape, layer: &Layer, x: &[f64], out: &mut [f64]) {
    match *shape {
        LayerShape::Dense { .. } => dense_kernel(x, layer.weights.data(), layer.bias.data(), out),
        LayerShape::Conv {
            rows,
            cols,
            channels,
            kernel,
            maps,
            ..
        } => conv_kernel(
            x,
            rows,
            cols,
            channels,
            layer.weights.data(),
            kernel,
            maps,
            layer.bias.data(),
            out,
        ),
    }
}

#[inline]
fn clipped(v: f64, clip: f64) -> f64 {
    v.max(0.0).min(clip)
}

pub(crate) fn dense_kernel(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_kernel(
    x: &[f64],
    rows: usize,
    cols: usize,
    channels: usize,
    w: &[f64],
    k: usize,
    maps: usize,
    b: &[f64],
    out: &mut [f64],
) {
    let (out_rows, out_cols) = (rows + 1 - k, cols + 1 - k);
    for oy in 0..out_rows {
        for ox in 0..out_cols {
            let acc = &mut out[(oy * out_cols + ox) * maps..][..maps];
            acc.copy_from_slice(b);
            for ky in 0..k {
                for kx in 0..k {
                    let pixel = &x[((oy + ky) * cols + ox + kx) * channels..][..channels];
                    let taps = &w[(ky * k + kx) * channels * maps..][..channels * maps];
                    for (c, &xv) in pixel.iter().enumerate() {
                        for (a, &wv) in acc.iter_mut().zip(&taps[c * maps..(c + 1) * maps]) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

fn pool_kernel(x: &[f64], rows: usize, cols: usize, maps: usize, pool: usize) -> (Vec<f64>, Vec<usize>) {
    let (pr, pc) = (rows / pool, cols / pool);
    let mut out = vec![f64::NEG_INFINITY; pr * pc * maps];
    let mut idx = vec![0usize; pr * pc * maps];
    for py in 0..pr {
        for px in 0..pc {
            for dy in 0..pool {
                for dx in 0..pool {
                    let src = ((py * pool + dy) * cols + px * pool + dx) * maps;
                    for f in 0..maps {
                        let dst = (py * pc + px) * maps + f;
                        if x[src + f] > out[dst] {
                            out[dst] = x[src + f];
                            idx[dst] = src + f;
                        }
                    }
                }
            }
        }
    }
    (out, idx)
}

/// `W x + b` for an `m × n` matrix.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = match w.shape() {
        &[m, n] => (m, n),
        other => return Err(Error::shape("[m, n] weight matrix", other)),
    };
    if x.len() != n || x.shape().len() != 1 || b.shape() != [m] {
        return Err(Error::shape(
            format!("x [{n}], W [{m}, {n}], b [{m}]"),
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m];
    dense_kernel(x.data(), w.data(), b.data(), &mut out);
    Ok(Tensor::vector(out))
}

/// Valid, stride-1 cross-correlation of an `H × W × Cin` input with a
/// `C × C × Cin × F` kernel.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, cols, channels) = match x.shape() {
        &[r, c, ch] => (r, c, ch),
        other => return Err(Error::shape("[H, W, Cin] input", other)),
    };
    let (k, maps) = match w.shape() {
        &[k1, k2, ch, f] if k1 == k2 && ch == channels => (k1, f),
        other => {
            return Err(Error::shape(
                format!("[C, C, {channels}, F] kernel"),
                other,
            ))
        }
    };
    if k > rows || k > cols || k == 0 {
        return Err(Error::shape(
            format!("kernel side <= input extent {rows}x{cols}"),
            w.shape(),
        ));
    }
    b.check_shape(&[maps])?;
    let (or, oc) = (rows + 1 - k, cols + 1 - k);
    let mut out = vec![0.0; or * oc * maps];
    conv_kernel(x.data(), rows, cols, channels, w.data(), k, maps, b.data(), &mut out);
    Tensor::new(vec![or, oc, maps], out)
}

/// Non-overlapping `P × P` max pooling; trailing rows/cols are dropped.
pub fn max_pool(x: &Tensor, pool: usize) -> Result<Tensor> {
    if pool == 0 {
        return Err(Error::Domain("pool size must be >= 1".into()));
    }
    let (rows, cols, maps) = match x.shape() {
        &[r, c, f] => (r, c, f),
        other => return Err(Error::shape("[H, W, F] tensor", other)),
    };
    let (out, _) = pool_kernel(x.data(), rows, cols, maps, pool);
    Tensor::new(vec![rows / pool, cols / pool, maps], out)
}

pub fn clipped_relu(x: &Tensor, clip: f64) -> Tensor {
    x.map(|v| clipped(v, clip))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_input(model: &TrainedModel, x: &Tensor) -> Result<()> {
    let input = model.spec.input();
    let accepted: [&[usize]; 3] = [
        &[input.len()],
        &[input.rows, input.cols],
        &[input.rows, input.cols, input.channels],
    ];
    let shape_ok = accepted.iter().any(|s| *s == x.shape())
        && (x.shape().len() != 2 || input.channels == 1);
    if !shape_ok {
        return Err(Error::shape(
            format!("[{}, {}, {}] input", input.rows, input.cols, input.channels),
            x.shape(),
        ));
    }
    Ok(())
}

/// Class probabilities under the deviation model `dev`.
pub fn forward(model: &TrainedModel, x: &Tensor, dev: &DeviationConfig, streams: &LayerStreams) -> Result<Tensor> {
    forward_with(model, x, &mut FaultInjector { dev, streams })
}

/// Class probabilities with a caller-supplied injection hook.
pub fn forward_with(model: &TrainedModel, x: &Tensor, injector: &mut dyn Injector) -> Result<Tensor> {
    check_input(model, x)?;
    let logits = propagate(model, x.data(), injector, None, None);
    Ok(Tensor::vector(softmax(&logits)))
}

/// Reliable inference.
pub fn predict_clean(model: &TrainedModel, x: &Tensor) -> Result<Tensor> {
    forward_with(model, x, &mut NoFaults)
}

/// Instrumented forward pass: returns the logits and every stage's
/// recorded values.
pub fn trace(
    model: &TrainedModel,
    x: &[f64],
    injector: &mut dyn Injector,
    dropout: Option<&mut (dyn DropoutSource + '_)>,
) -> Result<(Vec<f64>, Vec<StageTrace>)> {
    if x.len() != model.spec.input().len() {
        return Err(Error::shape(model.spec.input().len(), x.len()));
    }
    let mut stages = Vec::new();
    let logits = propagate(model, x, injector, dropout, Some(&mut stages));
    Ok((logits, stages))
}

/// Unchecked variants over raw slices for the evaluation hot loop.
pub(crate) fn classify_slice(model: &TrainedModel, x: &[f64], injector: &mut dyn Injector) -> usize {
    argmax(&propagate(model, x, injector, None, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::DeviationKind;
    use crate::spec::{InputShape, Pooling};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct six-deep loop, indexing everything explicitly.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, f) = (w.shape()[0], w.shape()[3]);
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let mut out = vec![0.0; oh * ow * f];
        for i in 0..oh {
            for j in 0..ow {
                for q in 0..f {
                    let mut s = b.data()[q];
                    for u in 0..k {
                        for v in 0..k {
                            for p in 0..cin {
                                s += x.data()[((i + u) * wd + (j + v)) * cin + p]
                                    * w.data()[((u * k + v) * cin + p) * f + q];
                            }
                        }
                    }
                    out[(i * ow + j) * f + q] = s;
                }
            }
        }
        out
    }

    #[test]
    fn dense_examples() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = Tensor::vector(vec![0.2, 0.5, 0.9]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(vec![3])).unwrap(), x);

        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = Tensor::vector(vec![1.0, -1.0]);
        let out = dense_forward(&Tensor::vector(vec![1.0, 1.0]), &w, &b).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
        assert_eq!(dense_forward(&Tensor::zeros(vec![2]), &w, &b).unwrap(), b);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let err = dense_forward(&Tensor::zeros(vec![3]), &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = t(&[2, 2, 1], &[0.1, 0.2, 0.3, 0.4]);
        let out = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv_all_ones() {
        let x = t(&[3, 3, 1], &[1.0; 9]);
        let out = conv2d_forward(&x, &t(&[2, 2, 1, 1], &[1.0; 4]), &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let x = Tensor::zeros(vec![2, 2, 1]);
        assert!(matches!(
            conv2d_forward(&x, &Tensor::zeros(vec![3, 3, 1, 1]), &Tensor::zeros(vec![1])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_matches_oracle_6x6x2() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let (x, w, b) = (rand_t(&[6, 6, 2]), rand_t(&[3, 3, 2, 4]), rand_t(&[4]));
        let out = conv2d_forward(&x, &w, &b).unwrap();
        for (a, e) in out.data().iter().zip(conv_oracle(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_examples() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(max_pool(&x, 2).unwrap().data(), &[4.0]);
        assert_eq!(max_pool(&x, 1).unwrap(), x);
        let c = t(&[5, 5, 2], &[0.7; 50]);
        let pooled = max_pool(&c, 2).unwrap();
        assert_eq!(pooled.shape(), &[2, 2, 2]);
        assert!(pooled.data().iter().all(|&v| v == 0.7));
        assert!(matches!(max_pool(&x, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn clipped_relu_examples() {
        let out = clipped_relu(&Tensor::vector(vec![-0.5, 0.3, 2.0]), 1.0);
        assert_eq!(out.data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
    }

    #[test]
    fn model_param_count_matches_tensors() {
        for name in ["MLP-1-100", "MLP-2-200", "CNN-1-3-2-8-max", "CNN-2-5-2-4-none"] {
            let spec: ModelSpec = name.parse().unwrap();
            let model = TrainedModel::zeros(spec);
            let enumerated: usize = model
                .layers()
                .iter()
                .flat_map(|l| l.weights.data().iter().chain(l.bias.data()))
                .count();
            assert_eq!(model.n_params(), enumerated);
            assert_eq!(spec.count_params(), enumerated);
        }
    }

    #[test]
    fn trained_model_rejects_misshapen_layers() {
        let spec = ModelSpec::mlp(1, 3).unwrap();
        let mut layers = TrainedModel::zeros(spec).into_layers();
        layers[1].bias = Tensor::zeros(vec![9]);
        assert!(TrainedModel::new(spec, layers).is_err());
    }

    fn random_model(spec: ModelSpec, seed: u64) -> TrainedModel {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut model = TrainedModel::zeros(spec);
        for l in model.layers_mut() {
            for v in l.weights.data_mut().iter_mut().chain(l.bias.data_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        model
    }

    #[test]
    fn inactive_deviation_is_bitwise_clean() {
        let model = random_model("CNN-1-3-2-4-max".parse().unwrap(), 3);
        let x = Tensor::new(vec![28, 28], (0..784).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        let clean = predict_clean(&model, &x).unwrap();
        let streams = LayerStreams::new(9, "m", 0, 0);
        for dev in [
            DeviationConfig::none(),
            DeviationConfig::uniform(0.0).unwrap(),
            DeviationConfig::erasure(0.0).unwrap(),
        ] {
            let out = forward(&model, &x, &dev, &streams).unwrap();
            let bits: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
            let clean_bits: Vec<u64> = clean.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, clean_bits);
        }
    }

    struct EraseStage(usize);

    impl Injector for EraseStage {
        fn inject(&mut self, stage: usize, pre: &mut [f64]) {
            if stage == self.0 {
                pre.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn erasing_first_stage_equals_zero_input_downstream() {
        let spec = ModelSpec::mlp(2, 6).unwrap();
        let model = random_model(spec, 5);
        let x = Tensor::vector((0..784).map(|i| (i % 5) as f64 / 5.0).collect());

        let mut trace = Vec::new();
        let logits = propagate(&model, x.data(), &mut EraseStage(0), None, Some(&mut trace));
        assert!(trace[0].output.iter().all(|&v| v == 0.0));

        // Hand composition of the remaining two stages on a zero vector.
        let l1 = &model.layers()[1];
        let l2 = &model.layers()[2];
        let h = dense_forward(&Tensor::zeros(vec![6]), &l1.weights, &l1.bias).unwrap();
        let h = clipped_relu(&h, 1.0);
        let z = dense_forward(&h, &l2.weights, &l2.bias).unwrap();
        assert_eq!(logits, z.data());
    }

    #[test]
    fn forced_uniform_logit_stays_in_range() {
        let spec = ModelSpec::new(
            crate::spec::Architecture::Mlp { layers: 1, neurons: 1 },
            InputShape { rows: 1, cols: 1, channels: 1 },
            1,
            1.0,
        )
        .unwrap();
        let model = random_model(spec, 1);
        let dev = DeviationConfig::new(DeviationKind::ConditionallyUniform, 1.0)
            .unwrap()
            .with_range(-0.25, 0.75)
            .unwrap();
        for input in 0..50 {
            let streams = LayerStreams::new(1, "tiny", 0, input);
            let logits = propagate(
                &model,
                &[0.4],
                &mut FaultInjector { dev: &dev, streams: &streams },
                None,
                None,
            );
            assert!((-0.25..=0.75).contains(&logits[0]));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = TrainedModel::zeros(ModelSpec::mlp(1, 2).unwrap());
        assert!(predict_clean(&model, &Tensor::zeros(vec![27, 28])).is_err());
        assert!(predict_clean(&model, &Tensor::zeros(vec![784])).is_ok());
    }

    fn valid_spec() -> impl Strategy<Value = ModelSpec> {
        let mlp = (1usize..4, 1usize..20).prop_map(|(l, n)| ModelSpec::mlp(l, n).ok());
        let cnn = (1usize..4, prop_oneof![Just(3usize), Just(5)], 1usize..4, 1usize..5, any::<bool>())
            .prop_map(|(l, c, p, f, max)| {
                let pool = if max { Pooling::Max } else { Pooling::None };
                ModelSpec::cnn(l, c, p, f, pool)
                    .and_then(|s| s.with_dense_width(7))
                    .ok()
            });
        prop_oneof![mlp, cnn].prop_filter_map("invalid spec", |s| s)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv_equals_oracle(
            h in 1usize..9, w in 1usize..9, cin in 1usize..4, k in 1usize..4, f in 1usize..5, seed in any::<u64>()
        ) {
            prop_assume!(k <= h && k <= w);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand_t = |shape: &[usize]| {
                let n = shape.iter().product();
                t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
            };
            let (x, wt, b) = (rand_t(&[h, w, cin]), rand_t(&[k, k, cin, f]), rand_t(&[f]));
            let out = conv2d_forward(&x, &wt, &b).unwrap();
            for (a, e) in out.data().iter().zip(conv_oracle(&x, &wt, &b)) {
                prop_assert!((a - e).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0
        ) {
            let s = softmax(&z);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in s.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_chains_and_activations_stay_clipped(spec in valid_spec(), seed in any::<u64>(), p in 0.0f64..0.3) {
            let model = random_model(spec, seed);
            let x: Vec<f64> = (0..spec.input().len()).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
            let dev = DeviationConfig::uniform(p).unwrap();
            let streams = LayerStreams::new(seed, "prop", 0, 0);
            let mut trace = Vec::new();
            let logits = propagate(&model, &x, &mut FaultInjector { dev: &dev, streams: &streams }, None, Some(&mut trace));
            prop_assert_eq!(logits.len(), spec.num_classes());
            for stage in &trace[..trace.len() - 1] {
                prop_assert!(stage.output.iter().all(|&v| (0.0..=spec.clip()).contains(&v)));
            }
            let probs = softmax(&logits);
            prop_assert!(probs.iter().all(|v| v.is_finite()));
        }
    }
}
