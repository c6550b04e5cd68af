//! Backpropagation against central finite differences; shared by the
//! gradient tests and the acceptance run.

use faultlab_core::data::one_hot;
use faultlab_core::nn::{trace, DropoutSource, NoFaults};
use faultlab_core::rng::StreamKey;
use faultlab_core::train::{backward_with, batch_loss, init_model, Batch, FrozenDropout, TrainingDropout};
use faultlab_core::{ModelSpec, TrainedModel};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude components are compared absolutely (REL_TOL · FLOOR);
/// central differences carry ~1e-11 of rounding noise at h = 1e-5.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Random weights *and* biases: a fresh Glorot model has zero biases, which
/// parks pre-activations of blank inputs exactly on the ReLU kink.
fn generic_model(spec: ModelSpec, seed: u64) -> TrainedModel {
    let mut model = init_model(spec, seed);
    let mut rng = StreamKey::root(seed).named("bias").rng();
    for layer in model.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(0.05..0.3);
        }
    }
    model
}

fn inputs(n: usize, len: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = StreamKey::root(seed).rng();
    let xs = (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0.0..0.6)).collect())
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| (i * 3 % 10) as u8).collect();
    (xs, one_hot(&labels, 10).unwrap().into_data())
}

/// Every pre-activation keeps its distance from the clipped-ReLU kinks (0
/// and clip). Stage 0 moves by at most h·max(x) per perturbation; later
/// stages can move further, so they get a wider berth.
fn clear_of_kinks(model: &TrainedModel, xs: &[Vec<f64>]) -> bool {
    let clip = model.spec().clip();
    xs.iter().all(|x| {
        let (_, stages) = trace(model, x, &mut NoFaults, None).unwrap();
        stages[..stages.len() - 1].iter().enumerate().all(|(i, st)| {
            let margin = if i == 0 { 1e-5 } else { 1e-3 };
            st.pre_activation
                .iter()
                .all(|&z| z.abs() > margin && (z - clip).abs() > margin)
        })
    })
}

fn param(model: &mut TrainedModel, stage: usize, bias: bool, i: usize) -> &mut f64 {
    let l = &mut model.layers_mut()[stage];
    if bias {
        &mut l.bias.data_mut()[i]
    } else {
        &mut l.weights.data_mut()[i]
    }
}

/// Compare every gradient component, or an evenly strided selection of at
/// most `per_tensor` components from each larger tensor.
pub fn fd_check(spec: ModelSpec, with_dropout: bool, batch_size: usize, per_tensor: Option<usize>) -> FdReport {
    // Central differences are only valid away from the activation kinks;
    // walk seeds until the evaluation point is generic.
    let (mut model, xs, targets) = (0..200u64)
        .map(|s| {
            let (xs, t) = inputs(batch_size, spec.input().len(), 5 + s);
            (generic_model(spec, 17 + s), xs, t)
        })
        .find(|(m, xs, _)| clear_of_kinks(m, xs))
        .expect("a kink-free evaluation point within 200 seeds");
    let batch = Batch {
        inputs: xs.iter().map(Vec::as_slice).collect(),
        targets: targets.chunks(10).collect(),
    };

    let mut rng = StreamKey::root(23).rng();
    let mut live = TrainingDropout {
        rng: &mut rng,
        conv_rate: 0.25,
        dense_rate: 0.5,
    };
    let mut frozen = FrozenDropout::default();
    let grads = if with_dropout {
        let mut recorder = FrozenDropout::record(&mut live);
        let (g, _) = backward_with(&model, &batch, Some(&mut recorder)).unwrap();
        frozen = recorder.finish();
        g
    } else {
        backward_with(&model, &batch, None).unwrap().0
    };

    let mut loss = |m: &TrainedModel| {
        if with_dropout {
            frozen.rewind();
            batch_loss(m, &batch, Some(&mut frozen as &mut dyn DropoutSource)).unwrap()
        } else {
            batch_loss(m, &batch, None).unwrap()
        }
    };

    let mut report = FdReport::default();
    for stage in 0..model.layers().len() {
        for bias in [false, true] {
            let g = &grads.layers[stage];
            let analytic_all = if bias { g.bias.data() } else { g.weights.data() };
            let count = analytic_all.len();
            let stride = per_tensor.map_or(1, |m| count.div_ceil(m));
            for i in (0..count).step_by(stride) {
                let orig = *param(&mut model, stage, bias, i);
                *param(&mut model, stage, bias, i) = orig + H;
                let up = loss(&model);
                *param(&mut model, stage, bias, i) = orig - H;
                let down = loss(&model);
                *param(&mut model, stage, bias, i) = orig;

                let numeric = (up - down) / (2.0 * H);
                let analytic = analytic_all[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                report.worst = report.worst.max(rel);
                if rel.is_nan() || rel >= REL_TOL {
                    report.failures.push(format!(
                        "stage {stage} {}[{i}]: analytic {analytic:e} numeric {numeric:e}",
                        if bias { "b" } else { "W" }
                    ));
                }
                report.checked += 1;
            }
        }
    }
    report
}
