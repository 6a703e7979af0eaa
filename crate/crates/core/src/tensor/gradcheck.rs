//! Central-difference verification of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Mode, ModelGraph};
use super::layers::LayerSpec;
use super::Tensor;
use crate::error::Result;

const EPS: f64 = 1e-5;
/// Denominator floor: gradients below it are compared on absolute error, since
/// central differences carry O(ε²) truncation noise even where the true
/// gradient is exactly zero (e.g. the key bias under softmax).
const REL_FLOOR: f64 = 1e-4;
/// Entries probed per tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 48;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry (`"input"` or a weight name).
    pub worst: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub probes: usize,
}

/// Small per-sample input shape used to exercise a layer kind.
fn probe_shape(spec: &LayerSpec) -> Vec<usize> {
    match *spec {
        LayerSpec::Conv2d { in_channels, .. } => vec![5, 4, in_channels],
        LayerSpec::AvgPool2d => vec![5, 3, 3],
        LayerSpec::BatchNorm { channels } => vec![4, channels],
        LayerSpec::Dropout { .. } => vec![4, 3],
        LayerSpec::Reshape { ref shape } => vec![shape.iter().product()],
        LayerSpec::PositionalAdd { len, dim } => vec![len, dim],
        LayerSpec::EncoderLayer { d_model, .. } => vec![5, d_model],
        LayerSpec::TemporalGap => vec![5, 4],
        LayerSpec::Dense { in_features, .. } => vec![3, in_features],
        LayerSpec::Conv1d { in_channels, .. } => vec![6, in_channels],
        LayerSpec::MaxPool1d => vec![5, 3],
        LayerSpec::LstmBidirectional { input_size, .. } => vec![4, input_size],
    }
}

/// Worst relative error between backward and central differences for a
/// single layer of `spec`, in double precision on random small inputs.
pub fn grad_check(spec: &LayerSpec, seed: u64) -> Result<f64> {
    let shape = probe_shape(spec);
    let mut graph = ModelGraph::<f64>::new(shape.clone(), vec![("layer".into(), spec.clone())], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Move normalization scales and shifts off their identity init so their
    // gradients are exercised in a generic position.
    for p in graph.params_mut().iter_mut().filter(|p| p.trainable) {
        if p.name.ends_with("norm1.weight")
            || p.name.ends_with("norm2.weight")
            || p.name.ends_with("norm1.bias")
            || p.name.ends_with("norm2.bias")
            || p.name.ends_with("bias")
            || matches!(spec, LayerSpec::BatchNorm { .. })
        {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let batch = 3;
    let mut full = vec![batch];
    full.extend_from_slice(&shape);
    let n: usize = full.iter().product();
    let x = Tensor::new(full, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(grad_check_graph(&mut graph, &x, seed)?.max_rel_error)
}

/// Checks input and trainable-weight gradients of a whole graph against
/// central differences of `L = Σ u·y` for a random upstream `u`.
pub fn grad_check_graph(graph: &mut ModelGraph<f64>, x: &Tensor<f64>, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mask_seed = seed.wrapping_mul(31).wrapping_add(5);

    graph.set_dropout_seed(mask_seed);
    let y = graph.forward(x, Mode::Train)?;
    let u = Tensor::new(
        y.shape().to_vec(),
        (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let grads = graph.backward(&u)?;

    // L(x+h) - L(x-h) as Σ u·(y⁺ - y⁻) to keep cancellation error small.
    let diff = |g: &mut ModelGraph<f64>, xp: &Tensor<f64>, xm: &Tensor<f64>| -> Result<f64> {
        g.set_dropout_seed(mask_seed);
        let yp = g.forward(xp, Mode::Train)?;
        g.set_dropout_seed(mask_seed);
        let ym = g.forward(xm, Mode::Train)?;
        Ok(yp
            .data()
            .iter()
            .zip(ym.data())
            .zip(u.data())
            .map(|((a, b), w)| (a - b) * w)
            .sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        probes: 0,
    };
    let record = |report: &mut GradCheckReport, name: &str, analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = name.to_string();
            report.worst_pair = (analytic, numeric);
        }
    };

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= MAX_PROBES {
            (0..len).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
        }
    };

    for i in pick(x.len(), &mut rng) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += EPS;
        xm.data_mut()[i] -= EPS;
        let h = xp.data()[i] - xm.data()[i];
        let numeric = diff(graph, &xp, &xm)? / h;
        record(&mut report, "input", grads.input.data()[i], numeric);
    }

    for pi in 0..graph.params().len() {
        if !graph.params()[pi].trainable {
            continue;
        }
        let name = graph.params()[pi].name.clone();
        for i in pick(graph.params()[pi].value.len(), &mut rng) {
            let orig = graph.params()[pi].value.data()[i];
            let plus = orig + EPS;
            let minus = orig - EPS;
            graph.params_mut()[pi].value.data_mut()[i] = plus;
            graph.set_dropout_seed(mask_seed);
            let yp = graph.forward(x, Mode::Train)?;
            graph.params_mut()[pi].value.data_mut()[i] = minus;
            graph.set_dropout_seed(mask_seed);
            let ym = graph.forward(x, Mode::Train)?;
            graph.params_mut()[pi].value.data_mut()[i] = orig;
            let num: f64 = yp
                .data()
                .iter()
                .zip(ym.data())
                .zip(u.data())
                .map(|((a, b), w)| (a - b) * w)
                .sum();
            record(&mut report, &name, grads.params[pi].data()[i], num / (plus - minus));
        }
    }
    Ok(report)
}
