//! Rotation + position L1 loss, Adam, and the mini-batch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, forward_kinematics_backward, LowerBodyPositions, LowerBodyRotations, SkeletonTemplate,
};
use crate::models::{build, window_input, Alignment, ModelConfig, OUTPUT_DIM};
use crate::rotations::{rot6d_to_matrix, rot6d_to_matrix_backward, Rot6D};
use crate::signal::{extract_windows, ProcessedSession};
use crate::tensor::{Mode, ModelGraph, Param, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub position_weight: f64,
    /// Window stride used when cutting training windows.
    pub stride: usize,
    /// Hold out whole sessions for validation instead of random windows.
    pub split_by_session: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 15,
            val_fraction: 0.1,
            seed: 0,
            position_weight: 1.0,
            stride: 5,
            split_by_session: false,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: batch 512, 15 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 512,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be positive".into()));
        }
        if !(self.position_weight >= 0.0) {
            return Err(Error::Config("position_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Supervision for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub rot6d: [f64; OUTPUT_DIM],
    pub positions: LowerBodyPositions,
    pub template: SkeletonTemplate,
}

impl Target {
    pub fn new(rotations: &LowerBodyRotations, template: &SkeletonTemplate) -> Self {
        let mut rot6d = [0.0; OUTPUT_DIM];
        for (j, r) in rotations.to_array().iter().enumerate() {
            rot6d[6 * j..6 * j + 6].copy_from_slice(&crate::rotations::matrix_to_rot6d(r).0);
        }
        Target {
            rot6d,
            positions: forward_kinematics(template, rotations),
            template: *template,
        }
    }
}

/// A materialized window with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub session: usize,
    pub start: usize,
    pub x: Vec<f32>,
    pub target: Target,
}

/// Cuts every clean window of every session, targets at the aligned frame.
pub fn build_samples(
    sessions: &[ProcessedSession],
    window_len: usize,
    stride: usize,
    alignment: Alignment,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let targets = s
            .targets
            .as_ref()
            .ok_or_else(|| Error::InsufficientData(format!("session {} has no ground truth", s.participant_id)))?;
        if s.len() < window_len {
            continue;
        }
        let split = extract_windows(&s.frame_ok, window_len, stride)?;
        for start in split.kept {
            let mut x = vec![0.0; window_len * s.n_channels];
            window_input(&s.values, s.n_channels, start, window_len, &mut x);
            out.push(Sample {
                session: si,
                start,
                x,
                target: Target::new(&targets[start + alignment.offset(window_len)], &s.template),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub rotation_term: f64,
    pub position_term: f64,
    /// `∂loss/∂pred`.
    pub grad: [f64; OUTPUT_DIM],
    /// Gram–Schmidt failed on some joint, so the position term was dropped.
    pub degenerate: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `‖Θ̂ − Θ‖₁ + w·‖P̂ − P‖₁` for one sample, with its gradient.
pub fn loss(pred: &[f64], target: &Target, position_weight: f64) -> Result<LossOutput> {
    if pred.len() != OUTPUT_DIM {
        return Err(Error::Shape(format!(
            "expected {OUTPUT_DIM} outputs, got {}",
            pred.len()
        )));
    }
    let mut grad = [0.0; OUTPUT_DIM];
    let mut rotation_term = 0.0;
    for i in 0..OUTPUT_DIM {
        let d = pred[i] - target.rot6d[i];
        rotation_term += d.abs();
        grad[i] = sign(d);
    }

    let r6: [Rot6D; 4] = std::array::from_fn(|j| {
        let mut v = [0.0; 6];
        v.copy_from_slice(&pred[6 * j..6 * j + 6]);
        Rot6D(v)
    });
    let mats: Result<Vec<_>> = r6.iter().map(rot6d_to_matrix).collect();
    let Ok(mats) = mats else {
        return Ok(LossOutput {
            loss: rotation_term,
            rotation_term,
            position_term: 0.0,
            grad,
            degenerate: true,
        });
    };
    let q = LowerBodyRotations::from_array([mats[0], mats[1], mats[2], mats[3]]);
    let p = forward_kinematics(&target.template, &q).to_array();
    let p_gt = target.positions.to_array();
    let mut position_term = 0.0;
    let mut gp = [crate::rotations::Vec3::zeros(); 4];
    for j in 0..4 {
        let d = p[j] - p_gt[j];
        position_term += d.abs().sum();
        gp[j] = d.map(sign) * position_weight;
    }
    if position_weight != 0.0 {
        let d_r = forward_kinematics_backward(&target.template, &q, &LowerBodyPositions::from_array(gp));
        for j in 0..4 {
            let d6 = rot6d_to_matrix_backward(&r6[j], &d_r[j])?;
            for (g, d) in grad[6 * j..6 * j + 6].iter_mut().zip(d6) {
                *g += d;
            }
        }
    }
    Ok(LossOutput {
        loss: rotation_term + position_weight * position_term,
        rotation_term,
        position_term,
        grad,
        degenerate: false,
    })
}

/// Mean loss over a batch of outputs; gradient is with respect to `outputs`.
pub fn batch_loss(outputs: &[f64], targets: &[&Target], position_weight: f64) -> Result<(f64, Vec<f64>, usize)> {
    if outputs.len() != targets.len() * OUTPUT_DIM || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; outputs.len()];
    let mut degenerate = 0;
    for (i, t) in targets.iter().enumerate() {
        let l = loss(&outputs[i * OUTPUT_DIM..(i + 1) * OUTPUT_DIM], t, position_weight)?;
        total += l.loss;
        degenerate += usize::from(l.degenerate);
        for (g, d) in grad[i * OUTPUT_DIM..].iter_mut().zip(l.grad) {
            *g = d * scale;
        }
    }
    Ok((total * scale, grad, degenerate))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Moments for each parameter tensor; empty for non-trainable ones.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Param<T>]) -> Self {
        let zeros = |p: &Param<T>| {
            if p.trainable {
                vec![0.0; p.value.len()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient and state counts differ".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {:?}",
                p.name,
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !p.trainable {
            continue;
        }
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi.f64();
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
            *w = T::of(w.f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split is empty.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Row 0 holds the losses of the untrained model.
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub degenerate_events: usize,
}

impl TrainReport {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded split of sample indices into (train, validation).
pub fn split_samples(samples: &[Sample], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F5A_11D5);
    if cfg.split_by_session {
        let mut sessions: Vec<usize> = samples.iter().map(|s| s.session).collect();
        sessions.sort_unstable();
        sessions.dedup();
        sessions.shuffle(&mut rng);
        let n_val = ((sessions.len() as f64 * cfg.val_fraction).round() as usize).min(sessions.len().saturating_sub(1));
        let held = &sessions[..n_val];
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..samples.len()).partition(|&i| held.contains(&samples[i].session));
        return (train, val);
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len().saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn batch_tensor<T: Scalar>(g: &ModelGraph<T>, samples: &[Sample], idx: &[usize]) -> Result<Tensor<T>> {
    let per: usize = g.input_shape().iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if samples[i].x.len() != per {
            return Err(Error::Shape(format!(
                "window has {} values, model expects {per}",
                samples[i].x.len()
            )));
        }
        data.extend(samples[i].x.iter().map(|&v| T::of(v as f64)));
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(g.input_shape());
    Tensor::new(shape, data)
}

/// Mean infer-mode loss over `idx`.
pub fn evaluate_loss<T: Scalar>(
    g: &ModelGraph<T>,
    samples: &[Sample],
    idx: &[usize],
    position_weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let y = g.infer(&batch_tensor(g, samples, chunk)?)?;
        let out: Vec<f64> = y.data().iter().map(|v| v.f64()).collect();
        let targets: Vec<&Target> = chunk.iter().map(|&i| &samples[i].target).collect();
        total += batch_loss(&out, &targets, position_weight)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `g` in place. Returns the per-epoch history and the split used.
pub fn train<T: Scalar>(g: &mut ModelGraph<T>, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let (train_idx, val_idx) = split_samples(samples, cfg);
    if train_idx.is_empty() {
        return Err(Error::InsufficientData(
            "validation split left no training windows".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    g.set_dropout_seed(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(g.params());
    let val_loss = |g: &ModelGraph<T>| -> Result<Option<f64>> {
        if val_idx.is_empty() {
            Ok(None)
        } else {
            evaluate_loss(g, samples, &val_idx, cfg.position_weight).map(Some)
        }
    };
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: evaluate_loss(g, samples, &train_idx, cfg.position_weight)?,
        val_loss: val_loss(g)?,
    }];
    let mut degenerate_events = 0;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = batch_tensor(g, samples, batch)?;
            let y = g.forward(&x, Mode::Train)?;
            let out: Vec<f64> = y.data().iter().map(|v| v.f64()).collect();
            let targets: Vec<&Target> = batch.iter().map(|&i| &samples[i].target).collect();
            let (l, grad, degenerate) = batch_loss(&out, &targets, cfg.position_weight)?;
            degenerate_events += degenerate;
            sum += l * batch.len() as f64;
            let upstream = Tensor::from_f64(y.shape().to_vec(), &grad)?;
            let grads = g.backward(&upstream)?;
            adam_step(g.params_mut(), &grads.params, &mut adam, cfg.lr)?;
        }
        history.push(EpochRecord {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss: val_loss(g)?,
        });
    }
    Ok(TrainReport {
        history,
        train_indices: train_idx,
        val_indices: val_idx,
        degenerate_events,
    })
}

/// Builds a fresh model from `model_cfg` (seeded by `cfg.seed`) and trains it.
pub fn train_model(
    model_cfg: &ModelConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelGraph<f32>, TrainReport)> {
    model_cfg.validate()?;
    let mut g = build(model_cfg, cfg.seed)?;
    let report = train(&mut g, samples, cfg)?;
    Ok((g, report))
}
