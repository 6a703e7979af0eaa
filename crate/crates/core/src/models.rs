//! Architecture builders and windowed pose prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, LowerBodyPositions, LowerBodyRotations, SkeletonTemplate};
use crate::rotations::{rot6d_to_matrix, Rot6D};
use crate::tensor::{Activation, LayerSpec, ModelGraph, Tensor};

/// Number of regressed values: 4 joints × 6D.
pub const OUTPUT_DIM: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    #[default]
    Versapants,
    CnnHybrid,
    Bilstm,
}

/// Which frame of a window its prediction is attributed to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    Last,
    Center,
}

impl Alignment {
    /// Index within a window of `n` frames.
    pub fn offset(self, n: usize) -> usize {
        match self {
            Alignment::Last => n - 1,
            Alignment::Center => n / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ArchitectureKind,
    pub window_len: usize,
    /// Capacitive channels per leg.
    pub channels: usize,
    pub filters: [usize; 3],
    pub kernel: [usize; 2],
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Hidden widths of the output head; empty means a single affine map.
    pub head_hidden: Vec<usize>,
    pub alignment: Alignment,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ArchitectureKind::Versapants,
            window_len: 120,
            channels: 6,
            filters: [16, 32, 32],
            kernel: [3, 3],
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 192,
            dropout: 0.1,
            head_hidden: Vec::new(),
            alignment: Alignment::Last,
        }
    }
}

impl ModelConfig {
    pub fn with_kind(kind: ArchitectureKind) -> Self {
        ModelConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.window_len == 0 || self.window_len % 4 != 0 {
            return bad("window_len must be a positive multiple of 4");
        }
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.filters.contains(&0) || self.ffn_dim == 0 || self.d_model == 0 {
            return bad("layer widths must be positive");
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return bad("kernel extents must be odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Per-sample input shape `(N, K, 2)`.
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.window_len, self.channels, 2]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

type Layers = Vec<(String, LayerSpec)>;

fn push(layers: &mut Layers, name: &str, spec: LayerSpec) {
    layers.push((name.to_string(), spec));
}

fn head(layers: &mut Layers, cfg: &ModelConfig, mut width: usize) {
    for (i, &h) in cfg.head_hidden.iter().enumerate() {
        push(
            layers,
            &format!("head_hidden{i}"),
            LayerSpec::Dense {
                in_features: width,
                out_features: h,
                activation: Activation::Relu,
            },
        );
        width = h;
    }
    push(
        layers,
        "head",
        LayerSpec::Dense {
            in_features: width,
            out_features: OUTPUT_DIM,
            activation: Activation::Linear,
        },
    );
}

fn conv2d(cin: usize, cout: usize, kernel: [usize; 2], activation: Activation) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        activation,
    }
}

fn conv1d(cin: usize, cout: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Conv1d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        activation,
    }
}

pub fn versapants_layers(cfg: &ModelConfig) -> Layers {
    let [f1, f2, f3] = cfg.filters;
    let lin = Activation::Linear;
    let mut l = Vec::new();
    push(&mut l, "conv1", conv2d(2, f1, cfg.kernel, lin));
    push(&mut l, "pool1", LayerSpec::AvgPool2d);
    push(&mut l, "bn1", LayerSpec::BatchNorm { channels: f1 });
    push(&mut l, "drop1", LayerSpec::Dropout { rate: cfg.dropout });
    push(&mut l, "conv2", conv2d(f1, f2, cfg.kernel, lin));
    push(&mut l, "conv3", conv2d(f2, f3, cfg.kernel, lin));
    push(&mut l, "pool2", LayerSpec::AvgPool2d);
    push(&mut l, "bn2", LayerSpec::BatchNorm { channels: f3 });
    push(&mut l, "drop2", LayerSpec::Dropout { rate: cfg.dropout });
    let seq = cfg.window_len / 4;
    let width = cfg.channels.div_ceil(2).div_ceil(2) * f3;
    push(
        &mut l,
        "flatten",
        LayerSpec::Reshape {
            shape: vec![seq, width],
        },
    );
    if width != cfg.d_model {
        push(
            &mut l,
            "proj",
            LayerSpec::Dense {
                in_features: width,
                out_features: cfg.d_model,
                activation: lin,
            },
        );
    }
    push(
        &mut l,
        "pos",
        LayerSpec::PositionalAdd {
            len: seq,
            dim: cfg.d_model,
        },
    );
    for i in 0..cfg.layers {
        push(
            &mut l,
            &format!("encoder{i}"),
            LayerSpec::EncoderLayer {
                d_model: cfg.d_model,
                heads: cfg.heads,
                ffn_dim: cfg.ffn_dim,
            },
        );
    }
    push(&mut l, "gap", LayerSpec::TemporalGap);
    head(&mut l, cfg, cfg.d_model);
    l
}

/// 2D convolutions over (time, channel) followed by temporal 1D convolutions.
pub fn cnn_hybrid_layers(cfg: &ModelConfig) -> Layers {
    let relu = Activation::Relu;
    let mut l = Vec::new();
    push(&mut l, "conv2d_1", conv2d(2, 32, [3, 3], relu));
    push(&mut l, "conv2d_2", conv2d(32, 64, [3, 3], relu));
    push(&mut l, "conv2d_3", conv2d(64, 64, [3, 3], relu));
    push(&mut l, "bn", LayerSpec::BatchNorm { channels: 64 });
    push(
        &mut l,
        "flatten",
        LayerSpec::Reshape {
            shape: vec![cfg.window_len, cfg.channels * 64],
        },
    );
    push(&mut l, "conv1d_1", conv1d(cfg.channels * 64, 128, relu));
    push(&mut l, "conv1d_2", conv1d(128, 128, relu));
    push(&mut l, "pool", LayerSpec::MaxPool1d);
    push(&mut l, "conv1d_3", conv1d(128, 128, relu));
    push(&mut l, "gap", LayerSpec::TemporalGap);
    push(
        &mut l,
        "fc",
        LayerSpec::Dense {
            in_features: 128,
            out_features: 64,
            activation: relu,
        },
    );
    head(&mut l, cfg, 64);
    l
}

/// Two bidirectional LSTM layers over per-frame feature vectors.
pub fn bilstm_layers(cfg: &ModelConfig) -> Layers {
    const HIDDEN: usize = 256;
    let mut l = Vec::new();
    push(
        &mut l,
        "frames",
        LayerSpec::Reshape {
            shape: vec![cfg.window_len, 2 * cfg.channels],
        },
    );
    push(
        &mut l,
        "lstm1",
        LayerSpec::LstmBidirectional {
            input_size: 2 * cfg.channels,
            hidden: HIDDEN,
        },
    );
    push(
        &mut l,
        "lstm2",
        LayerSpec::LstmBidirectional {
            input_size: 2 * HIDDEN,
            hidden: HIDDEN,
        },
    );
    push(&mut l, "gap", LayerSpec::TemporalGap);
    head(&mut l, cfg, 2 * HIDDEN);
    l
}

fn build_kind(cfg: &ModelConfig, kind: ArchitectureKind, seed: u64) -> Result<ModelGraph<f32>> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config kind {:?} does not match builder {kind:?}",
            cfg.kind
        )));
    }
    let layers = match kind {
        ArchitectureKind::Versapants => versapants_layers(cfg),
        ArchitectureKind::CnnHybrid => cnn_hybrid_layers(cfg),
        ArchitectureKind::Bilstm => bilstm_layers(cfg),
    };
    ModelGraph::new(cfg.input_shape(), layers, seed)
}

pub fn build_versapants(cfg: &ModelConfig, seed: u64) -> Result<ModelGraph<f32>> {
    build_kind(cfg, ArchitectureKind::Versapants, seed)
}

pub fn build_cnn_hybrid(cfg: &ModelConfig, seed: u64) -> Result<ModelGraph<f32>> {
    build_kind(cfg, ArchitectureKind::CnnHybrid, seed)
}

pub fn build_bilstm(cfg: &ModelConfig, seed: u64) -> Result<ModelGraph<f32>> {
    build_kind(cfg, ArchitectureKind::Bilstm, seed)
}

/// Builds whichever architecture `cfg.kind` names.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ModelGraph<f32>> {
    build_kind(cfg, cfg.kind, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    pub rot6d: [Rot6D; 4],
    pub rotations: LowerBodyRotations,
    pub positions: LowerBodyPositions,
    pub frame_timestamp: i64,
}

/// Turns 24 head outputs into a pose. Fails if any joint's 6D is degenerate.
pub fn decode_pose(out: &[f64], template: &SkeletonTemplate, frame_timestamp: i64) -> Result<PosePrediction> {
    if out.len() != OUTPUT_DIM {
        return Err(Error::Shape(format!(
            "expected {OUTPUT_DIM} outputs, got {}",
            out.len()
        )));
    }
    let mut rot6d = [Rot6D([0.0; 6]); 4];
    let mut mats = [crate::rotations::RotMatrix::identity(); 4];
    for j in 0..4 {
        let mut v = [0.0; 6];
        v.copy_from_slice(&out[6 * j..6 * j + 6]);
        rot6d[j] = Rot6D(v);
        mats[j] = rot6d_to_matrix(&rot6d[j])?;
    }
    let rotations = LowerBodyRotations::from_array(mats);
    Ok(PosePrediction {
        rot6d,
        positions: forward_kinematics(template, &rotations),
        rotations,
        frame_timestamp,
    })
}

/// Copies frames `start..start + n` of a `T × 2K` session buffer (channel
/// order: left leg then right leg) into the `(N, K, 2)` model layout.
pub fn window_input(values: &[f32], n_channels: usize, start: usize, n: usize, out: &mut [f32]) {
    let k = n_channels / 2;
    for t in 0..n {
        let frame = &values[(start + t) * n_channels..][..n_channels];
        let dst = &mut out[t * n_channels..][..n_channels];
        for ch in 0..k {
            dst[2 * ch] = frame[ch];
            dst[2 * ch + 1] = frame[k + ch];
        }
    }
}

/// Predicts one pose from a normalized `(N, K, 2)` window.
pub fn predict_window(
    g: &ModelGraph<f32>,
    window: &[f32],
    template: &SkeletonTemplate,
    frame_timestamp: i64,
) -> Result<PosePrediction> {
    let mut shape = vec![1];
    shape.extend_from_slice(g.input_shape());
    let x = Tensor::new(shape, window.to_vec())?;
    let y = g.infer(&x)?;
    let out: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    decode_pose(&out, template, frame_timestamp)
}

/// Raw head outputs for a batch of windows given by their start frames.
pub fn infer_windows(
    g: &ModelGraph<f32>,
    values: &[f32],
    n_channels: usize,
    starts: &[usize],
) -> Result<Vec<[f64; OUTPUT_DIM]>> {
    let n = g.input_shape()[0];
    let per = n * n_channels;
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(64) {
        let mut buf = vec![0.0f32; chunk.len() * per];
        for (i, &s) in chunk.iter().enumerate() {
            window_input(values, n_channels, s, n, &mut buf[i * per..(i + 1) * per]);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(g.input_shape());
        let y = g.infer(&Tensor::new(shape, buf)?)?;
        for row in y.data().chunks_exact(OUTPUT_DIM) {
            let mut r = [0.0; OUTPUT_DIM];
            for (d, &v) in r.iter_mut().zip(row) {
                *d = v as f64;
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// Sliding-window predictions over a normalized `T × 2K` session buffer.
pub fn predict_stream(
    g: &ModelGraph<f32>,
    values: &[f32],
    timestamps: &[i64],
    template: &SkeletonTemplate,
    stride: usize,
    alignment: Alignment,
) -> Result<Vec<PosePrediction>> {
    let n = g.input_shape()[0];
    let n_channels = g.input_shape()[1] * 2;
    let t = timestamps.len();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if values.len() != t * n_channels {
        return Err(Error::Shape(format!(
            "{} values for {t} frames of {n_channels} channels",
            values.len()
        )));
    }
    if t < n {
        return Err(Error::InsufficientData(format!(
            "session has {t} frames, window needs {n}"
        )));
    }
    let starts: Vec<usize> = (0..=(t - n)).step_by(stride).collect();
    let outs = infer_windows(g, values, n_channels, &starts)?;
    starts
        .iter()
        .zip(outs)
        .map(|(&s, o)| decode_pose(&o, template, timestamps[s + alignment.offset(n)]))
        .collect()
}
