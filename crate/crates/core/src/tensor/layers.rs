//! Layer kinds: shapes, parameters, FLOP accounting, forward and backward passes.
//!
//! Layouts are channels-last. Per-sample shapes exclude the batch axis:
//! `conv2d`/`avgpool2d` see `[H, W, C]`, sequence layers see `[L, C]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Param;
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

/// One layer of a [`super::ModelGraph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride 1, same padding, odd kernel. `[H, W, Ci] → [H, W, Co]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default)]
        activation: Activation,
    },
    /// 2×2, stride 2, ceil mode; padded cells are excluded from the average.
    #[serde(rename = "avgpool2d")]
    AvgPool2d,
    /// Normalizes the last axis with batch statistics (train) or running statistics (infer).
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Reshapes the per-sample tensor.
    Reshape {
        shape: Vec<usize>,
    },
    /// Learnable `[L, d]` table added to every sample.
    PositionalAdd {
        len: usize,
        dim: usize,
    },
    /// Post-norm transformer encoder block: MHA → add & norm → ReLU FFN → add & norm.
    EncoderLayer {
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    },
    /// Mean over the sequence axis: `[L, d] → [d]`.
    TemporalGap,
    /// Affine map on the last axis.
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Stride 1, same padding, odd kernel. `[L, Ci] → [L, Co]`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Window 2, stride 2, ceil mode. `[L, C] → [⌈L/2⌉, C]`.
    #[serde(rename = "maxpool1d")]
    MaxPool1d,
    /// Two LSTM passes (forward and reversed time); outputs concatenated `[L, 2H]`.
    LstmBidirectional {
        input_size: usize,
        hidden: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform on `±bound`.
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamDef {
    pub suffix: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

fn def(suffix: &'static str, shape: Vec<usize>, init: Init) -> ParamDef {
    ParamDef {
        suffix,
        shape,
        init,
        trainable: true,
    }
}

fn fan_in(n: usize) -> Init {
    Init::Uniform((3.0 / n as f64).sqrt())
}

fn ceil_half(n: usize) -> usize {
    n.div_ceil(2)
}

fn shape_err(spec: &LayerSpec, input: &[usize], why: &str) -> Error {
    Error::Shape(format!("{} with input {input:?}: {why}", spec.kind_name()))
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::AvgPool2d => "avgpool2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::PositionalAdd { .. } => "positional_add",
            LayerSpec::EncoderLayer { .. } => "encoder_layer",
            LayerSpec::TemporalGap => "temporal_gap",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool1d => "maxpool1d",
            LayerSpec::LstmBidirectional { .. } => "lstm_bidirectional",
        }
    }

    pub(crate) fn param_defs(&self) -> Vec<ParamDef> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => vec![
                def(
                    "weight",
                    vec![kh, kw, in_channels, out_channels],
                    fan_in(kh * kw * in_channels),
                ),
                def("bias", vec![out_channels], Init::Zeros),
            ],
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                def(
                    "weight",
                    vec![kernel, in_channels, out_channels],
                    fan_in(kernel * in_channels),
                ),
                def("bias", vec![out_channels], Init::Zeros),
            ],
            LayerSpec::BatchNorm { channels } => vec![
                def("weight", vec![channels], Init::Ones),
                def("bias", vec![channels], Init::Zeros),
                ParamDef {
                    suffix: "running_mean",
                    shape: vec![channels],
                    init: Init::Zeros,
                    trainable: false,
                },
                ParamDef {
                    suffix: "running_var",
                    shape: vec![channels],
                    init: Init::Ones,
                    trainable: false,
                },
            ],
            LayerSpec::PositionalAdd { len, dim } => {
                vec![def("embedding", vec![len, dim], Init::Normal(0.02))]
            }
            LayerSpec::EncoderLayer {
                d_model: d, ffn_dim: f, ..
            } => vec![
                def("attn.in_proj.weight", vec![d, 3 * d], fan_in(d)),
                def("attn.in_proj.bias", vec![3 * d], Init::Zeros),
                def("attn.out_proj.weight", vec![d, d], fan_in(d)),
                def("attn.out_proj.bias", vec![d], Init::Zeros),
                def("norm1.weight", vec![d], Init::Ones),
                def("norm1.bias", vec![d], Init::Zeros),
                def("ffn.linear1.weight", vec![d, f], fan_in(d)),
                def("ffn.linear1.bias", vec![f], Init::Zeros),
                def("ffn.linear2.weight", vec![f, d], fan_in(f)),
                def("ffn.linear2.bias", vec![d], Init::Zeros),
                def("norm2.weight", vec![d], Init::Ones),
                def("norm2.bias", vec![d], Init::Zeros),
            ],
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => vec![
                def("weight", vec![in_features, out_features], fan_in(in_features)),
                def("bias", vec![out_features], Init::Zeros),
            ],
            LayerSpec::LstmBidirectional { input_size, hidden } => {
                let bound = Init::Uniform(1.0 / (hidden as f64).sqrt());
                vec![
                    def("fwd.w_ih", vec![input_size, 4 * hidden], bound),
                    def("fwd.w_hh", vec![hidden, 4 * hidden], bound),
                    def("fwd.bias", vec![4 * hidden], Init::Zeros),
                    def("bwd.w_ih", vec![input_size, 4 * hidden], bound),
                    def("bwd.w_hh", vec![hidden, 4 * hidden], bound),
                    def("bwd.bias", vec![4 * hidden], Init::Zeros),
                ]
            }
            LayerSpec::AvgPool2d
            | LayerSpec::Dropout { .. }
            | LayerSpec::Reshape { .. }
            | LayerSpec::TemporalGap
            | LayerSpec::MaxPool1d => Vec::new(),
        }
    }

    /// Per-sample output shape, validating hyperparameters against the input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |why: &str| Err(shape_err(self, input, why));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => {
                if input.len() != 3 {
                    return err("expected [H, W, C]");
                }
                if input[2] != in_channels {
                    return err("channel mismatch");
                }
                if kh % 2 == 0 || kw % 2 == 0 || out_channels == 0 {
                    return err("kernel extents must be odd and channels non-zero");
                }
                Ok(vec![input[0], input[1], out_channels])
            }
            LayerSpec::AvgPool2d => {
                if input.len() != 3 {
                    return err("expected [H, W, C]");
                }
                Ok(vec![ceil_half(input[0]), ceil_half(input[1]), input[2]])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.last() != Some(&channels) {
                    return err("channel mismatch");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return err("rate must lie in [0, 1)");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return err("element count changes");
                }
                Ok(shape.clone())
            }
            LayerSpec::PositionalAdd { len, dim } => {
                if input != [len, dim] {
                    return err("expected [len, dim]");
                }
                Ok(input.to_vec())
            }
            LayerSpec::EncoderLayer {
                d_model,
                heads,
                ffn_dim,
            } => {
                if input.len() != 2 || input[1] != d_model {
                    return err("expected [L, d_model]");
                }
                if heads == 0 || d_model % heads != 0 || ffn_dim == 0 {
                    return err("d_model must be divisible by heads");
                }
                Ok(input.to_vec())
            }
            LayerSpec::TemporalGap => {
                if input.len() != 2 || input[0] == 0 {
                    return err("expected non-empty [L, d]");
                }
                Ok(vec![input[1]])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input.last() != Some(&in_features) || out_features == 0 {
                    return err("feature mismatch");
                }
                let mut out = input.to_vec();
                *out.last_mut().unwrap() = out_features;
                Ok(out)
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                if input.len() != 2 || input[1] != in_channels {
                    return err("expected [L, in_channels]");
                }
                if kernel % 2 == 0 || out_channels == 0 {
                    return err("kernel must be odd");
                }
                Ok(vec![input[0], out_channels])
            }
            LayerSpec::MaxPool1d => {
                if input.len() != 2 {
                    return err("expected [L, C]");
                }
                Ok(vec![ceil_half(input[0]), input[1]])
            }
            LayerSpec::LstmBidirectional { input_size, hidden } => {
                if input.len() != 2 || input[1] != input_size || hidden == 0 {
                    return err("expected [L, input_size]");
                }
                Ok(vec![input[0], 2 * hidden])
            }
        }
    }

    /// Analytic FLOPs for one sample (1 multiply-add = 2 FLOPs).
    ///
    /// Counts matrix products, bias adds, residual adds, pooling sums and the
    /// scale-and-shift of normalization layers. Activations, softmax and
    /// max-pool comparisons are not counted.
    pub fn flops(&self, input: &[usize]) -> u64 {
        let n = |v: &[usize]| v.iter().product::<usize>() as u64;
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => {
                let pos = (input[0] * input[1]) as u64;
                let co = out_channels as u64;
                2 * pos * co * (kh * kw * in_channels) as u64 + pos * co
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let pos = input[0] as u64;
                let co = out_channels as u64;
                2 * pos * co * (kernel * in_channels) as u64 + pos * co
            }
            LayerSpec::AvgPool2d => n(input),
            LayerSpec::BatchNorm { .. } => 2 * n(input),
            LayerSpec::Dropout { .. } | LayerSpec::Reshape { .. } | LayerSpec::MaxPool1d => 0,
            LayerSpec::PositionalAdd { .. } => n(input),
            LayerSpec::EncoderLayer { d_model, ffn_dim, .. } => {
                let l = input[0] as u64;
                let d = d_model as u64;
                let f = ffn_dim as u64;
                let projections = 2 * l * d * 3 * d + 3 * d * l + 2 * l * d * d + l * d;
                let attention = 2 * (2 * l * l * d);
                let ffn = 2 * l * d * f + l * f + 2 * l * f * d + l * d;
                let residual_and_norm = 2 * l * d + 2 * (2 * l * d);
                projections + attention + ffn + residual_and_norm
            }
            LayerSpec::TemporalGap => n(input),
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                let rows = n(&input[..input.len() - 1]);
                rows * (2 * (in_features * out_features) as u64 + out_features as u64)
            }
            LayerSpec::LstmBidirectional { input_size, hidden } => {
                let l = input[0] as u64;
                let h = hidden as u64;
                let per_step = 2 * (input_size as u64 + h) * 4 * h + 4 * h + 4 * h;
                2 * l * per_step
            }
        }
    }
}

pub(crate) fn init_param<T: Scalar>(d: &ParamDef, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = d.shape.iter().product();
    let data: Vec<T> = match d.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Uniform(bound) => (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect(),
        Init::Normal(std) => {
            let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| T::of(rand_distr::Distribution::sample(&normal, rng)))
                .collect()
        }
    };
    Tensor::new(d.shape.clone(), data).expect("shape matches by construction")
}

/// State retained by a train-mode forward pass for the backward pass.
pub(crate) enum Cache<T> {
    Conv {
        cols: Vec<T>,
        out: Option<Vec<T>>,
        geom: ConvGeom,
    },
    AvgPool {
        in_shape: Vec<usize>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        mask: Vec<T>,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
    PositionalAdd,
    Encoder(Box<EncoderCache<T>>),
    Gap {
        in_shape: Vec<usize>,
    },
    Dense {
        x: Vec<T>,
        out: Option<Vec<T>>,
        in_shape: Vec<usize>,
    },
    Lstm(Box<LstmCache<T>>),
}

pub(crate) struct Forward<T> {
    pub y: Tensor<T>,
    pub cache: Option<Cache<T>>,
    /// New running mean and variance (batch norm in train mode).
    pub stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T> Forward<T> {
    fn plain(y: Tensor<T>, cache: Option<Cache<T>>) -> Self {
        Forward { y, cache, stats: None }
    }
}

/// Runs one layer. `train` selects batch statistics, active dropout and caching.
pub(crate) fn forward<T: Scalar>(
    spec: &LayerSpec,
    p: &[Param<T>],
    x: &Tensor<T>,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Forward<T>> {
    let b = x.batch();
    let sample = &x.shape()[1..];
    let out_sample = spec.output_shape(sample)?;
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&out_sample);

    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel: [kh, kw],
            activation,
            ..
        } => {
            let geom = ConvGeom {
                b,
                h: sample[0],
                w: sample[1],
                ci: sample[2],
                co: out_channels,
                kh,
                kw,
            };
            conv_forward(&geom, p, x, activation, train, out_shape)
        }
        LayerSpec::Conv1d {
            out_channels,
            kernel,
            activation,
            ..
        } => {
            let geom = ConvGeom {
                b,
                h: sample[0],
                w: 1,
                ci: sample[1],
                co: out_channels,
                kh: kernel,
                kw: 1,
            };
            conv_forward(&geom, p, x, activation, train, out_shape)
        }
        LayerSpec::AvgPool2d => {
            let y = avgpool_forward(x, &out_shape);
            let cache = train.then(|| Cache::AvgPool {
                in_shape: x.shape().to_vec(),
            });
            Ok(Forward::plain(y, cache))
        }
        LayerSpec::MaxPool1d => {
            let (y, argmax) = maxpool_forward(x, &out_shape);
            let cache = train.then(|| Cache::MaxPool {
                argmax,
                in_shape: x.shape().to_vec(),
            });
            Ok(Forward::plain(y, cache))
        }
        LayerSpec::BatchNorm { channels } => batchnorm_forward(channels, p, x, train),
        LayerSpec::Dropout { rate } => {
            if !train || rate == 0.0 {
                let cache = train.then(|| Cache::Dropout {
                    mask: vec![T::one(); x.len()],
                });
                return Ok(Forward::plain(x.clone(), cache));
            }
            let scale = T::of(1.0 / (1.0 - rate));
            let mask: Vec<T> = (0..x.len())
                .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Ok(Forward::plain(
                Tensor::new(out_shape, data)?,
                Some(Cache::Dropout { mask }),
            ))
        }
        LayerSpec::Reshape { .. } => {
            let y = x.clone().reshaped(out_shape)?;
            let cache = train.then(|| Cache::Reshape {
                in_shape: x.shape().to_vec(),
            });
            Ok(Forward::plain(y, cache))
        }
        LayerSpec::PositionalAdd { .. } => {
            let pos = p[0].value.data();
            let mut y = x.clone();
            for chunk in y.data_mut().chunks_exact_mut(pos.len()) {
                for (v, &e) in chunk.iter_mut().zip(pos) {
                    *v += e;
                }
            }
            Ok(Forward::plain(y, train.then_some(Cache::PositionalAdd)))
        }
        LayerSpec::EncoderLayer {
            d_model,
            heads,
            ffn_dim,
        } => encoder_forward(d_model, heads, ffn_dim, p, x, train),
        LayerSpec::TemporalGap => {
            let (l, d) = (sample[0], sample[1]);
            let inv = T::of(1.0 / l as f64);
            let mut y = vec![T::zero(); b * d];
            for bi in 0..b {
                let out = &mut y[bi * d..(bi + 1) * d];
                for row in x.data()[bi * l * d..(bi + 1) * l * d].chunks_exact(d) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o *= inv);
            }
            let cache = train.then(|| Cache::Gap {
                in_shape: x.shape().to_vec(),
            });
            Ok(Forward::plain(Tensor::new(out_shape, y)?, cache))
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            activation,
        } => {
            let rows = x.len() / in_features;
            let mut y = vec![T::zero(); rows * out_features];
            dense(x.data(), &p[0], &p[1], rows, in_features, out_features, &mut y);
            if activation == Activation::Relu {
                relu_inplace(&mut y);
            }
            let cache = train.then(|| Cache::Dense {
                x: x.data().to_vec(),
                out: (activation == Activation::Relu).then(|| y.clone()),
                in_shape: x.shape().to_vec(),
            });
            Ok(Forward::plain(Tensor::new(out_shape, y)?, cache))
        }
        LayerSpec::LstmBidirectional { hidden, .. } => lstm_forward(hidden, p, x, train, out_shape),
    }
}

/// Backpropagates `dy` through one layer, accumulating weight gradients into
/// `grads` (aligned with `p`) and returning the gradient for the layer input.
pub(crate) fn backward<T: Scalar>(
    spec: &LayerSpec,
    p: &[Param<T>],
    cache: Cache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Result<Tensor<T>> {
    match (spec, cache) {
        (LayerSpec::Conv2d { activation, .. }, Cache::Conv { cols, out, geom })
        | (LayerSpec::Conv1d { activation, .. }, Cache::Conv { cols, out, geom }) => {
            conv_backward(&geom, p, &cols, out.as_deref(), *activation, dy, grads)
        }
        (LayerSpec::AvgPool2d, Cache::AvgPool { in_shape }) => Ok(avgpool_backward(dy, in_shape)),
        (LayerSpec::MaxPool1d, Cache::MaxPool { argmax, in_shape }) => {
            let mut dx = Tensor::zeros(in_shape);
            for (&src, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[src] += g;
            }
            Ok(dx)
        }
        (LayerSpec::BatchNorm { channels }, Cache::BatchNorm { xhat, inv_std }) => {
            batchnorm_backward(*channels, p, &xhat, &inv_std, dy, grads)
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let data = dy.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            Tensor::new(dy.shape().to_vec(), data)
        }
        (LayerSpec::Reshape { .. }, Cache::Reshape { in_shape }) => dy.clone().reshaped(in_shape),
        (LayerSpec::PositionalAdd { .. }, Cache::PositionalAdd) => {
            let g = grads[0].data_mut();
            for chunk in dy.data().chunks_exact(g.len()) {
                for (a, &v) in g.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            Ok(dy.clone())
        }
        (
            LayerSpec::EncoderLayer {
                d_model,
                heads,
                ffn_dim,
            },
            Cache::Encoder(c),
        ) => encoder_backward(*d_model, *heads, *ffn_dim, p, &c, dy, grads),
        (LayerSpec::TemporalGap, Cache::Gap { in_shape }) => {
            let (b, l, d) = (in_shape[0], in_shape[1], in_shape[2]);
            let inv = T::of(1.0 / l as f64);
            let mut dx = vec![T::zero(); b * l * d];
            for bi in 0..b {
                let g = &dy.data()[bi * d..(bi + 1) * d];
                for row in dx[bi * l * d..(bi + 1) * l * d].chunks_exact_mut(d) {
                    for (o, &v) in row.iter_mut().zip(g) {
                        *o = v * inv;
                    }
                }
            }
            Tensor::new(in_shape, dx)
        }
        (
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            },
            Cache::Dense { x, out, in_shape },
        ) => {
            let rows = x.len() / in_features;
            let mut g = dy.data().to_vec();
            if let Some(out) = out {
                relu_mask(&mut g, &out);
            }
            let dx = dense_backward(&x, &g, &p[0], rows, *in_features, *out_features, grads);
            Tensor::new(in_shape, dx)
        }
        (LayerSpec::LstmBidirectional { hidden, .. }, Cache::Lstm(c)) => lstm_backward(*hidden, p, &c, dy, grads),
        (spec, _) => Err(Error::Shape(format!(
            "cache does not belong to a {} layer",
            spec.kind_name()
        ))),
    }
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    v.iter_mut().for_each(|x| {
        if *x < T::zero() {
            *x = T::zero()
        }
    });
}

fn relu_mask<T: Scalar>(g: &mut [T], out: &[T]) {
    for (gv, &o) in g.iter_mut().zip(out) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// `y (rows×out) = x·W + b`.
fn dense<T: Scalar>(x: &[T], w: &Param<T>, bias: &Param<T>, rows: usize, inp: usize, out: usize, y: &mut [T]) {
    gemm(false, false, rows, out, inp, x, w.value.data(), T::zero(), y);
    add_bias(y, bias.value.data());
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(g: &mut [T], dy: &[T]) {
    for row in dy.chunks_exact(g.len()) {
        for (a, &v) in g.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Accumulates `dW`, `db` into `grads[0..2]` and returns `dx`.
fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &Param<T>,
    rows: usize,
    inp: usize,
    out: usize,
    grads: &mut [Tensor<T>],
) -> Vec<T> {
    gemm(true, false, inp, out, rows, x, dy, T::one(), grads[0].data_mut());
    accumulate_bias_grad(grads[1].data_mut(), dy);
    let mut dx = vec![T::zero(); rows * inp];
    gemm(false, true, rows, inp, out, dy, w.value.data(), T::zero(), &mut dx);
    dx
}

// ---------------------------------------------------------------------------
// Convolution (2D and 1D share the im2col path; 1D uses W = 1).

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn rows(&self) -> usize {
        self.b * self.h * self.w
    }

    /// Calls `f(row, patch_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let patch = self.patch();
        for b in 0..self.b {
            for h in 0..self.h {
                for w in 0..self.w {
                    let row = ((b * self.h + h) * self.w + w) * patch;
                    for dy in 0..self.kh {
                        let hy = h as isize + dy as isize - ph;
                        if hy < 0 || hy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let wx = w as isize + dx as isize - pw;
                            if wx < 0 || wx >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + hy as usize) * self.w + wx as usize) * self.ci;
                            f(row, (dy * self.kw + dx) * self.ci, src);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    p: &[Param<T>],
    x: &Tensor<T>,
    activation: Activation,
    train: bool,
    out_shape: Vec<usize>,
) -> Result<Forward<T>> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let xd = x.data();
    g.for_each_tap(|row, off, src| {
        cols[row + off..row + off + g.ci].copy_from_slice(&xd[src..src + g.ci]);
    });
    let mut y = vec![T::zero(); g.rows() * g.co];
    dense(&cols, &p[0], &p[1], g.rows(), patch, g.co, &mut y);
    if activation == Activation::Relu {
        relu_inplace(&mut y);
    }
    let cache = train.then(|| Cache::Conv {
        out: (activation == Activation::Relu).then(|| y.clone()),
        cols,
        geom: *g,
    });
    Ok(Forward::plain(Tensor::new(out_shape, y)?, cache))
}

fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    p: &[Param<T>],
    cols: &[T],
    out: Option<&[T]>,
    _activation: Activation,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Result<Tensor<T>> {
    let mut d = dy.data().to_vec();
    if let Some(out) = out {
        relu_mask(&mut d, out);
    }
    let dcols = dense_backward(cols, &d, &p[0], g.rows(), g.patch(), g.co, grads);
    let in_shape = if g.kw == 1 && g.w == 1 {
        vec![g.b, g.h, g.ci]
    } else {
        vec![g.b, g.h, g.w, g.ci]
    };
    let mut dx = vec![T::zero(); g.b * g.h * g.w * g.ci];
    g.for_each_tap(|row, off, src| {
        for (o, &v) in dx[src..src + g.ci].iter_mut().zip(&dcols[row + off..row + off + g.ci]) {
            *o += v;
        }
    });
    Tensor::new(in_shape, dx)
}

// ---------------------------------------------------------------------------
// Pooling

fn avgpool_forward<T: Scalar>(x: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let mut y = vec![T::zero(); b * ho * wo * c];
    let xd = x.data();
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let out = &mut y[((bi * ho + i) * wo + j) * c..][..c];
                let rows = (2 * i)..(2 * i + 2).min(h);
                let colsr = (2 * j)..(2 * j + 2).min(w);
                let count = (rows.len() * colsr.len()) as f64;
                for r in rows {
                    for q in colsr.clone() {
                        let src = &xd[((bi * h + r) * w + q) * c..][..c];
                        for (o, &v) in out.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                let inv = T::of(1.0 / count);
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
    }
    Tensor::new(out_shape.to_vec(), y).expect("pool shape")
}

fn avgpool_backward<T: Scalar>(dy: &Tensor<T>, in_shape: Vec<usize>) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let g = &dy.data()[((bi * ho + i) * wo + j) * c..][..c];
                let rows = (2 * i)..(2 * i + 2).min(h);
                let colsr = (2 * j)..(2 * j + 2).min(w);
                let inv = T::of(1.0 / (rows.len() * colsr.len()) as f64);
                for r in rows {
                    for q in colsr.clone() {
                        let dst = &mut dx[((bi * h + r) * w + q) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(g) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx).expect("pool shape")
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, out_shape: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    let lo = out_shape[1];
    let mut y = vec![T::zero(); b * lo * c];
    let mut argmax = vec![0usize; b * lo * c];
    for bi in 0..b {
        for i in 0..lo {
            for ch in 0..c {
                let mut best = (bi * l + 2 * i) * c + ch;
                if 2 * i + 1 < l {
                    let other = best + c;
                    if x.data()[other] > x.data()[best] {
                        best = other;
                    }
                }
                let o = (bi * lo + i) * c + ch;
                y[o] = x.data()[best];
                argmax[o] = best;
            }
        }
    }
    (Tensor::new(out_shape.to_vec(), y).expect("pool shape"), argmax)
}

// ---------------------------------------------------------------------------
// Batch normalization over the last axis

fn batchnorm_forward<T: Scalar>(c: usize, p: &[Param<T>], x: &Tensor<T>, train: bool) -> Result<Forward<T>> {
    let m = x.len() / c;
    let gamma = p[0].value.data();
    let beta = p[1].value.data();
    let xd = x.data();
    let eps = T::of(BN_EPS);

    let (mean, var) = if train {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for row in xd.chunks_exact(c) {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v.f64();
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        for row in xd.chunks_exact(c) {
            for ((a, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                let dlt = v.f64() - mu;
                *a += dlt * dlt;
            }
        }
        var.iter_mut().for_each(|a| *a /= m as f64);
        (
            mean.into_iter().map(T::of).collect::<Vec<T>>(),
            var.into_iter().map(T::of).collect::<Vec<T>>(),
        )
    } else {
        (p[2].value.data().to_vec(), p[3].value.data().to_vec())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for ((xr, hr), yr) in xd
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(y.chunks_exact_mut(c))
    {
        for k in 0..c {
            let h = (xr[k] - mean[k]) * inv_std[k];
            hr[k] = h;
            yr[k] = gamma[k] * h + beta[k];
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    if !train {
        return Ok(Forward::plain(y, None));
    }
    let mom = T::of(BN_MOMENTUM);
    let unbias = if m > 1 {
        T::of(m as f64 / (m - 1) as f64)
    } else {
        T::one()
    };
    let rm: Vec<T> = p[2]
        .value
        .data()
        .iter()
        .zip(&mean)
        .map(|(&r, &b)| (T::one() - mom) * r + mom * b)
        .collect();
    let rv: Vec<T> = p[3]
        .value
        .data()
        .iter()
        .zip(&var)
        .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
        .collect();
    Ok(Forward {
        y,
        cache: Some(Cache::BatchNorm { xhat, inv_std }),
        stats: Some((rm, rv)),
    })
}

fn batchnorm_backward<T: Scalar>(
    c: usize,
    p: &[Param<T>],
    xhat: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Result<Tensor<T>> {
    let m = dy.len() / c;
    let gamma = p[0].value.data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (gr, hr) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for k in 0..c {
            sum_dy[k] += gr[k];
            sum_dy_xhat[k] += gr[k] * hr[k];
        }
    }
    for k in 0..c {
        grads[0].data_mut()[k] += sum_dy_xhat[k];
        grads[1].data_mut()[k] += sum_dy[k];
    }
    let mf = T::of(m as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ((gr, hr), dr) in dy
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        for k in 0..c {
            dr[k] = gamma[k] * inv_std[k] / mf * (mf * gr[k] - sum_dy[k] - hr[k] * sum_dy_xhat[k]);
        }
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Layer normalization (rows of width d)

struct LayerNormOut<T> {
    y: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn layernorm_forward<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> LayerNormOut<T> {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let df = T::of(d as f64);
    let eps = T::of(LN_EPS);
    for (r, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / df;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        let hr = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for k in 0..d {
            hr[k] = (xr[k] - mean) * inv;
            yr[k] = gamma[k] * hr[k] + beta[k];
        }
    }
    LayerNormOut { y, xhat, inv_std }
}

/// Returns `dx`; accumulates into the gamma and beta gradients.
fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    d: usize,
    gamma: &[T],
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Vec<T> {
    let df = T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for (r, (gr, hr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for k in 0..d {
            d_gamma[k] += gr[k] * hr[k];
            d_beta[k] += gr[k];
            dxhat[k] = gr[k] * gamma[k];
            s1 += dxhat[k];
            s2 += dxhat[k] * hr[k];
        }
        let scale = inv_std[r] / df;
        let dr = &mut dx[r * d..(r + 1) * d];
        for k in 0..d {
            dr[k] = scale * (df * dxhat[k] - s1 - hr[k] * s2);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Transformer encoder block

pub(crate) struct EncoderCache<T> {
    b: usize,
    l: usize,
    x: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    xhat1: Vec<T>,
    inv1: Vec<T>,
    y1: Vec<T>,
    f1: Vec<T>,
    xhat2: Vec<T>,
    inv2: Vec<T>,
}

// Parameter slots inside an encoder layer.
const IN_W: usize = 0;
const IN_B: usize = 1;
const OUT_W: usize = 2;
const OUT_B: usize = 3;
const LN1_G: usize = 4;
const LN1_B: usize = 5;
const FF1_W: usize = 6;
const FF1_B: usize = 7;
const FF2_W: usize = 8;
const FF2_B: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;

/// Scaled dot-product attention over a `(b·l) × 3d` QKV buffer.
/// Writes the head-concatenated context into `ctx` and returns the probabilities.
fn attention<T: Scalar>(qkv: &[T], b: usize, l: usize, d: usize, heads: usize, ctx: &mut [T]) -> Vec<T> {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); b * heads * l * l];
    let row = 3 * d;
    for bi in 0..b {
        let base = bi * l;
        for h in 0..heads {
            let p = &mut probs[(bi * heads + h) * l * l..][..l * l];
            for i in 0..l {
                let q = &qkv[(base + i) * row + h * dh..][..dh];
                let pr = &mut p[i * l..(i + 1) * l];
                let mut max = T::neg_infinity();
                for (j, s) in pr.iter_mut().enumerate() {
                    let k = &qkv[(base + j) * row + d + h * dh..][..dh];
                    let dot: T = q.iter().zip(k).map(|(&a, &c)| a * c).sum();
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in pr.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                pr.iter_mut().for_each(|s| *s *= inv);
                let out = &mut ctx[(base + i) * d + h * dh..][..dh];
                out.iter_mut().for_each(|o| *o = T::zero());
                for (j, &pij) in pr.iter().enumerate() {
                    let v = &qkv[(base + j) * row + 2 * d + h * dh..][..dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    probs
}

fn encoder_forward<T: Scalar>(
    d: usize,
    heads: usize,
    f: usize,
    p: &[Param<T>],
    x: &Tensor<T>,
    train: bool,
) -> Result<Forward<T>> {
    let (b, l) = (x.shape()[0], x.shape()[1]);
    let m = b * l;
    let xd = x.data();

    let mut qkv = vec![T::zero(); m * 3 * d];
    dense(xd, &p[IN_W], &p[IN_B], m, d, 3 * d, &mut qkv);
    let mut ctx = vec![T::zero(); m * d];
    let probs = attention(&qkv, b, l, d, heads, &mut ctx);

    let mut h1 = vec![T::zero(); m * d];
    dense(&ctx, &p[OUT_W], &p[OUT_B], m, d, d, &mut h1);
    for (v, &r) in h1.iter_mut().zip(xd) {
        *v += r;
    }
    let ln1 = layernorm_forward(&h1, d, p[LN1_G].value.data(), p[LN1_B].value.data());

    let mut f1 = vec![T::zero(); m * f];
    dense(&ln1.y, &p[FF1_W], &p[FF1_B], m, d, f, &mut f1);
    relu_inplace(&mut f1);
    let mut h2 = vec![T::zero(); m * d];
    dense(&f1, &p[FF2_W], &p[FF2_B], m, f, d, &mut h2);
    for (v, &r) in h2.iter_mut().zip(&ln1.y) {
        *v += r;
    }
    let ln2 = layernorm_forward(&h2, d, p[LN2_G].value.data(), p[LN2_B].value.data());

    let y = Tensor::new(x.shape().to_vec(), ln2.y)?;
    let cache = train.then(|| {
        Cache::Encoder(Box::new(EncoderCache {
            b,
            l,
            x: xd.to_vec(),
            qkv,
            probs,
            ctx,
            xhat1: ln1.xhat,
            inv1: ln1.inv_std,
            y1: ln1.y,
            f1,
            xhat2: ln2.xhat,
            inv2: ln2.inv_std,
        }))
    });
    Ok(Forward::plain(y, cache))
}

fn encoder_backward<T: Scalar>(
    d: usize,
    heads: usize,
    f: usize,
    p: &[Param<T>],
    c: &EncoderCache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Result<Tensor<T>> {
    let (b, l) = (c.b, c.l);
    let m = b * l;

    // y = LN2(h2), h2 = y1 + FFN(y1)
    let (g_ln2, rest) = grads.split_at_mut(LN2_G);
    let _ = g_ln2;
    let (gg, gb) = rest.split_at_mut(1);
    let dh2 = layernorm_backward(
        dy.data(),
        &c.xhat2,
        &c.inv2,
        d,
        p[LN2_G].value.data(),
        gg[0].data_mut(),
        gb[0].data_mut(),
    );

    let mut df1 = dense_backward(&c.f1, &dh2, &p[FF2_W], m, f, d, &mut grads[FF2_W..=FF2_B]);
    relu_mask(&mut df1, &c.f1);
    let mut dy1 = dense_backward(&c.y1, &df1, &p[FF1_W], m, d, f, &mut grads[FF1_W..=FF1_B]);
    for (a, &v) in dy1.iter_mut().zip(&dh2) {
        *a += v;
    }

    // y1 = LN1(h1), h1 = x + attn(x)
    let (head, tail) = grads.split_at_mut(LN1_B);
    let dh1 = layernorm_backward(
        &dy1,
        &c.xhat1,
        &c.inv1,
        d,
        p[LN1_G].value.data(),
        head[LN1_G].data_mut(),
        tail[0].data_mut(),
    );

    let dctx = dense_backward(&c.ctx, &dh1, &p[OUT_W], m, d, d, &mut grads[OUT_W..=OUT_B]);

    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let row = 3 * d;
    let mut dqkv = vec![T::zero(); m * row];
    let mut dp = vec![T::zero(); l];
    let mut ds = vec![T::zero(); l * l];
    for bi in 0..b {
        let base = bi * l;
        for h in 0..heads {
            let probs = &c.probs[(bi * heads + h) * l * l..][..l * l];
            for i in 0..l {
                let dout = &dctx[(base + i) * d + h * dh..][..dh];
                let pr = &probs[i * l..(i + 1) * l];
                let mut dot = T::zero();
                for j in 0..l {
                    let v = &c.qkv[(base + j) * row + 2 * d + h * dh..][..dh];
                    dp[j] = dout.iter().zip(v).map(|(&a, &bb)| a * bb).sum();
                    dot += dp[j] * pr[j];
                    let dv = &mut dqkv[(base + j) * row + 2 * d + h * dh..][..dh];
                    for (o, &g) in dv.iter_mut().zip(dout) {
                        *o += pr[j] * g;
                    }
                }
                for j in 0..l {
                    ds[i * l + j] = pr[j] * (dp[j] - dot) * scale;
                }
            }
            for i in 0..l {
                for j in 0..l {
                    let s = ds[i * l + j];
                    if s == T::zero() {
                        continue;
                    }
                    let qi = (base + i) * row + h * dh;
                    let kj = (base + j) * row + d + h * dh;
                    for t in 0..dh {
                        let kv = c.qkv[kj + t];
                        let qv = c.qkv[qi + t];
                        dqkv[qi + t] += s * kv;
                        dqkv[kj + t] += s * qv;
                    }
                }
            }
        }
    }

    let mut dx = dense_backward(&c.x, &dqkv, &p[IN_W], m, d, 3 * d, &mut grads[IN_W..=IN_B]);
    for (a, &v) in dx.iter_mut().zip(&dh1) {
        *a += v;
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM, gate order [i | f | g | o]

pub(crate) struct LstmCache<T> {
    b: usize,
    l: usize,
    input: usize,
    x: Vec<T>,
    dirs: [LstmDirCache<T>; 2],
}

struct LstmDirCache<T> {
    /// Activated gates per time step, `l × b × 4h`.
    gates: Vec<T>,
    /// Cell states per time step, `l × b × h`.
    cell: Vec<T>,
    /// Hidden states per time step, `l × b × h`.
    hidden: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn lstm_direction<T: Scalar>(
    x: &[T],
    b: usize,
    l: usize,
    input: usize,
    hsz: usize,
    p: &[Param<T>],
    reverse: bool,
    y: &mut [T],
    offset: usize,
) -> LstmDirCache<T> {
    let g4 = 4 * hsz;
    let mut xp = vec![T::zero(); b * l * g4];
    dense(x, &p[0], &p[2], b * l, input, g4, &mut xp);
    let w_hh = p[1].value.data();

    let mut gates = vec![T::zero(); l * b * g4];
    let mut cell = vec![T::zero(); l * b * hsz];
    let mut hidden = vec![T::zero(); l * b * hsz];
    let mut pre = vec![T::zero(); b * g4];
    let zeros = vec![T::zero(); b * hsz];

    for s in 0..l {
        let t = if reverse { l - 1 - s } else { s };
        let prev = if s == 0 {
            None
        } else {
            Some(if reverse { t + 1 } else { t - 1 })
        };
        for bi in 0..b {
            pre[bi * g4..(bi + 1) * g4].copy_from_slice(&xp[(bi * l + t) * g4..][..g4]);
        }
        let (h_prev, c_prev): (&[T], &[T]) = match prev {
            Some(pt) => (
                &hidden[pt * b * hsz..(pt + 1) * b * hsz],
                &cell[pt * b * hsz..(pt + 1) * b * hsz],
            ),
            None => (&zeros, &zeros),
        };
        if prev.is_some() {
            gemm(false, false, b, g4, hsz, h_prev, w_hh, T::one(), &mut pre);
        }
        let c_prev = c_prev.to_vec();
        let gt = &mut gates[t * b * g4..(t + 1) * b * g4];
        let mut c_new = vec![T::zero(); b * hsz];
        let mut h_new = vec![T::zero(); b * hsz];
        for bi in 0..b {
            let pr = &pre[bi * g4..(bi + 1) * g4];
            let ga = &mut gt[bi * g4..(bi + 1) * g4];
            for j in 0..hsz {
                let i = sigmoid(pr[j]);
                let fg = sigmoid(pr[hsz + j]);
                let g = pr[2 * hsz + j].tanh();
                let o = sigmoid(pr[3 * hsz + j]);
                ga[j] = i;
                ga[hsz + j] = fg;
                ga[2 * hsz + j] = g;
                ga[3 * hsz + j] = o;
                let c = fg * c_prev[bi * hsz + j] + i * g;
                c_new[bi * hsz + j] = c;
                let h = o * c.tanh();
                h_new[bi * hsz + j] = h;
                y[(bi * l + t) * 2 * hsz + offset + j] = h;
            }
        }
        cell[t * b * hsz..(t + 1) * b * hsz].copy_from_slice(&c_new);
        hidden[t * b * hsz..(t + 1) * b * hsz].copy_from_slice(&h_new);
    }
    LstmDirCache { gates, cell, hidden }
}

fn lstm_forward<T: Scalar>(
    hsz: usize,
    p: &[Param<T>],
    x: &Tensor<T>,
    train: bool,
    out_shape: Vec<usize>,
) -> Result<Forward<T>> {
    let (b, l, input) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = vec![T::zero(); b * l * 2 * hsz];
    let fwd = lstm_direction(x.data(), b, l, input, hsz, &p[0..3], false, &mut y, 0);
    let bwd = lstm_direction(x.data(), b, l, input, hsz, &p[3..6], true, &mut y, hsz);
    let cache = train.then(|| {
        Cache::Lstm(Box::new(LstmCache {
            b,
            l,
            input,
            x: x.data().to_vec(),
            dirs: [fwd, bwd],
        }))
    });
    Ok(Forward::plain(Tensor::new(out_shape, y)?, cache))
}

#[allow(clippy::too_many_arguments)]
fn lstm_direction_backward<T: Scalar>(
    c: &LstmCache<T>,
    dir: usize,
    hsz: usize,
    p: &[Param<T>],
    dy: &[T],
    grads: &mut [Tensor<T>],
    dx: &mut [T],
) {
    let (b, l, input) = (c.b, c.l, c.input);
    let g4 = 4 * hsz;
    let reverse = dir == 1;
    let offset = dir * hsz;
    let cache = &c.dirs[dir];
    let w_hh = p[1].value.data();

    let mut dxp = vec![T::zero(); b * l * g4];
    let mut dh_next = vec![T::zero(); b * hsz];
    let mut dc_next = vec![T::zero(); b * hsz];
    let mut dg = vec![T::zero(); b * g4];

    for s in (0..l).rev() {
        let t = if reverse { l - 1 - s } else { s };
        let prev = if s == 0 {
            None
        } else {
            Some(if reverse { t + 1 } else { t - 1 })
        };
        let gt = &cache.gates[t * b * g4..(t + 1) * b * g4];
        let ct = &cache.cell[t * b * hsz..(t + 1) * b * hsz];
        for bi in 0..b {
            for j in 0..hsz {
                let k = bi * hsz + j;
                let ga = &gt[bi * g4..(bi + 1) * g4];
                let (i, fg, g, o) = (ga[j], ga[hsz + j], ga[2 * hsz + j], ga[3 * hsz + j]);
                let dh = dy[(bi * l + t) * 2 * hsz + offset + j] + dh_next[k];
                let tc = ct[k].tanh();
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[k];
                let c_prev = match prev {
                    Some(pt) => cache.cell[pt * b * hsz + k],
                    None => T::zero(),
                };
                let di = dc * g;
                let dgg = dc * i;
                let df = dc * c_prev;
                dc_next[k] = dc * fg;
                let row = &mut dg[bi * g4..(bi + 1) * g4];
                row[j] = di * i * (T::one() - i);
                row[hsz + j] = df * fg * (T::one() - fg);
                row[2 * hsz + j] = dgg * (T::one() - g * g);
                row[3 * hsz + j] = d_o * o * (T::one() - o);
            }
            dxp[(bi * l + t) * g4..][..g4].copy_from_slice(&dg[bi * g4..(bi + 1) * g4]);
        }
        match prev {
            Some(pt) => {
                let h_prev = &cache.hidden[pt * b * hsz..(pt + 1) * b * hsz];
                gemm(true, false, hsz, g4, b, h_prev, &dg, T::one(), grads[1].data_mut());
                gemm(false, true, b, hsz, g4, &dg, w_hh, T::zero(), &mut dh_next);
            }
            None => dh_next.iter_mut().for_each(|v| *v = T::zero()),
        }
    }
    gemm(true, false, input, g4, b * l, &c.x, &dxp, T::one(), grads[0].data_mut());
    accumulate_bias_grad(grads[2].data_mut(), &dxp);
    gemm(false, true, b * l, input, g4, &dxp, p[0].value.data(), T::one(), dx);
}

fn lstm_backward<T: Scalar>(
    hsz: usize,
    p: &[Param<T>],
    c: &LstmCache<T>,
    dy: &Tensor<T>,
    grads: &mut [Tensor<T>],
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); c.b * c.l * c.input];
    let (gf, gb) = grads.split_at_mut(3);
    lstm_direction_backward(c, 0, hsz, &p[0..3], dy.data(), gf, &mut dx);
    lstm_direction_backward(c, 1, hsz, &p[3..6], dy.data(), gb, &mut dx);
    Tensor::new(vec![c.b, c.l, c.input], dx)
}
