use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Cache, LayerSpec};
use super::vpw::{read_vpw1, write_vpw1, NamedTensor};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named weight tensor. Running statistics are stored as non-trainable params.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Result of [`ModelGraph::backward`]. `params[i]` belongs to `graph.params()[i]`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: std::ops::Range<usize>,
}

/// An ordered chain of layers with named weights.
///
/// Shapes are validated when the graph is built, so a graph that constructs
/// successfully accepts any batch of its declared per-sample input shape.
pub struct ModelGraph<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
    caches: Option<Vec<Option<Cache<T>>>>,
}

impl<T: Scalar> Clone for ModelGraph<T> {
    /// Clones weights and RNG state; retained activations are not copied.
    fn clone(&self) -> Self {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            params: self.params.clone(),
            rng: self.rng.clone(),
            caches: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("input_shape", &self.input_shape)
            .field("layers", &self.nodes.iter().map(|n| &n.name).collect::<Vec<_>>())
            .field("params", &self.count_params())
            .finish()
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds a graph for per-sample inputs of `input_shape` and initializes
    /// every weight from a ChaCha8 stream seeded with `seed`, in layer order.
    pub fn new(input_shape: Vec<usize>, layers: Vec<(String, LayerSpec)>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.clone();
        let mut nodes = Vec::with_capacity(layers.len());
        let mut params: Vec<Param<T>> = Vec::new();
        for (name, spec) in layers {
            if nodes.iter().any(|n: &Node| n.name == name) {
                return Err(Error::Config(format!("duplicate layer name {name:?}")));
            }
            let out = spec
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {name:?}: {e}")))?;
            let start = params.len();
            for d in spec.param_defs() {
                params.push(Param {
                    name: format!("{name}.{}", d.suffix),
                    value: layers::init_param(&d, &mut rng),
                    trainable: d.trainable,
                });
            }
            nodes.push(Node {
                name,
                spec,
                in_shape: shape,
                out_shape: out.clone(),
                params: start..params.len(),
            });
            shape = out;
        }
        Ok(ModelGraph {
            input_shape,
            nodes,
            params,
            rng,
            caches: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.nodes
            .last()
            .map(|n| n.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    /// `(name, spec, per-sample output shape)` for every layer, in order.
    pub fn layers(&self) -> impl Iterator<Item = (&str, &LayerSpec, &[usize])> {
        self.nodes
            .iter()
            .map(|n| (n.name.as_str(), &n.spec, n.out_shape.as_slice()))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Reseeds the stream that draws dropout masks.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Total element count of all weight tensors, running statistics included.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_trainable_params(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// FLOPs for one sample of the declared input shape.
    pub fn count_flops(&self) -> u64 {
        self.flops_per_layer().iter().map(|(_, f)| f).sum()
    }

    pub fn flops_per_layer(&self) -> Vec<(String, u64)> {
        self.nodes
            .iter()
            .map(|n| (n.name.clone(), n.spec.flops(&n.in_shape)))
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] || x.batch() == 0 {
            return Err(Error::Shape(format!(
                "graph expects (B, {}) input, got {:?}",
                self.input_shape
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs the graph. Train mode uses batch statistics and dropout, updates
    /// running statistics, and retains activations for [`Self::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check_input(x)?;
        self.caches = None;
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut cur = x.clone();
        for node in &self.nodes {
            let p = &self.params[node.params.clone()];
            let out = layers::forward(&node.spec, p, &cur, true, &mut self.rng)?;
            if !out.y.all_finite() {
                return Err(Error::NonFinite(format!("layer {:?}", node.name)));
            }
            if let Some((mean, var)) = out.stats {
                let idx = node.params.start;
                self.params[idx + 2].value.data_mut().copy_from_slice(&mean);
                self.params[idx + 3].value.data_mut().copy_from_slice(&var);
            }
            caches.push(out.cache);
            cur = out.y;
        }
        self.caches = Some(caches);
        Ok(cur)
    }

    /// Inference-mode forward on an immutable graph.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        // Infer mode never draws from the stream.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cur = x.clone();
        for node in &self.nodes {
            let p = &self.params[node.params.clone()];
            let out = layers::forward(&node.spec, p, &cur, false, &mut rng)?;
            if !out.y.all_finite() {
                return Err(Error::NonFinite(format!("layer {:?}", node.name)));
            }
            cur = out.y;
        }
        Ok(cur)
    }

    /// Backpropagates `upstream` (gradient of the loss w.r.t. the last train
    /// forward output). Consumes the retained activations.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let caches = self.caches.take().ok_or(Error::BackwardBeforeForward)?;
        let mut grads: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        let mut g = upstream.clone();
        for (node, cache) in self.nodes.iter().zip(caches).rev() {
            let mut expected = vec![g.batch()];
            expected.extend_from_slice(&node.out_shape);
            if g.shape() != expected.as_slice() {
                return Err(Error::Shape(format!(
                    "upstream gradient for {:?} has shape {:?}, expected {expected:?}",
                    node.name,
                    g.shape()
                )));
            }
            let cache = cache.ok_or(Error::BackwardBeforeForward)?;
            let p = &self.params[node.params.clone()];
            g = layers::backward(&node.spec, p, cache, &g, &mut grads[node.params.clone()])?;
        }
        Ok(Gradients {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            params: grads,
            input: g,
        })
    }

    /// Same graph with weights converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            rng: self.rng.clone(),
            caches: None,
        }
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.f64() as f32).collect(),
            })
            .collect()
    }

    /// Replaces every weight. Names and shapes must match the graph exactly.
    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::format(
                "weights",
                format!("expected {} tensors, found {}", self.params.len(), tensors.len()),
            ));
        }
        for t in tensors {
            let p = self
                .params
                .iter()
                .find(|p| p.name == t.name)
                .ok_or_else(|| Error::format("weights", format!("unknown tensor {:?}", t.name)))?;
            if p.value.shape() != t.shape.as_slice() {
                return Err(Error::format(
                    "weights",
                    format!("{:?} has shape {:?}, expected {:?}", t.name, t.shape, p.value.shape()),
                ));
            }
        }
        for t in tensors {
            let p = self.param_mut(&t.name).expect("checked above");
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_vpw1(&mut w, &self.to_named_tensors())?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_vpw1(&mut std::io::BufReader::new(file))?;
        self.load_named_tensors(&tensors)
    }
}
