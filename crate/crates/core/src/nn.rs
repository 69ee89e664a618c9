//! Parameter storage and the small set of layers the backbones are built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Exec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in registration order.
///
/// `decay` marks weights that take weight decay and layer-wise adaptation;
/// biases and normalization gains do not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// The first `n` registered parameters as a new store. Ids below `n`
    /// stay valid in the result.
    pub fn truncated(&self, n: usize) -> ParamStore {
        let mut out = ParamStore::new();
        for i in 0..n.min(self.len()) {
            out.register(self.names[i].clone(), self.tensors[i].clone(), self.decay[i]);
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A forward pass in progress: a graph plus lazily bound parameters.
///
/// With `trainable == false` parameters enter the graph as constants, so no
/// gradient can reach them.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self::with_exec(store, trainable, Exec::default())
    }

    pub fn with_exec(store: &'a ParamStore, trainable: bool, exec: Exec) -> Self {
        Session {
            g: Graph::with_exec(exec),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.leaf(t)
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients aligned with the store; `None` for parameters
    /// that were not used or are frozen.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)))
            .collect()
    }
}

/// Weight initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
}

impl Init {
    pub fn build(self, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::XavierUniform { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(shape, -b, b, rng)
            }
            Init::KaimingNormal { fan_in } => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
    prefix: String,
}

impl<'s, R: Rng> Builder<'s, R> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut R, prefix: &str) -> Self {
        Builder {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>, init: Init, decay: bool) -> ParamId {
        let t = init.build(shape, self.rng);
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.register(full, t, decay)
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }
}

/// `y = x W + b` with `W: (in, out)`, applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = b.param(
            "weight",
            vec![in_dim, out_dim],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            true,
        );
        let bias = bias.then(|| b.param("bias", vec![out_dim], Init::Zeros, false));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let y = s.g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.g.add(y, b)
            }
            None => y,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Self {
        LayerNorm {
            gamma: b.param("gamma", vec![dim], Init::Ones, false),
            beta: b.param("beta", vec![dim], Init::Zeros, false),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let n = s.g.normalize_last(x, self.eps);
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let y = s.g.mul(n, gamma);
        s.g.add(y, beta)
    }
}

/// Group normalization over NCHW input with per-channel affine terms.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    /// Largest divisor of `channels` not exceeding 32.
    pub fn default_groups(channels: usize) -> usize {
        (1..=channels.min(32))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }

    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize) -> Self {
        GroupNorm {
            gamma: b.param("gamma", vec![channels, 1, 1], Init::Ones, false),
            beta: b.param("beta", vec![channels, 1, 1], Init::Zeros, false),
            groups: Self::default_groups(channels),
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let shape = s.g.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let grouped = s.g.reshape(x, &[b, self.groups, c / self.groups * h * w]);
        let n = s.g.normalize_last(grouped, self.eps);
        let n = s.g.reshape(n, &shape);
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let y = s.g.mul(n, gamma);
        s.g.add(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch / geom.groups * kernel * kernel;
        let weight = b.param(
            "weight",
            vec![out_ch, in_ch / geom.groups, kernel, kernel],
            Init::KaimingNormal { fan_in },
            true,
        );
        let bias = bias.then(|| b.param("bias", vec![out_ch, 1, 1], Init::Zeros, false));
        Conv2d {
            weight,
            bias,
            geom,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.param(self.weight);
        let y = s.g.conv2d(x, w, self.geom);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.g.add(y, b)
            }
            None => y,
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize, groups: usize, bias: bool) -> usize {
        out_ch * (in_ch / groups) * kernel * kernel + if bias { out_ch } else { 0 }
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, hidden: usize, out: usize) -> Self {
        Mlp {
            fc1: Linear::new(&mut b.sub("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, out, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.g.gelu(h);
        self.fc2.forward(s, h)
    }
}
