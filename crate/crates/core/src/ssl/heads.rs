//! Projection and prediction heads placed on top of a backbone embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{Builder, Init, LayerNorm, Linear, ParamId, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    /// Width of the L2-normalized bottleneck (self-distillation head only).
    pub bottleneck_dim: usize,
    /// Output size: the number of prototypes `K` for self-distillation, the
    /// projection size otherwise.
    pub out_dim: usize,
}

impl HeadConfig {
    pub fn toy() -> Self {
        HeadConfig {
            hidden_dim: 64,
            bottleneck_dim: 32,
            out_dim: 64,
        }
    }

    pub fn full() -> Self {
        HeadConfig {
            hidden_dim: 2048,
            bottleneck_dim: 256,
            out_dim: 4096,
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Three-layer GELU MLP into an L2-normalized bottleneck followed by a
/// weight-normalized, bias-free prototype layer with unit gain.
#[derive(Clone, Debug)]
pub struct DinoHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub prototypes: ParamId,
}

impl DinoHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, cfg: &HeadConfig) -> Self {
        DinoHead {
            fc1: Linear::new(&mut b.sub("fc1"), in_dim, cfg.hidden_dim, true),
            fc2: Linear::new(&mut b.sub("fc2"), cfg.hidden_dim, cfg.hidden_dim, true),
            fc3: Linear::new(&mut b.sub("fc3"), cfg.hidden_dim, cfg.bottleneck_dim, true),
            prototypes: b.param(
                "prototypes",
                vec![cfg.bottleneck_dim, cfg.out_dim],
                Init::Normal(0.02),
                true,
            ),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.g.gelu(h);
        let h = self.fc2.forward(s, h);
        let h = s.g.gelu(h);
        let h = self.fc3.forward(s, h);
        let h = s.g.l2_normalize_last(h);
        let w = s.param(self.prototypes);
        let wt = s.g.transpose_last(w);
        let wt = s.g.l2_normalize_last(wt);
        let w = s.g.transpose_last(wt);
        s.g.matmul(h, w)
    }
}

/// Two-layer MLP `Linear → [LayerNorm] → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct ProjectionMlp {
    pub fc1: Linear,
    pub norm: Option<LayerNorm>,
    pub fc2: Linear,
}

impl ProjectionMlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, hidden: usize, out: usize, norm: bool) -> Self {
        ProjectionMlp {
            fc1: Linear::new(&mut b.sub("fc1"), in_dim, hidden, true),
            norm: norm.then(|| LayerNorm::new(&mut b.sub("norm"), hidden)),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, out, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let mut h = self.fc1.forward(s, x);
        if let Some(n) = &self.norm {
            h = n.forward(s, h);
        }
        let h = s.g.relu(h);
        self.fc2.forward(s, h)
    }
}
