//! Hybrid conv-attention encoder built from reduction and normal cells.
//!
//! A reduction cell downsamples its input by the stage ratio through two
//! parallel branches: a pyramid of dilated strided convolutions followed by
//! window attention, and a convolutional branch embedding local context. A
//! normal cell keeps the grid size and adds windowed attention and a
//! depthwise convolutional branch to a residual stream. Both cells use
//! pre-norm and end with a residual feed-forward block.
//!
//! Token grids inside the graph are `(B, H, W, C)`.

use rand::Rng;

use super::attention::WindowAttention;
use super::window::TokenGrid;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Builder, Conv2d, LayerNorm, Linear, Mlp, ParamStore, Session};
use crate::tensor::Tensor;

/// Hyperparameters shared by the cells of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub in_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub reduction: usize,
    pub mlp_ratio: usize,
    pub dilations: Vec<usize>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "stage dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.window == 0 || self.reduction == 0 || self.dilations.is_empty() {
            return Err(Error::Config(
                "window, reduction and dilations must be non-empty/positive".into(),
            ));
        }
        Ok(())
    }
}

fn to_nchw(s: &mut Session<'_>, x: Var) -> Var {
    s.g.permute(x, &[0, 3, 1, 2])
}

fn to_bhwc(s: &mut Session<'_>, x: Var) -> Var {
    s.g.permute(x, &[0, 2, 3, 1])
}

/// Pyramid reduction: parallel dilated 3×3 convolutions with the stage stride,
/// concatenated along channels.
#[derive(Clone, Debug)]
pub struct PyramidReduction {
    pub convs: Vec<Conv2d>,
}

impl PyramidReduction {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &StageConfig) -> Self {
        let convs = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let geom = ConvGeom {
                    stride: cfg.reduction,
                    padding: d,
                    dilation: d,
                    groups: 1,
                };
                Conv2d::new(&mut b.sub(&i.to_string()), cfg.in_dim, cfg.dim, 3, geom, true)
            })
            .collect();
        PyramidReduction { convs }
    }

    /// NCHW in, BHWC out with `dilations.len() * dim` channels.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let branches: Vec<Var> = self
            .convs
            .iter()
            .map(|c| {
                let y = c.forward(s, x);
                s.g.gelu(y)
            })
            .collect();
        let y = s.g.concat(&branches, 1);
        to_bhwc(s, y)
    }
}

/// Convolutional branch: a 3×3 convolution (strided in reduction cells,
/// depthwise in normal cells), GELU, then a 1×1 projection.
#[derive(Clone, Debug)]
pub struct ParallelConv {
    pub spatial: Conv2d,
    pub pointwise: Conv2d,
}

impl ParallelConv {
    pub fn reduction<R: Rng>(b: &mut Builder<'_, R>, cfg: &StageConfig) -> Self {
        let geom = ConvGeom {
            stride: cfg.reduction,
            padding: 1,
            ..Default::default()
        };
        ParallelConv {
            spatial: Conv2d::new(&mut b.sub("spatial"), cfg.in_dim, cfg.dim, 3, geom, true),
            pointwise: Conv2d::new(&mut b.sub("pointwise"), cfg.dim, cfg.dim, 1, ConvGeom::default(), true),
        }
    }

    pub fn normal<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Self {
        let geom = ConvGeom {
            padding: 1,
            groups: dim,
            ..Default::default()
        };
        ParallelConv {
            spatial: Conv2d::new(&mut b.sub("spatial"), dim, dim, 3, geom, true),
            pointwise: Conv2d::new(&mut b.sub("pointwise"), dim, dim, 1, ConvGeom::default(), true),
        }
    }

    /// NCHW in, BHWC out.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let y = self.spatial.forward(s, x);
        let y = s.g.gelu(y);
        let y = self.pointwise.forward(s, y);
        to_bhwc(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct ReductionCell {
    pub prm: PyramidReduction,
    pub prm_norm: LayerNorm,
    pub attn: WindowAttention,
    pub pcm: ParallelConv,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
    pub cfg: StageConfig,
}

impl ReductionCell {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &StageConfig) -> Self {
        let cat = cfg.dilations.len() * cfg.dim;
        ReductionCell {
            prm: PyramidReduction::new(&mut b.sub("prm"), cfg),
            prm_norm: LayerNorm::new(&mut b.sub("prm_norm"), cat),
            attn: WindowAttention::new(&mut b.sub("attn"), cat, cfg.dim, cfg.heads, cfg.window),
            pcm: ParallelConv::reduction(&mut b.sub("pcm"), cfg),
            ffn_norm: LayerNorm::new(&mut b.sub("ffn_norm"), cfg.dim),
            ffn: Mlp::new(&mut b.sub("ffn"), cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dim),
            cfg: cfg.clone(),
        }
    }

    /// `x: (B, C_in, H, W)` → `(B, H / r, W / r, dim)`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let ctx = self.prm.forward(s, x);
        let ctx = self.prm_norm.forward(s, ctx);
        let a = self.attn.forward(s, ctx);
        let local = self.pcm.forward(s, x);
        let y = s.g.add(a, local);
        let h = self.ffn_norm.forward(s, y);
        let h = self.ffn.forward(s, h);
        s.g.add(y, h)
    }

    /// Inference on a concrete image or feature map.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<TokenGrid> {
        let r = self.cfg.reduction;
        if x.ndim() != 4 || x.dim(1) != self.cfg.in_dim {
            return Err(Error::Shape(format!(
                "reduction cell expects (B, {}, H, W), got {:?}",
                self.cfg.in_dim,
                x.shape()
            )));
        }
        if x.dim(2) % r != 0 || x.dim(3) % r != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by reduction {r}",
                x.dim(2),
                x.dim(3)
            )));
        }
        let mut s = Session::new(store, false);
        let v = s.g.constant(x.clone());
        let y = self.forward(&mut s, v);
        TokenGrid::from_bhwc(s.g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct NormalCell {
    pub attn_norm: LayerNorm,
    pub attn: WindowAttention,
    pub pcm: ParallelConv,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
    pub dim: usize,
}

impl NormalCell {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &StageConfig) -> Self {
        NormalCell {
            attn_norm: LayerNorm::new(&mut b.sub("attn_norm"), cfg.dim),
            attn: WindowAttention::new(&mut b.sub("attn"), cfg.dim, cfg.dim, cfg.heads, cfg.window),
            pcm: ParallelConv::normal(&mut b.sub("pcm"), cfg.dim),
            ffn_norm: LayerNorm::new(&mut b.sub("ffn_norm"), cfg.dim),
            ffn: Mlp::new(&mut b.sub("ffn"), cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dim),
            dim: cfg.dim,
        }
    }

    /// `x: (B, H, W, dim)` → same shape.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let n = self.attn_norm.forward(s, x);
        let a = self.attn.forward(s, n);
        let nchw = to_nchw(s, x);
        let local = self.pcm.forward(s, nchw);
        let y = s.g.add(x, a);
        let y = s.g.add(y, local);
        let h = self.ffn_norm.forward(s, y);
        let h = self.ffn.forward(s, h);
        s.g.add(y, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &TokenGrid) -> Result<TokenGrid> {
        if x.dim() != self.dim {
            return Err(Error::Shape(format!(
                "normal cell expects dim {}, got {}",
                self.dim,
                x.dim()
            )));
        }
        let mut s = Session::new(store, false);
        let v = s.g.constant(x.to_bhwc());
        let y = self.forward(&mut s, v);
        TokenGrid::from_bhwc(s.g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub reduction: ReductionCell,
    pub normals: Vec<NormalCell>,
}

#[derive(Clone, Debug)]
pub struct VitaeV2 {
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Option<Linear>,
    pub embed_dim: usize,
}

impl VitaeV2 {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, stages: &[(StageConfig, usize)], embed_dim: usize) -> Self {
        let built = stages
            .iter()
            .enumerate()
            .map(|(i, (cfg, depth))| {
                let mut sb = b.sub(&format!("stages.{i}"));
                Stage {
                    reduction: ReductionCell::new(&mut sb.sub("rc"), cfg),
                    normals: (0..*depth)
                        .map(|j| NormalCell::new(&mut sb.sub(&format!("nc.{j}")), cfg))
                        .collect(),
                }
            })
            .collect();
        let last = stages.last().map(|(c, _)| c.dim).unwrap_or(embed_dim);
        VitaeV2 {
            stages: built,
            norm: LayerNorm::new(&mut b.sub("norm"), last),
            head: (last != embed_dim).then(|| Linear::new(&mut b.sub("head"), last, embed_dim, true)),
            embed_dim,
        }
    }

    /// Final-stage token grid `(B, H, W, C)` before pooling.
    pub fn tokens(&self, s: &mut Session<'_>, images: Var) -> Var {
        let mut x = images;
        let mut grid = images;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = to_nchw(s, grid);
            }
            grid = stage.reduction.forward(s, x);
            for nc in &stage.normals {
                grid = nc.forward(s, grid);
            }
        }
        grid
    }

    pub fn forward(&self, s: &mut Session<'_>, images: Var) -> Var {
        let grid = self.tokens(s, images);
        let shape = s.g.shape(grid).to_vec();
        let t = s.g.reshape(grid, &[shape[0], shape[1] * shape[2], shape[3]]);
        let t = self.norm.forward(s, t);
        let pooled = s.g.mean_axis(t, 1);
        match &self.head {
            Some(h) => h.forward(s, pooled),
            None => pooled,
        }
    }
}
