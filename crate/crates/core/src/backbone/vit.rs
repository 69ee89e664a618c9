//! Plain vision transformer: patch embedding, class token, learned absolute
//! positions, global pre-norm blocks.

use rand::Rng;

use super::attention::GlobalAttention;
use crate::autograd::Var;
use crate::kernels::ConvGeom;
use crate::nn::{Builder, Conv2d, Init, LayerNorm, Mlp, ParamId, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: GlobalAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl VitBlock {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let h = self.norm1.forward(s, x);
        let h = self.attn.forward(s, h);
        let x = s.g.add(x, h);
        let h = self.norm2.forward(s, x);
        let h = self.mlp.forward(s, h);
        s.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub patch_embed: Conv2d,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<VitBlock>,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl Vit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        image_size: usize,
        in_channels: usize,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let geom = ConvGeom {
            stride: patch,
            ..Default::default()
        };
        let tokens = (image_size / patch) * (image_size / patch) + 1;
        Vit {
            patch_embed: Conv2d::new(&mut b.sub("patch_embed"), in_channels, dim, patch, geom, true),
            cls_token: b.param("cls_token", vec![1, 1, dim], Init::Normal(0.02), false),
            pos_embed: b.param("pos_embed", vec![1, tokens, dim], Init::Normal(0.02), false),
            blocks: (0..depth)
                .map(|i| {
                    let mut bb = b.sub(&format!("blocks.{i}"));
                    VitBlock {
                        norm1: LayerNorm::new(&mut bb.sub("norm1"), dim),
                        attn: GlobalAttention::new(&mut bb.sub("attn"), dim, heads),
                        norm2: LayerNorm::new(&mut bb.sub("norm2"), dim),
                        mlp: Mlp::new(&mut bb.sub("mlp"), dim, dim * mlp_ratio, dim),
                    }
                })
                .collect(),
            norm: LayerNorm::new(&mut b.sub("norm"), dim),
            dim,
        }
    }

    /// Class-token embedding `(B, dim)`.
    pub fn forward(&self, s: &mut Session<'_>, images: Var) -> Var {
        let p = self.patch_embed.forward(s, images);
        let shape = s.g.shape(p).to_vec();
        let (b, d, n) = (shape[0], shape[1], shape[2] * shape[3]);
        let p = s.g.reshape(p, &[b, d, n]);
        let p = s.g.permute(p, &[0, 2, 1]);
        let zeros = s.g.constant(Tensor::zeros([b, 1, d]));
        let cls = s.param(self.cls_token);
        let cls = s.g.add(zeros, cls);
        let x = s.g.concat(&[cls, p], 1);
        let pos = s.param(self.pos_embed);
        let mut x = s.g.add(x, pos);
        for blk in &self.blocks {
            x = blk.forward(s, x);
        }
        let x = self.norm.forward(s, x);
        let c = s.g.narrow(x, 1, 0, 1);
        s.g.reshape(c, &[b, d])
    }
}
