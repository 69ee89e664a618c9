//! Image encoders producing a fixed-size embedding per image.
//!
//! Three families sit behind [`Backbone`]: the hybrid conv-attention encoder
//! ([`vitae::VitaeV2`], mean-pooled final tokens), a plain ViT (class token),
//! and a bottleneck ResNet (global average pool).

pub mod attention;
pub mod resnet;
pub mod vit;
pub mod vitae;
pub mod window;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore, Session};
use crate::tensor::Tensor;

pub use vitae::StageConfig;
pub use window::{window_partition, window_reverse, TokenGrid, WindowBlocks, WindowPadding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Vitaev2,
    Vit,
    Resnet50,
}

impl BackboneKind {
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Vitaev2 => "ViTAEv2",
            BackboneKind::Vit => "ViT",
            BackboneKind::Resnet50 => "ResNet-50",
        }
    }
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_dilations() -> Vec<usize> {
    vec![1, 2, 3]
}

/// Declarative encoder description. Fields that do not apply to a kind are
/// ignored for it (for example `window_size` for ResNet).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub image_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub stage_dims: Vec<usize>,
    #[serde(default)]
    pub stage_depths: Vec<usize>,
    #[serde(default)]
    pub num_heads: Vec<usize>,
    #[serde(default)]
    pub window_size: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub reduction_ratios: Vec<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_dilations")]
    pub prm_dilations: Vec<usize>,
}

impl BackboneConfig {
    /// Full-scale hybrid encoder, about 19.3M parameters.
    pub fn vitaev2_reference() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vitaev2,
            image_size: 224,
            in_channels: 3,
            embed_dim: 512,
            stage_dims: vec![64, 128, 256, 512],
            stage_depths: vec![1, 1, 6, 1],
            num_heads: vec![1, 2, 4, 8],
            window_size: 7,
            patch_size: 0,
            reduction_ratios: vec![4, 2, 2, 2],
            mlp_ratio: 4,
            prm_dilations: vec![1, 2],
        }
    }

    /// Desk-scale hybrid encoder for 32×32 single-channel inputs.
    pub fn vitaev2_tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vitaev2,
            image_size: 32,
            in_channels: 1,
            embed_dim: 32,
            stage_dims: vec![16, 32],
            stage_depths: vec![1, 1],
            num_heads: vec![1, 2],
            window_size: 4,
            patch_size: 0,
            reduction_ratios: vec![4, 2],
            mlp_ratio: 2,
            prm_dilations: vec![1, 2],
        }
    }

    /// ViT-S/16 without a classification head.
    pub fn vit_small_16() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vit,
            image_size: 224,
            in_channels: 3,
            embed_dim: 384,
            stage_dims: vec![],
            stage_depths: vec![12],
            num_heads: vec![6],
            window_size: 0,
            patch_size: 16,
            reduction_ratios: vec![],
            mlp_ratio: 4,
            prm_dilations: default_dilations(),
        }
    }

    pub fn vit_tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vit,
            image_size: 32,
            in_channels: 1,
            embed_dim: 32,
            stage_dims: vec![],
            stage_depths: vec![2],
            num_heads: vec![2],
            window_size: 0,
            patch_size: 8,
            reduction_ratios: vec![],
            mlp_ratio: 2,
            prm_dilations: default_dilations(),
        }
    }

    /// ResNet-50 trunk without the classifier.
    pub fn resnet50() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet50,
            image_size: 224,
            in_channels: 3,
            embed_dim: 2048,
            stage_dims: vec![256, 512, 1024, 2048],
            stage_depths: vec![3, 4, 6, 3],
            num_heads: vec![],
            window_size: 0,
            patch_size: 0,
            reduction_ratios: vec![],
            mlp_ratio: 4,
            prm_dilations: default_dilations(),
        }
    }

    pub fn resnet_tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet50,
            image_size: 32,
            in_channels: 1,
            embed_dim: 64,
            stage_dims: vec![32, 64],
            stage_depths: vec![1, 1],
            num_heads: vec![],
            window_size: 0,
            patch_size: 0,
            reduction_ratios: vec![],
            mlp_ratio: 4,
            prm_dilations: default_dilations(),
        }
    }

    /// Named presets: `vitaev2-reference`, `vitaev2-tiny`, `vit-s16`,
    /// `vit-tiny`, `resnet50`, `resnet-tiny`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vitaev2-reference" => Self::vitaev2_reference(),
            "vitaev2-tiny" => Self::vitaev2_tiny(),
            "vit-s16" => Self::vit_small_16(),
            "vit-tiny" => Self::vit_tiny(),
            "resnet50" => Self::resnet50(),
            "resnet-tiny" => Self::resnet_tiny(),
            _ => return None,
        })
    }

    /// Per-stage settings of the hybrid encoder, paired with normal-cell depth.
    pub fn vitae_stages(&self) -> Vec<(StageConfig, usize)> {
        let mut in_dim = self.in_channels;
        self.stage_dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| {
                let cfg = StageConfig {
                    in_dim,
                    dim,
                    heads: self.num_heads[i],
                    window: self.window_size,
                    reduction: self.reduction_ratios[i],
                    mlp_ratio: self.mlp_ratio,
                    dilations: self.prm_dilations.clone(),
                };
                in_dim = dim;
                (cfg, self.stage_depths[i])
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return bad("image_size, in_channels and embed_dim must be positive".into());
        }
        match self.kind {
            BackboneKind::Vitaev2 => {
                let n = self.stage_dims.len();
                if n == 0
                    || self.stage_depths.len() != n
                    || self.num_heads.len() != n
                    || self.reduction_ratios.len() != n
                {
                    return bad(format!(
                        "vitaev2 needs equal-length stage_dims/stage_depths/num_heads/reduction_ratios, got {}/{}/{}/{}",
                        n,
                        self.stage_depths.len(),
                        self.num_heads.len(),
                        self.reduction_ratios.len()
                    ));
                }
                if self.window_size == 0 {
                    return bad("vitaev2 window_size must be positive".into());
                }
                let mut side = self.image_size;
                for (cfg, _) in self.vitae_stages() {
                    cfg.validate()?;
                    if side % cfg.reduction != 0 {
                        return bad(format!(
                            "image_size {} not divisible by cumulative reduction (grid side {side} vs ratio {})",
                            self.image_size, cfg.reduction
                        ));
                    }
                    side /= cfg.reduction;
                }
            }
            BackboneKind::Vit => {
                if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                    return bad(format!(
                        "patch_size {} must divide image_size {}",
                        self.patch_size, self.image_size
                    ));
                }
                if self.stage_depths.len() != 1 || self.num_heads.len() != 1 {
                    return bad("vit takes a single depth and head count".into());
                }
                if self.embed_dim % self.num_heads[0] != 0 {
                    return bad(format!(
                        "embed_dim {} not divisible by {} heads",
                        self.embed_dim, self.num_heads[0]
                    ));
                }
            }
            BackboneKind::Resnet50 => {
                if self.stage_dims.is_empty() || self.stage_depths.len() != self.stage_dims.len() {
                    return bad("resnet needs equal-length stage_dims and stage_depths".into());
                }
                if self.stage_dims.iter().any(|d| d % 4 != 0 || *d == 0) {
                    return bad("resnet stage widths must be positive multiples of 4".into());
                }
                if self.embed_dim != *self.stage_dims.last().unwrap() {
                    return bad("resnet embed_dim must equal the last stage width".into());
                }
                let down = 4usize << (self.stage_dims.len() - 1);
                if self.image_size < down {
                    return bad(format!("image_size {} too small for {down}x downsampling", self.image_size));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Vitaev2(vitae::VitaeV2),
    Vit(vit::Vit),
    ResNet(resnet::ResNet),
}

/// The encoder interface shared by all backbone families.
pub trait Encoder {
    fn embed_dim(&self) -> usize;
    /// `images: (B, C, H, W)` → `(B, embed_dim)`.
    fn encode(&self, s: &mut Session<'_>, images: Var) -> Var;
}

impl Backbone {
    /// Register the encoder's parameters under `prefix` and return its layout.
    pub fn build<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, rng, prefix);
        Ok(match cfg.kind {
            BackboneKind::Vitaev2 => Backbone::Vitaev2(vitae::VitaeV2::new(&mut b, &cfg.vitae_stages(), cfg.embed_dim)),
            BackboneKind::Vit => Backbone::Vit(vit::Vit::new(
                &mut b,
                cfg.image_size,
                cfg.in_channels,
                cfg.patch_size,
                cfg.embed_dim,
                cfg.stage_depths[0],
                cfg.num_heads[0],
                cfg.mlp_ratio,
            )),
            BackboneKind::Resnet50 => {
                Backbone::ResNet(resnet::ResNet::new(&mut b, cfg.in_channels, &cfg.stage_dims, &cfg.stage_depths))
            }
        })
    }
}

impl Encoder for Backbone {
    fn embed_dim(&self) -> usize {
        match self {
            Backbone::Vitaev2(m) => m.embed_dim,
            Backbone::Vit(m) => m.dim,
            Backbone::ResNet(m) => m.out_dim,
        }
    }

    fn encode(&self, s: &mut Session<'_>, images: Var) -> Var {
        match self {
            Backbone::Vitaev2(m) => m.forward(s, images),
            Backbone::Vit(m) => m.forward(s, images),
            Backbone::ResNet(m) => m.forward(s, images),
        }
    }
}

pub(crate) fn check_images(cfg: &BackboneConfig, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape(format!(
            "expected images (B, {}, {}, {}), got {:?}",
            cfg.in_channels, cfg.image_size, cfg.image_size, s
        )));
    }
    if s[0] == 0 {
        return Err(Error::Empty("image batch".into()));
    }
    Ok(())
}

/// Inference-mode embedding of a batch.
pub fn forward_backbone(
    backbone: &Backbone,
    cfg: &BackboneConfig,
    params: &ParamStore,
    images: &Tensor,
) -> Result<Tensor> {
    check_images(cfg, images)?;
    let mut s = Session::new(params, false);
    let x = s.g.constant(images.clone());
    let y = backbone.encode(&mut s, x);
    let out = s.g.value(y).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("backbone output".into()));
    }
    Ok(out)
}

/// Exact trainable parameter count of the encoder `cfg` describes.
pub fn count_params(cfg: &BackboneConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Backbone::build(cfg, &mut store, &mut rng, "backbone")?;
    Ok(store.numel())
}
