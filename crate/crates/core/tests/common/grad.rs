//! Finite-difference gradient cases for every loss and backbone block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitae_ssl::autograd::Var;
use vitae_ssl::backbone::attention::{GlobalAttention, WindowAttention};
use vitae_ssl::backbone::resnet::Bottleneck;
use vitae_ssl::backbone::vit::VitBlock;
use vitae_ssl::backbone::vitae::{NormalCell, ParallelConv, PyramidReduction, ReductionCell};
use vitae_ssl::backbone::{Backbone, BackboneConfig, BackboneKind, Encoder, StageConfig};
use vitae_ssl::check::{check_session, GradCheck};
use vitae_ssl::kernels::ConvGeom;
use vitae_ssl::nn::{Builder, Conv2d, GroupNorm, LayerNorm, Mlp, ParamStore, Session};
use vitae_ssl::ssl::{byol_loss, dino_loss, simclr_loss, simsiam_loss, DinoHead, HeadConfig, ProjectionMlp};
use vitae_ssl::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
const STEP: f64 = 1e-6;
const COORDS: usize = 6;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub coords: usize,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> GradCheck;

pub const CASES: &[(&str, Case)] = &[
    ("dino_loss", dino),
    ("simclr_loss", simclr),
    ("byol_loss", byol),
    ("simsiam_loss", simsiam),
    ("Conv2d", conv),
    ("LayerNorm", layer_norm),
    ("GroupNorm", group_norm),
    ("Mlp", mlp),
    ("WindowAttention", window_attention),
    ("GlobalAttention", global_attention),
    ("PyramidReduction", pyramid),
    ("ParallelConv", parallel_conv),
    ("ReductionCell", reduction_cell),
    ("NormalCell", normal_cell),
    ("VitBlock", vit_block),
    ("Bottleneck", bottleneck),
    ("DinoHead", dino_head),
    ("ProjectionMlp", projection_mlp),
    ("ViTAEv2 encoder", vitae_encoder),
    ("ViT encoder", vit_encoder),
    ("ResNet encoder", resnet_encoder),
];

pub fn run_case(name: &'static str, case: Case) -> CaseResult {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6ead ^ (i as u64) << 8);
        let g = case(&mut rng);
        assert!(g.analytic_norm > 0.0, "{name}: instance {i} has a vanishing gradient");
        worst = worst.max(g.rel_error);
        coords += g.coords;
    }
    CaseResult {
        name,
        instances: INSTANCES,
        worst,
        coords,
    }
}

pub fn run_all() -> Vec<CaseResult> {
    CASES.iter().map(|&(n, c)| run_case(n, c)).collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Perturb every parameter so biases and norm affines are not at their
/// trivial initial values.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
}

fn build<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut seed_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let block = f(&mut Builder::new(&mut store, &mut seed_rng, ""));
    jitter(&mut store, rng);
    (store, block)
}

/// Check `sum(f(inputs) * R)` for a fixed random `R`, so every output
/// element contributes with its own weight.
fn check_block<F>(store: &ParamStore, inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> GradCheck
where
    F: Fn(&mut Session<'_>, &[Var]) -> Var,
{
    let shape = {
        let mut s = Session::new(store, false);
        let v: Vec<Var> = inputs.iter().map(|t| s.g.constant(t.clone())).collect();
        let y = f(&mut s, &v);
        s.g.shape(y).to_vec()
    };
    let r = randn(&shape, rng);
    check_session(
        store,
        inputs,
        |s, v| {
            let y = f(s, v);
            let c = s.g.constant(r.clone());
            let p = s.g.mul(y, c);
            s.g.sum(p)
        },
        STEP,
        COORDS,
        rng,
    )
}

fn dino(rng: &mut ChaCha8Rng) -> GradCheck {
    let (b, k) = (rng.random_range(2..=5), rng.random_range(3..=8));
    let tau_s = rng.random_range(0.1..=0.5);
    let tau_t = rng.random_range(0.04..tau_s);
    let teacher = [randn(&[b, k], rng), randn(&[b, k], rng)];
    let center = randn(&[k], rng);
    let student = [randn(&[b, k], rng), randn(&[b, k], rng)];
    check_block(&ParamStore::new(), &student, rng, |s, v| {
        let t0 = s.g.constant(teacher[0].clone());
        let t1 = s.g.constant(teacher[1].clone());
        let c = s.g.constant(center.clone());
        dino_loss(&mut s.g, [v[0], v[1]], [t0, t1], c, tau_s, tau_t).unwrap()
    })
}

fn simclr(rng: &mut ChaCha8Rng) -> GradCheck {
    let (b, d) = (rng.random_range(2..=4), rng.random_range(3..=8));
    let t = rng.random_range(0.1..=1.0);
    let z = randn(&[2 * b, d], rng);
    check_block(&ParamStore::new(), &[z], rng, |s, v| simclr_loss(&mut s.g, v[0], t).unwrap())
}

fn pair_loss(rng: &mut ChaCha8Rng, loss: fn(&mut vitae_ssl::autograd::Graph, Var, Var) -> vitae_ssl::Result<Var>) -> GradCheck {
    let (b, d) = (rng.random_range(1..=5), rng.random_range(2..=8));
    let target = randn(&[b, d], rng);
    let pred = randn(&[b, d], rng);
    check_block(&ParamStore::new(), &[pred], rng, |s, v| {
        let z = s.g.constant(target.clone());
        loss(&mut s.g, v[0], z).unwrap()
    })
}

fn byol(rng: &mut ChaCha8Rng) -> GradCheck {
    pair_loss(rng, byol_loss)
}

fn simsiam(rng: &mut ChaCha8Rng) -> GradCheck {
    pair_loss(rng, simsiam_loss)
}

fn conv(rng: &mut ChaCha8Rng) -> GradCheck {
    let depthwise = rng.random_bool(0.3);
    let cin = rng.random_range(1..=3);
    let cout = if depthwise { cin } else { rng.random_range(1..=4) };
    let k = [1, 2, 3][rng.random_range(0..3)];
    let geom = ConvGeom {
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=2),
        dilation: rng.random_range(1..=2),
        groups: if depthwise { cin } else { 1 },
    };
    let bias = rng.random_bool(0.5);
    let (store, c) = build(rng, |b| Conv2d::new(b, cin, cout, k, geom, bias));
    let side = rng.random_range(5..=7);
    let x = randn(&[rng.random_range(1..=2), cin, side, side + 1], rng);
    check_block(&store, &[x], rng, |s, v| c.forward(s, v[0]))
}

fn layer_norm(rng: &mut ChaCha8Rng) -> GradCheck {
    let d = rng.random_range(2..=8);
    let (store, ln) = build(rng, |b| LayerNorm::new(b, d));
    let x = randn(&[2, 3, d], rng);
    check_block(&store, &[x], rng, |s, v| ln.forward(s, v[0]))
}

fn group_norm(rng: &mut ChaCha8Rng) -> GradCheck {
    // 36 and 40 channels give multi-channel groups (18 and 20 groups).
    let c = [4, 6, 36, 40][rng.random_range(0..4)];
    let (store, gn) = build(rng, |b| GroupNorm::new(b, c));
    let x = randn(&[2, c, 2, 3], rng);
    check_block(&store, &[x], rng, |s, v| gn.forward(s, v[0]))
}

fn mlp(rng: &mut ChaCha8Rng) -> GradCheck {
    let (d, h, o) = (rng.random_range(2..=5), rng.random_range(2..=8), rng.random_range(1..=4));
    let (store, m) = build(rng, |b| Mlp::new(b, d, h, o));
    let x = randn(&[2, 3, d], rng);
    check_block(&store, &[x], rng, |s, v| m.forward(s, v[0]))
}

fn window_attention(rng: &mut ChaCha8Rng) -> GradCheck {
    let heads = rng.random_range(1..=2);
    let out = heads * rng.random_range(1..=3);
    let inp = rng.random_range(2..=5);
    let win = rng.random_range(2..=3);
    let (store, a) = build(rng, |b| WindowAttention::new(b, inp, out, heads, win));
    let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let x = randn(&[rng.random_range(1..=2), h, w, inp], rng);
    check_block(&store, &[x], rng, |s, v| a.forward(s, v[0]))
}

fn global_attention(rng: &mut ChaCha8Rng) -> GradCheck {
    let heads = rng.random_range(1..=3);
    let dim = heads * rng.random_range(1..=3);
    let (store, a) = build(rng, |b| GlobalAttention::new(b, dim, heads));
    let x = randn(&[2, rng.random_range(2..=6), dim], rng);
    check_block(&store, &[x], rng, |s, v| a.forward(s, v[0]))
}

fn stage(rng: &mut ChaCha8Rng) -> StageConfig {
    let heads = rng.random_range(1..=2);
    StageConfig {
        in_dim: rng.random_range(1..=3),
        dim: heads * rng.random_range(1..=3),
        heads,
        window: rng.random_range(2..=3),
        reduction: rng.random_range(1..=2),
        mlp_ratio: 2,
        dilations: if rng.random_bool(0.5) { vec![1, 2] } else { vec![1] },
    }
}

fn stage_input(cfg: &StageConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let r = cfg.reduction;
    randn(&[rng.random_range(1..=2), cfg.in_dim, r * rng.random_range(2..=4), r * rng.random_range(2..=4)], rng)
}

fn pyramid(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = stage(rng);
    let (store, p) = build(rng, |b| PyramidReduction::new(b, &cfg));
    let x = stage_input(&cfg, rng);
    check_block(&store, &[x], rng, |s, v| p.forward(s, v[0]))
}

fn parallel_conv(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = stage(rng);
    if rng.random_bool(0.5) {
        let (store, p) = build(rng, |b| ParallelConv::reduction(b, &cfg));
        let x = stage_input(&cfg, rng);
        check_block(&store, &[x], rng, |s, v| p.forward(s, v[0]))
    } else {
        let (store, p) = build(rng, |b| ParallelConv::normal(b, cfg.dim));
        let x = randn(&[2, cfg.dim, 3, 4], rng);
        check_block(&store, &[x], rng, |s, v| p.forward(s, v[0]))
    }
}

fn reduction_cell(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = stage(rng);
    let (store, c) = build(rng, |b| ReductionCell::new(b, &cfg));
    let x = stage_input(&cfg, rng);
    check_block(&store, &[x], rng, |s, v| c.forward(s, v[0]))
}

fn normal_cell(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = stage(rng);
    let (store, c) = build(rng, |b| NormalCell::new(b, &cfg));
    let x = randn(&[rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=5), cfg.dim], rng);
    check_block(&store, &[x], rng, |s, v| c.forward(s, v[0]))
}

fn vit_block(rng: &mut ChaCha8Rng) -> GradCheck {
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(1..=3);
    let (store, blk) = build(rng, |b| VitBlock {
        norm1: LayerNorm::new(&mut b.sub("norm1"), dim),
        attn: GlobalAttention::new(&mut b.sub("attn"), dim, heads),
        norm2: LayerNorm::new(&mut b.sub("norm2"), dim),
        mlp: Mlp::new(&mut b.sub("mlp"), dim, 2 * dim, dim),
    });
    let x = randn(&[2, rng.random_range(2..=5), dim], rng);
    check_block(&store, &[x], rng, |s, v| blk.forward(s, v[0]))
}

fn bottleneck(rng: &mut ChaCha8Rng) -> GradCheck {
    let cin = rng.random_range(2..=4);
    let mid = rng.random_range(1..=3);
    let out = if rng.random_bool(0.5) { cin } else { 4 };
    let stride = rng.random_range(1..=2);
    let (store, blk) = build(rng, |b| Bottleneck::new(b, cin, mid, out, stride));
    let x = randn(&[2, cin, 4, 5], rng);
    check_block(&store, &[x], rng, |s, v| blk.forward(s, v[0]))
}

fn dino_head(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = HeadConfig {
        hidden_dim: rng.random_range(3..=8),
        bottleneck_dim: rng.random_range(2..=5),
        out_dim: rng.random_range(2..=6),
        ..HeadConfig::toy()
    };
    let d = rng.random_range(2..=5);
    let (store, h) = build(rng, |b| DinoHead::new(b, d, &cfg));
    let x = randn(&[3, d], rng);
    check_block(&store, &[x], rng, |s, v| h.forward(s, v[0]))
}

fn projection_mlp(rng: &mut ChaCha8Rng) -> GradCheck {
    let norm = rng.random_bool(0.5);
    let (d, h, o) = (rng.random_range(2..=5), rng.random_range(2..=8), rng.random_range(2..=5));
    let (store, m) = build(rng, |b| ProjectionMlp::new(b, d, h, o, norm));
    let x = randn(&[3, d], rng);
    check_block(&store, &[x], rng, |s, v| m.forward(s, v[0]))
}

fn encoder(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> GradCheck {
    let mut store = ParamStore::new();
    let mut seed_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let net = Backbone::build(&cfg, &mut store, &mut seed_rng, "backbone").unwrap();
    jitter(&mut store, rng);
    let x = Tensor::rand_uniform(vec![2, cfg.in_channels, cfg.image_size, cfg.image_size], 0.0, 1.0, rng);
    check_block(&store, &[x], rng, |s, v| net.encode(s, v[0]))
}

fn vitae_encoder(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = BackboneConfig {
        image_size: 8,
        embed_dim: rng.random_range(3..=6),
        stage_dims: vec![2, 4],
        num_heads: vec![1, 2],
        window_size: 3,
        reduction_ratios: vec![2, 2],
        ..BackboneConfig::vitaev2_tiny()
    };
    encoder(cfg, rng)
}

fn vit_encoder(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = BackboneConfig {
        kind: BackboneKind::Vit,
        image_size: 8,
        in_channels: 2,
        embed_dim: 4,
        stage_depths: vec![2],
        num_heads: vec![2],
        patch_size: 4,
        mlp_ratio: 2,
        ..BackboneConfig::vit_tiny()
    };
    encoder(cfg, rng)
}

fn resnet_encoder(rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = BackboneConfig {
        image_size: 12,
        embed_dim: 8,
        stage_dims: vec![4, 8],
        stage_depths: vec![1, 1],
        ..BackboneConfig::resnet_tiny()
    };
    encoder(cfg, rng)
}
