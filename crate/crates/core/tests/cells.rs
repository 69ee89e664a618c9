//! Reduction and normal cells against a straight-line scalar reimplementation
//! that reads the same parameters by name.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitae_ssl::backbone::vitae::{NormalCell, ReductionCell};
use vitae_ssl::backbone::{StageConfig, TokenGrid};
use vitae_ssl::nn::{Builder, ParamStore};
use vitae_ssl::Tensor;

/// `[channel][y][x]`
type Map = Vec<Vec<Vec<f64>>>;
/// `[y][x][channel]`
type Grid = Vec<Vec<Vec<f64>>>;

struct P<'a>(&'a ParamStore);

impl P<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        self.0.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).data().to_vec()
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

#[allow(clippy::too_many_arguments)]
fn conv(x: &Map, w: &[f64], b: &[f64], out_ch: usize, k: usize, stride: usize, pad: usize, dil: usize, groups: usize) -> Map {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let cpg = cin / groups;
    let opg = out_ch / groups;
    let mut out = vec![vec![vec![0.0; ow]; oh]; out_ch];
    for o in 0..out_ch {
        let g = o / opg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for ci in 0..cpg {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let wv = w[((o * cpg + ci) * k + ky) * k + kx];
                            acc += wv * x[g * cpg + ci][iy as usize][ix as usize];
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

fn map_to_grid(m: &Map) -> Grid {
    let (c, h, w) = (m.len(), m[0].len(), m[0][0].len());
    (0..h).map(|y| (0..w).map(|x| (0..c).map(|ch| m[ch][y][x]).collect()).collect()).collect()
}

fn grid_to_map(g: &Grid) -> Map {
    let (h, w, c) = (g.len(), g[0].len(), g[0][0].len());
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| g[y][x][ch]).collect()).collect()).collect()
}

fn layer_norm(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let s = (var + 1e-6).sqrt();
    (0..v.len()).map(|i| (v[i] - mean) / s * gamma[i] + beta[i]).collect()
}

/// `v · W + b` with `W` stored `(in, out)` row-major.
fn linear(v: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|o| b[o] + (0..v.len()).map(|i| v[i] * w[i * out + o]).sum::<f64>()).collect()
}

fn map_tokens(g: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Grid {
    g.iter().map(|row| row.iter().map(|t| f(t)).collect()).collect()
}

fn add(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(ta, tb)| ta.iter().zip(tb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

fn window_attention(p: &P, pre: &str, x: &Grid, out: usize, heads: usize, win: usize) -> Grid {
    let (h, w) = (x.len(), x[0].len());
    let (ph, pw) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let in_dim = x[0][0].len();
    let qkv_w = p.get(&format!("{pre}.qkv.weight"));
    let qkv_b = p.get(&format!("{pre}.qkv.bias"));
    let table = p.get(&format!("{pre}.rel_bias"));
    let hd = out / heads;
    let span = 2 * win - 1;
    let token = |y: usize, xx: usize| -> Vec<f64> {
        if y < h && xx < w {
            x[y][xx].clone()
        } else {
            vec![0.0; in_dim]
        }
    };
    let mut mixed = vec![vec![vec![0.0; out]; w]; h];
    for wy in (0..ph).step_by(win) {
        for wx in (0..pw).step_by(win) {
            let cells: Vec<(usize, usize)> = (0..win * win).map(|i| (wy + i / win, wx + i % win)).collect();
            let qkv: Vec<Vec<f64>> = cells.iter().map(|&(y, xx)| linear(&token(y, xx), &qkv_w, &qkv_b)).collect();
            for (qi, &(qy, qx)) in cells.iter().enumerate() {
                if qy >= h || qx >= w {
                    continue;
                }
                for hh in 0..heads {
                    let mut logits = Vec::new();
                    for (ki, &(ky, kx)) in cells.iter().enumerate() {
                        let mut dot = 0.0;
                        for j in 0..hd {
                            dot += qkv[qi][hh * hd + j] * qkv[ki][out + hh * hd + j];
                        }
                        let dy = qy - wy + win - 1 - (ky - wy);
                        let dx = qx - wx + win - 1 - (kx - wx);
                        let mut l = dot / (hd as f64).sqrt() + table[(dy * span + dx) * heads + hh];
                        if ky >= h || kx >= w {
                            l = f64::NEG_INFINITY;
                        }
                        logits.push(l);
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..hd {
                        let mut acc = 0.0;
                        for ki in 0..cells.len() {
                            acc += e[ki] / z * qkv[ki][2 * out + hh * hd + j];
                        }
                        mixed[qy][qx][hh * hd + j] = acc;
                    }
                }
            }
        }
    }
    let pw_ = p.get(&format!("{pre}.proj.weight"));
    let pb = p.get(&format!("{pre}.proj.bias"));
    map_tokens(&mixed, |t| linear(t, &pw_, &pb))
}

fn ffn_residual(p: &P, pre: &str, y: &Grid) -> Grid {
    let (g, b) = (p.get(&format!("{pre}.ffn_norm.gamma")), p.get(&format!("{pre}.ffn_norm.beta")));
    let (w1, b1) = (p.get(&format!("{pre}.ffn.fc1.weight")), p.get(&format!("{pre}.ffn.fc1.bias")));
    let (w2, b2) = (p.get(&format!("{pre}.ffn.fc2.weight")), p.get(&format!("{pre}.ffn.fc2.bias")));
    let h = map_tokens(y, |t| {
        let n = layer_norm(t, &g, &b);
        let a: Vec<f64> = linear(&n, &w1, &b1).into_iter().map(gelu).collect();
        linear(&a, &w2, &b2)
    });
    add(y, &h)
}

fn conv_named(p: &P, name: &str, x: &Map, out: usize, k: usize, stride: usize, pad: usize, dil: usize, groups: usize) -> Map {
    conv(x, &p.get(&format!("{name}.weight")), &p.get(&format!("{name}.bias")), out, k, stride, pad, dil, groups)
}

fn gelu_map(m: Map) -> Map {
    m.into_iter().map(|c| c.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect()).collect()
}

fn reduction_oracle(p: &P, pre: &str, cfg: &StageConfig, x: &Map) -> Grid {
    let mut branches = Vec::new();
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let y = conv_named(p, &format!("{pre}.prm.{i}"), x, cfg.dim, 3, cfg.reduction, d, d, 1);
        branches.extend(gelu_map(y));
    }
    let ctx = map_to_grid(&branches);
    let (g, b) = (p.get(&format!("{pre}.prm_norm.gamma")), p.get(&format!("{pre}.prm_norm.beta")));
    let ctx = map_tokens(&ctx, |t| layer_norm(t, &g, &b));
    let a = window_attention(p, &format!("{pre}.attn"), &ctx, cfg.dim, cfg.heads, cfg.window);
    let local = gelu_map(conv_named(p, &format!("{pre}.pcm.spatial"), x, cfg.dim, 3, cfg.reduction, 1, 1, 1));
    let local = conv_named(p, &format!("{pre}.pcm.pointwise"), &local, cfg.dim, 1, 1, 0, 1, 1);
    ffn_residual(p, pre, &add(&a, &map_to_grid(&local)))
}

fn normal_oracle(p: &P, pre: &str, cfg: &StageConfig, x: &Grid) -> Grid {
    let (g, b) = (p.get(&format!("{pre}.attn_norm.gamma")), p.get(&format!("{pre}.attn_norm.beta")));
    let n = map_tokens(x, |t| layer_norm(t, &g, &b));
    let a = window_attention(p, &format!("{pre}.attn"), &n, cfg.dim, cfg.heads, cfg.window);
    let m = grid_to_map(x);
    let local = gelu_map(conv_named(p, &format!("{pre}.pcm.spatial"), &m, cfg.dim, 3, 1, 1, 1, cfg.dim));
    let local = conv_named(p, &format!("{pre}.pcm.pointwise"), &local, cfg.dim, 1, 1, 0, 1, 1);
    let y = add(&add(x, &a), &map_to_grid(&local));
    ffn_residual(p, pre, &y)
}

fn stage() -> StageConfig {
    StageConfig {
        in_dim: 2,
        dim: 8,
        heads: 2,
        window: 3,
        reduction: 2,
        mlp_ratio: 2,
        dilations: vec![1, 2],
    }
}

fn jittered(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

/// Token grid `(B, H, W, C)` into per-image `[y][x][c]`.
fn grids(t: &TokenGrid) -> Vec<Grid> {
    let bhwc = t.to_bhwc();
    let (b, h, w, c) = (bhwc.dim(0), bhwc.dim(1), bhwc.dim(2), bhwc.dim(3));
    let d = bhwc.data();
    (0..b)
        .map(|n| (0..h).map(|y| (0..w).map(|x| (0..c).map(|ch| d[((n * h + y) * w + x) * c + ch]).collect()).collect()).collect())
        .collect()
}

fn max_diff(a: &Grid, b: &Grid) -> f64 {
    let mut m = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (ta, tb) in ra.iter().zip(rb) {
            assert_eq!(ta.len(), tb.len());
            for (x, y) in ta.iter().zip(tb) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}

#[test]
fn reduction_cell_matches_straight_line_oracle() {
    let cfg = stage();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = ReductionCell::new(&mut Builder::new(&mut store, &mut rng, "rc"), &cfg);
    jittered(&mut store, 2);
    let x = Tensor::randn([2, 2, 16, 16], 1.0, &mut rng);
    let got = grids(&cell.apply(&store, &x).unwrap());
    for (n, g) in got.iter().enumerate() {
        // 8×8 grid with window 3 exercises padding and masking.
        assert_eq!((g.len(), g[0].len(), g[0][0].len()), (8, 8, 8));
        let m: Map = (0..2)
            .map(|c| (0..16).map(|y| (0..16).map(|xx| x.data()[((n * 2 + c) * 16 + y) * 16 + xx]).collect()).collect())
            .collect();
        let want = reduction_oracle(&P(&store), "rc", &cfg, &m);
        let d = max_diff(g, &want);
        assert!(d < 1e-6, "image {n}: {d}");
    }
}

#[test]
fn normal_cell_matches_straight_line_oracle() {
    let cfg = stage();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = NormalCell::new(&mut Builder::new(&mut store, &mut rng, "nc"), &cfg);
    jittered(&mut store, 4);
    let t = Tensor::randn([2, 5, 7, 8], 1.0, &mut rng);
    let input = TokenGrid::from_bhwc(t).unwrap();
    let got = grids(&cell.apply(&store, &input).unwrap());
    for (n, (g, x)) in got.iter().zip(grids(&input)).enumerate() {
        let want = normal_oracle(&P(&store), "nc", &cfg, &x);
        let d = max_diff(g, &want);
        assert!(d < 1e-6, "image {n}: {d}");
    }
}

#[test]
fn reduction_shape_and_zero_input() {
    let cfg = StageConfig {
        in_dim: 1,
        dim: 8,
        heads: 2,
        window: 4,
        reduction: 4,
        mlp_ratio: 2,
        dilations: vec![1, 2],
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cell = ReductionCell::new(&mut Builder::new(&mut store, &mut rng, "rc"), &cfg);
    let out = cell.apply(&store, &Tensor::zeros([1, 1, 32, 32])).unwrap();
    assert_eq!((out.grid_h(), out.grid_w(), out.dim()), (8, 8, 8));
    assert!(out.tokens().data().iter().all(|&v| v == 0.0));
    assert!(cell.apply(&store, &Tensor::zeros([1, 1, 30, 30])).is_err());
}

#[test]
fn normal_shape_and_zero_input() {
    let cfg = StageConfig {
        in_dim: 16,
        dim: 16,
        heads: 4,
        window: 4,
        reduction: 1,
        mlp_ratio: 2,
        dilations: vec![1],
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cell = NormalCell::new(&mut Builder::new(&mut store, &mut rng, "nc"), &cfg);
    let zero = TokenGrid::from_bhwc(Tensor::zeros([1, 8, 8, 16])).unwrap();
    let out = cell.apply(&store, &zero).unwrap();
    assert_eq!((out.grid_h(), out.grid_w(), out.dim()), (8, 8, 16));
    assert!(out.tokens().data().iter().all(|&v| v == 0.0));
    let wrong = TokenGrid::from_bhwc(Tensor::zeros([1, 8, 8, 12])).unwrap();
    assert!(cell.apply(&store, &wrong).is_err());
}
