//! Multi-head self-attention, global or over local windows.

use rand::Rng;

use super::window::{padded_side, partition_var, reverse_var};
use crate::autograd::Var;
use crate::nn::{Builder, Init, Linear, ParamId, Session};
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;

/// Index into the `(2w-1)²` relative-offset table for every (query, key) pair
/// of a `w × w` window, row-major.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / window, q % window);
        for k in 0..n {
            let (ky, kx) = (k / window, k % window);
            let dy = qy + window - 1 - ky;
            let dx = qx + window - 1 - kx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Core attention: `x: (Bn, n, in)` → `(Bn, n, out)`.
///
/// `bias` broadcasts onto the `(Bn, heads, n, n)` logits. `mask` is
/// `(windows, 1, n, n)` and is applied with the leading axis split as
/// `(Bn / windows, windows)`.
pub(crate) fn multi_head(
    s: &mut Session<'_>,
    x: Var,
    qkv: &Linear,
    proj: &Linear,
    heads: usize,
    bias: Option<Var>,
    mask: Option<(Var, usize)>,
) -> Var {
    let shape = s.g.shape(x).to_vec();
    let (bn, n) = (shape[0], shape[1]);
    let out = proj.in_dim;
    let hd = out / heads;
    let qkv_v = qkv.forward(s, x);
    let qkv_v = s.g.reshape(qkv_v, &[bn, n, 3, heads, hd]);
    let qkv_v = s.g.permute(qkv_v, &[2, 0, 3, 1, 4]);
    let mut parts = [qkv_v; 3];
    for (i, p) in parts.iter_mut().enumerate() {
        let t = s.g.narrow(qkv_v, 0, i, 1);
        *p = s.g.reshape(t, &[bn, heads, n, hd]);
    }
    let [q, k, v] = parts;
    let logits = s.g.matmul_nt(q, k);
    let mut logits = s.g.scale(logits, 1.0 / (hd as f64).sqrt());
    if let Some(b) = bias {
        logits = s.g.add(logits, b);
    }
    if let Some((m, windows)) = mask {
        let split = s.g.reshape(logits, &[bn / windows, windows, heads, n, n]);
        let masked = s.g.add(split, m);
        logits = s.g.reshape(masked, &[bn, heads, n, n]);
    }
    let attn = s.g.softmax(logits);
    let y = s.g.matmul(attn, v);
    let y = s.g.permute(y, &[0, 2, 1, 3]);
    let y = s.g.reshape(y, &[bn, n, out]);
    proj.forward(s, y)
}

/// Attention restricted to non-overlapping windows of a token grid, with a
/// learned relative-position bias. Grids the window does not divide are
/// zero-padded, padded keys are masked out, and the output is cropped.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, out_dim: usize, heads: usize, window: usize) -> Self {
        let span = 2 * window - 1;
        WindowAttention {
            qkv: Linear::new(&mut b.sub("qkv"), in_dim, 3 * out_dim, true),
            proj: Linear::new(&mut b.sub("proj"), out_dim, out_dim, true),
            rel_bias: b.param("rel_bias", vec![span * span, heads], Init::Normal(0.02), false),
            heads,
            window,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, heads: usize, window: usize) -> usize {
        let span = 2 * window - 1;
        Linear::param_count(in_dim, 3 * out_dim, true) + Linear::param_count(out_dim, out_dim, true) + span * span * heads
    }

    /// `x: (B, H, W, in)` → `(B, H, W, out)`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let shape = s.g.shape(x).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let win = self.window;
        let (ph, pw) = (padded_side(h, win), padded_side(w, win));
        let x = s.g.pad(x, 1, 0, ph - h);
        let x = s.g.pad(x, 2, 0, pw - w);
        let blocks = partition_var(&mut s.g, x, win);
        let n = win * win;

        let table = s.param(self.rel_bias);
        let bias = s.g.index_select(table, &relative_position_index(win));
        let bias = s.g.reshape(bias, &[n, n, self.heads]);
        let bias = s.g.permute(bias, &[2, 0, 1]);

        let mask = (ph != h || pw != w).then(|| {
            let windows = (ph / win) * (pw / win);
            let m = padding_mask(h, w, win);
            (s.g.constant(m), windows)
        });
        let y = multi_head(s, blocks, &self.qkv, &self.proj, self.heads, Some(bias), mask);
        let y = reverse_var(&mut s.g, y, win, ph, pw);
        let y = s.g.narrow(y, 1, 0, h);
        s.g.narrow(y, 2, 0, w)
    }
}

/// Additive key mask `(windows, 1, n, n)` that hides padded tokens.
fn padding_mask(h: usize, w: usize, window: usize) -> Tensor {
    let (ph, pw) = (padded_side(h, window), padded_side(w, window));
    let (nh, nw) = (ph / window, pw / window);
    let n = window * window;
    let mut m = vec![0.0; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let base = (wy * nw + wx) * n * n;
            for k in 0..n {
                let y = wy * window + k / window;
                let x = wx * window + k % window;
                if y >= h || x >= w {
                    for q in 0..n {
                        m[base + q * n + k] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, 1, n, n], m)
}

/// Global multi-head self-attention over a token sequence.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl GlobalAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize) -> Self {
        GlobalAttention {
            qkv: Linear::new(&mut b.sub("qkv"), dim, 3 * dim, true),
            proj: Linear::new(&mut b.sub("proj"), dim, dim, true),
            heads,
        }
    }

    /// `x: (B, n, dim)` → `(B, n, dim)`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        multi_head(s, x, &self.qkv, &self.proj, self.heads, None, None)
    }
}
