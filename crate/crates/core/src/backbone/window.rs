//! Token grids and non-overlapping window partitioning.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tokens laid out on a spatial grid: `tokens` is `(batch, grid_h * grid_w, dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor,
    grid_h: usize,
    grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.ndim() != 3 || tokens.dim(1) != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "token tensor {:?} does not match a {grid_h}x{grid_w} grid",
                tokens.shape()
            )));
        }
        Ok(TokenGrid {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim(2)
    }

    /// `(batch, grid_h, grid_w, dim)` view of the same data.
    pub fn to_bhwc(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.batch(), self.grid_h, self.grid_w, self.dim()],
            self.tokens.data().to_vec(),
        )
    }

    pub fn from_bhwc(t: Tensor) -> Result<Self> {
        if t.ndim() != 4 {
            return Err(Error::Shape(format!("expected BHWC, got {:?}", t.shape())));
        }
        let (b, h, w, c) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        TokenGrid::new(t.reshape(vec![b, h * w, c])?, h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowPadding {
    /// Reject grids the window does not divide.
    Disabled,
    /// Zero-pad the grid up to the next multiple of the window.
    Zero,
}

/// Windows cut from a (possibly padded) grid: `(batch * windows, window², dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBlocks {
    pub blocks: Tensor,
    pub window: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

pub fn padded_side(side: usize, window: usize) -> usize {
    side.div_ceil(window) * window
}

/// Split a grid into `window × window` blocks, row-major over windows and
/// row-major over tokens inside each window.
pub fn window_partition(x: &TokenGrid, window: usize, padding: WindowPadding) -> Result<WindowBlocks> {
    if window == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    let (b, h, w, c) = (x.batch(), x.grid_h, x.grid_w, x.dim());
    if padding == WindowPadding::Disabled && (h % window != 0 || w % window != 0) {
        return Err(Error::Shape(format!(
            "window {window} does not divide grid {h}x{w}"
        )));
    }
    let (ph, pw) = (padded_side(h, window), padded_side(w, window));
    let (nh, nw) = (ph / window, pw / window);
    let src = x.tokens.data();
    let mut out = vec![0.0; b * ph * pw * c];
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let block = (bi * nh + wy) * nw + wx;
                for ty in 0..window {
                    for tx in 0..window {
                        let (y, xx) = (wy * window + ty, wx * window + tx);
                        if y >= h || xx >= w {
                            continue;
                        }
                        let dst = ((block * window + ty) * window + tx) * c;
                        let s = ((bi * h + y) * w + xx) * c;
                        out[dst..dst + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Ok(WindowBlocks {
        blocks: Tensor::new(vec![b * nh * nw, window * window, c], out)?,
        window,
        padded_h: ph,
        padded_w: pw,
    })
}

/// Inverse of [`window_partition`], cropping any padding back to `grid_h × grid_w`.
pub fn window_reverse(blocks: &WindowBlocks, grid_h: usize, grid_w: usize) -> Result<TokenGrid> {
    let window = blocks.window;
    let (ph, pw) = (blocks.padded_h, blocks.padded_w);
    if ph % window != 0 || pw % window != 0 || grid_h > ph || grid_w > pw {
        return Err(Error::Shape(format!(
            "cannot restore {grid_h}x{grid_w} from {ph}x{pw} windows of {window}"
        )));
    }
    let (nh, nw) = (ph / window, pw / window);
    let s = blocks.blocks.shape();
    if s.len() != 3 || s[1] != window * window || s[0] % (nh * nw) != 0 {
        return Err(Error::Shape(format!("window blocks {s:?}")));
    }
    let c = s[2];
    let b = s[0] / (nh * nw);
    let src = blocks.blocks.data();
    let mut out = vec![0.0; b * grid_h * grid_w * c];
    for bi in 0..b {
        for y in 0..grid_h {
            for x in 0..grid_w {
                let block = (bi * nh + y / window) * nw + x / window;
                let s = ((block * window + y % window) * window + x % window) * c;
                let d = ((bi * grid_h + y) * grid_w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    TokenGrid::new(Tensor::new(vec![b, grid_h * grid_w, c], out)?, grid_h, grid_w)
}

/// Graph version of partitioning for `(B, H, W, C)` input whose sides are
/// already multiples of `window`. Returns `(B * nW, window², C)`.
pub(crate) fn partition_var(g: &mut Graph, x: Var, window: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = (h / window, w / window);
    let x = g.reshape(x, &[b, nh, window, nw, window, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b * nh * nw, window * window, c])
}

/// Graph inverse of [`partition_var`].
pub(crate) fn reverse_var(g: &mut Graph, x: Var, window: usize, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let c = s[2];
    let (nh, nw) = (h / window, w / window);
    let b = s[0] / (nh * nw);
    let x = g.reshape(x, &[b, nh, nw, window, window, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b, h, w, c])
}
