//! Dense compute kernels with an explicit execution mode.
//!
//! Every kernel partitions its output into disjoint rows (or batch items) and
//! computes each partition with the same sequential arithmetic, so results are
//! bit-identical between [`Exec::Sequential`] and [`Exec::Parallel`] and do not
//! depend on the thread count. Cross-item reductions are always summed in index
//! order after the parallel section.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential execution when the `parallel` feature is off.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Apply `f(row_index, row)` to each `row_len`-sized chunk of `out`.
pub fn for_each_row<F>(exec: Exec, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// a: (batch, m, k), b: (k, n) or (batch, k, n)
    NN,
    /// a: (batch, m, k), b: (n, k) or (batch, n, k)
    NT,
    /// a: (batch, k, m), b: (k, n) or (batch, k, n)
    TN,
}

/// Batched matrix product producing `(batch, m, n)`.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    exec: Exec,
    layout: Layout,
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), if shared_b { k * n } else { batch * k * n });
    let mut out = vec![0.0; batch * m * n];
    if n == 0 {
        return out;
    }
    for_each_row(exec, &mut out, n, |r, row| {
        let bi = r / m;
        let i = r % m;
        let a_mat = &a[bi * m * k..(bi + 1) * m * k];
        let b_mat = if shared_b {
            b
        } else {
            &b[bi * k * n..(bi + 1) * k * n]
        };
        match layout {
            Layout::NN => {
                let a_row = &a_mat[i * k..(i + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b_mat[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            Layout::NT => {
                let a_row = &a_mat[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    let b_row = &b_mat[j * k..(j + 1) * k];
                    *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                }
            }
            Layout::TN => {
                for p in 0..k {
                    let av = a_mat[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b_mat[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
    });
    out
}

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Dimensions of a concrete convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn cols_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn group_rows(&self) -> usize {
        self.in_ch / self.geom.groups * self.kh * self.kw
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.geom.groups
    }

    fn item_in(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn item_out(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    /// Input offset for (channel, ky, kx, out_y, out_x), or `None` in padding.
    #[inline]
    fn src(&self, c: usize, ky: usize, kx: usize, y: usize, x: usize) -> Option<usize> {
        let g = &self.geom;
        let iy = (y * g.stride + ky * g.dilation) as isize - g.padding as isize;
        let ix = (x * g.stride + kx * g.dilation) as isize - g.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some((c * self.h + iy as usize) * self.w + ix as usize)
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let l = self.oh * self.ow;
        let mut cols = vec![0.0; self.cols_rows() * l];
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for y in 0..self.oh {
                        for x in 0..self.ow {
                            if let Some(s) = self.src(c, ky, kx, y, x) {
                                dst[y * self.ow + x] = input[s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let l = self.oh * self.ow;
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for y in 0..self.oh {
                        for x in 0..self.ow {
                            if let Some(s) = self.src(c, ky, kx, y, x) {
                                out[s] += src[y * self.ow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(exec: Exec, d: &ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let l = d.oh * d.ow;
    let (gr, og) = (d.group_rows(), d.out_per_group());
    let mut out = vec![0.0; d.batch * d.item_out()];
    for_each_row(exec, &mut out, d.item_out(), |b, dst| {
        let cols = d.im2col(&input[b * d.item_in()..(b + 1) * d.item_in()]);
        for g in 0..d.geom.groups {
            let w = &weight[g * og * gr..(g + 1) * og * gr];
            let c = &cols[g * gr * l..(g + 1) * gr * l];
            let y = matmul(Exec::Sequential, Layout::NN, w, c, 1, og, gr, l, true);
            dst[g * og * l..(g + 1) * og * l].copy_from_slice(&y);
        }
    });
    out
}

/// Gradients of a convolution with respect to its input and weight.
pub fn conv2d_backward(
    exec: Exec,
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let l = d.oh * d.ow;
    let (gr, og) = (d.group_rows(), d.out_per_group());
    let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = map_indexed(exec, d.batch, |b| {
        let dy = &grad_out[b * d.item_out()..(b + 1) * d.item_out()];
        let dw = need_weight.then(|| {
            let cols = d.im2col(&input[b * d.item_in()..(b + 1) * d.item_in()]);
            let mut dw = Vec::with_capacity(weight.len());
            for g in 0..d.geom.groups {
                let dyg = &dy[g * og * l..(g + 1) * og * l];
                let cg = &cols[g * gr * l..(g + 1) * gr * l];
                dw.extend(matmul(Exec::Sequential, Layout::NT, dyg, cg, 1, og, l, gr, true));
            }
            dw
        });
        let dx = need_input.then(|| {
            let mut dcols = Vec::with_capacity(d.cols_rows() * l);
            for g in 0..d.geom.groups {
                let w = &weight[g * og * gr..(g + 1) * og * gr];
                let dyg = &dy[g * og * l..(g + 1) * og * l];
                dcols.extend(matmul(Exec::Sequential, Layout::TN, w, dyg, 1, gr, og, l, true));
            }
            let mut dx = vec![0.0; d.item_in()];
            d.col2im(&dcols, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut dx_all = need_input.then(|| Vec::with_capacity(d.batch * d.item_in()));
    let mut dw_all = need_weight.then(|| vec![0.0; weight.len()]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (dx_all.as_mut(), dx) {
            acc.extend(dx);
        }
        if let (Some(acc), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, v) in acc.iter_mut().zip(dw) {
                *a += v;
            }
        }
    }
    (dx_all, dw_all)
}
