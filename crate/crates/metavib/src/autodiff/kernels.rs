//! Numeric kernels behind the tape operations.
//!
//! Every kernel has a sequential implementation in [`seq`]; with the
//! `parallel` feature enabled (the default) a rayon twin in [`par`]
//! partitions the same computation across threads. Work is always split
//! by independent output regions with a fixed inner summation order, so
//! the two paths produce bit-identical results and the bench suite can
//! compare them directly. The free functions at the top dispatch to
//! whichever side the feature selects.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-block size shared by the sequential and parallel `gram` kernels.
/// Both fold per-block partial products in block order, which is what
/// keeps their floating-point results identical.
const GRAM_BLOCK: usize = 1024;

thread_local! {
    static SCRATCH_POOL: std::cell::RefCell<Vec<Vec<f64>>> =
        const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable buffer of `len` values whose contents are
/// arbitrary; the caller must overwrite every slot it reads. The big
/// im2col workspaces are recycled through a small thread-local pool, which
/// keeps the training loop from re-mapping tens of megabytes per step.
pub fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH_POOL
        .with(|p| p.borrow_mut().pop())
        .unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH_POOL.with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < 4 {
            pool.push(buf);
        }
    });
    r
}

/// Minimum element count before elementwise maps go parallel.
#[cfg(feature = "parallel")]
const PAR_MAP_MIN: usize = 1 << 15;

/// Zero-padding mode for convolution and pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size ceil(input / stride); zeros added symmetrically
    /// (extra row/column at the bottom/right when the total is odd).
    Same,
    /// No padding; the window must fit inside the input.
    Valid,
}

/// Resolved output geometry for a windowed op over one spatial axis pair.
#[derive(Debug, Clone, Copy)]
pub struct WindowGeom {
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl WindowGeom {
    pub fn compute(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<WindowGeom> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Parameter("window extents must be positive".into()));
        }
        match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Shape {
                        op: "window",
                        lhs: vec![h, w],
                        rhs: vec![kh, kw],
                    });
                }
                Ok(WindowGeom {
                    oh: (h - kh) / stride + 1,
                    ow: (w - kw) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::Shape {
                        op: "window",
                        lhs: vec![h + pad_h, w + pad_w],
                        rhs: vec![kh, kw],
                    });
                }
                Ok(WindowGeom {
                    oh,
                    ow,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
        }
    }
}

/// Parameters shared by the im2col/col2im pair.
#[derive(Debug, Clone, Copy)]
pub struct PatchLayout {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub geom: WindowGeom,
}

impl PatchLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.geom.oh * self.geom.ow
    }

    pub fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

// ---------------------------------------------------------------------
// Single-threaded kernel bodies. These are also the building blocks the
// parallel module distributes, so each one operates on a caller-chosen
// output region.
// ---------------------------------------------------------------------

/// SIMD-friendly accumulator width (one AVX-512 f64 vector).
const LANE: usize = 8;

/// Output rows per matmul micro-kernel pass. Sequential and parallel
/// paths both partition rows into blocks of this size from row zero, so
/// every output element goes through the same code path either way.
const ROW_BLOCK: usize = 4;

/// Micro-kernel: `R` rows of `out = a . b` with register-resident
/// accumulators; one streaming pass over `b` serves all `R` rows.
fn matmul_row_block<const R: usize>(a: &[f64], k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), R * k);
    debug_assert_eq!(out.len(), R * n);
    let mut j = 0;
    while j + LANE <= n {
        let mut acc = [[0.0f64; LANE]; R];
        for kk in 0..k {
            let bw = &b[kk * n + j..kk * n + j + LANE];
            for r in 0..R {
                let av = a[r * k + kk];
                for t in 0..LANE {
                    acc[r][t] += av * bw[t];
                }
            }
        }
        for r in 0..R {
            out[r * n + j..r * n + j + LANE].copy_from_slice(&acc[r]);
        }
        j += LANE;
    }
    if j < n {
        for r in 0..R {
            let tail = &mut out[r * n + j..r * n + n];
            tail.fill(0.0);
            for kk in 0..k {
                let av = a[r * k + kk];
                let bw = &b[kk * n + j..kk * n + n];
                for (o, &bv) in tail.iter_mut().zip(bw.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// One row block of up to `ROW_BLOCK` rows; `rows` is the actual count.
fn matmul_rows(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    match rows {
        4 => matmul_row_block::<4>(a, k, b, n, out),
        3 => matmul_row_block::<3>(a, k, b, n, out),
        2 => matmul_row_block::<2>(a, k, b, n, out),
        1 => matmul_row_block::<1>(a, k, b, n, out),
        0 => {}
        _ => unreachable!("row blocks are at most {ROW_BLOCK}"),
    }
}

fn gram_block(a: &[f64], b: &[f64], rows: std::ops::Range<usize>, ca: usize, cb: usize) -> Vec<f64> {
    let mut partial = vec![0.0; ca * cb];
    // Register-blocked accumulation: 2 rows of the output x 2 x LANE
    // columns per pass over the row range. Per output element the r order
    // is ascending in every path.
    let mut i = 0;
    while i + 2 <= ca {
        let mut t = 0;
        while t + 2 * LANE <= cb {
            let mut acc00 = [0.0f64; LANE];
            let mut acc01 = [0.0f64; LANE];
            let mut acc10 = [0.0f64; LANE];
            let mut acc11 = [0.0f64; LANE];
            for r in rows.clone() {
                let av0 = a[r * ca + i];
                let av1 = a[r * ca + i + 1];
                let bw = &b[r * cb + t..r * cb + t + 2 * LANE];
                for u in 0..LANE {
                    acc00[u] += av0 * bw[u];
                    acc10[u] += av1 * bw[u];
                }
                for u in 0..LANE {
                    acc01[u] += av0 * bw[LANE + u];
                    acc11[u] += av1 * bw[LANE + u];
                }
            }
            partial[i * cb + t..i * cb + t + LANE].copy_from_slice(&acc00);
            partial[i * cb + t + LANE..i * cb + t + 2 * LANE].copy_from_slice(&acc01);
            partial[(i + 1) * cb + t..(i + 1) * cb + t + LANE].copy_from_slice(&acc10);
            partial[(i + 1) * cb + t + LANE..(i + 1) * cb + t + 2 * LANE].copy_from_slice(&acc11);
            t += 2 * LANE;
        }
        if t < cb {
            for r in rows.clone() {
                let av0 = a[r * ca + i];
                let av1 = a[r * ca + i + 1];
                let bw = &b[r * cb + t..r * cb + cb];
                for (u, &bv) in bw.iter().enumerate() {
                    partial[i * cb + t + u] += av0 * bv;
                    partial[(i + 1) * cb + t + u] += av1 * bv;
                }
            }
        }
        i += 2;
    }
    if i < ca {
        for r in rows.clone() {
            let av = a[r * ca + i];
            let b_row = &b[r * cb..r * cb + cb];
            let dst = &mut partial[i * cb..i * cb + cb];
            for (d, &bv) in dst.iter_mut().zip(b_row.iter()) {
                *d += av * bv;
            }
        }
    }
    partial
}

fn im2col_item(x: &[f64], l: &PatchLayout, b: usize, patches: &mut [f64]) {
    let (h, w, cin) = (l.h, l.w, l.cin);
    let g = &l.geom;
    let cols = l.cols();
    let x_item = &x[b * h * w * cin..(b + 1) * h * w * cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * cols;
            let mut col = 0;
            for ky in 0..l.kh {
                let iy = (oy * l.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..l.kw {
                    let ix = (ox * l.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut patches[row + col..row + col + cin];
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = (iy as usize * w + ix as usize) * cin;
                        dst.copy_from_slice(&x_item[src..src + cin]);
                    } else {
                        dst.fill(0.0);
                    }
                    col += cin;
                }
            }
        }
    }
}

fn col2im_item(dpatches: &[f64], l: &PatchLayout, dx: &mut [f64]) {
    let (h, w, cin) = (l.h, l.w, l.cin);
    let g = &l.geom;
    let cols = l.cols();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * cols;
            let mut col = 0;
            for ky in 0..l.kh {
                let iy = (oy * l.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..l.kw {
                    let ix = (ox * l.stride + kx) as isize - g.pad_left as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = &dpatches[row + col..row + col + cin];
                        let dst_at = (iy as usize * w + ix as usize) * cin;
                        let dst = &mut dx[dst_at..dst_at + cin];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                    col += cin;
                }
            }
        }
    }
}

fn maxpool_item(
    x: &[f64],
    l: &PatchLayout,
    b: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (h, w, c) = (l.h, l.w, l.cin);
    let g = &l.geom;
    let base = b * h * w * c;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ky in 0..l.kh {
                    let iy = (oy * l.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..l.kw {
                        let ix = (ox * l.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let at = base + (iy as usize * w + ix as usize) * c + ch;
                        // Strict comparison keeps the first occurrence on ties.
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                let o = (oy * g.ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_at;
            }
        }
    }
}

pub mod seq {
    use super::*;

    /// out = A[m x k] . B[k x n], row-major, overwriting `out`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        let mut i = 0;
        while i < m {
            let rows = ROW_BLOCK.min(m - i);
            matmul_rows(
                &a[i * k..(i + rows) * k],
                rows,
                k,
                b,
                n,
                &mut out[i * n..(i + rows) * n],
            );
            i += rows;
        }
    }

    /// out = A^T . B for A[rows x ca], B[rows x cb], folding fixed-size
    /// row blocks in order.
    pub fn gram(a: &[f64], b: &[f64], rows: usize, ca: usize, cb: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), ca * cb);
        out.fill(0.0);
        let mut start = 0;
        while start < rows {
            let end = (start + GRAM_BLOCK).min(rows);
            let partial = gram_block(a, b, start..end, ca, cb);
            for (o, p) in out.iter_mut().zip(partial.iter()) {
                *o += p;
            }
            start = end;
        }
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
        debug_assert_eq!(a.len(), rows * cols);
        debug_assert_eq!(out.len(), rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a[r * cols + c];
            }
        }
    }

    pub fn im2col(x: &[f64], l: &PatchLayout, patches: &mut [f64]) {
        let item = l.geom.oh * l.geom.ow * l.cols();
        for b in 0..l.batch {
            im2col_item(x, l, b, &mut patches[b * item..(b + 1) * item]);
        }
    }

    /// Scatter-add of patch gradients back into the (zeroed) input gradient.
    pub fn col2im(dpatches: &[f64], l: &PatchLayout, dx: &mut [f64]) {
        let patch_item = l.geom.oh * l.geom.ow * l.cols();
        let x_item = l.h * l.w * l.cin;
        for b in 0..l.batch {
            col2im_item(
                &dpatches[b * patch_item..(b + 1) * patch_item],
                l,
                &mut dx[b * x_item..(b + 1) * x_item],
            );
        }
    }

    pub fn maxpool_forward(x: &[f64], l: &PatchLayout, out: &mut [f64], argmax: &mut [usize]) {
        let item = l.geom.oh * l.geom.ow * l.cin;
        for b in 0..l.batch {
            maxpool_item(
                x,
                l,
                b,
                &mut out[b * item..(b + 1) * item],
                &mut argmax[b * item..(b + 1) * item],
            );
        }
    }

    pub fn unary_map(x: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
        for (o, &v) in out.iter_mut().zip(x.iter()) {
            *o = f(v);
        }
    }

    pub fn zip_map(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync) {
        for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
            *o = f(x, y);
        }
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::*;

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        out.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(out_chunk, a_chunk)| {
                matmul_rows(a_chunk, a_chunk.len() / k, k, b, n, out_chunk);
            });
    }

    pub fn gram(a: &[f64], b: &[f64], rows: usize, ca: usize, cb: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), ca * cb);
        let blocks: Vec<std::ops::Range<usize>> = (0..rows)
            .step_by(GRAM_BLOCK)
            .map(|s| s..(s + GRAM_BLOCK).min(rows))
            .collect();
        let partials: Vec<Vec<f64>> = blocks
            .into_par_iter()
            .map(|range| gram_block(a, b, range, ca, cb))
            .collect();
        out.fill(0.0);
        // Fold partials in block order: same additions as the sequential path.
        for partial in partials {
            for (o, p) in out.iter_mut().zip(partial.iter()) {
                *o += p;
            }
        }
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
        out.par_chunks_mut(rows).enumerate().for_each(|(c, out_col)| {
            for (r, o) in out_col.iter_mut().enumerate() {
                *o = a[r * cols + c];
            }
        });
    }

    pub fn im2col(x: &[f64], l: &PatchLayout, patches: &mut [f64]) {
        let item = l.geom.oh * l.geom.ow * l.cols();
        patches
            .par_chunks_mut(item)
            .enumerate()
            .for_each(|(b, chunk)| im2col_item(x, l, b, chunk));
    }

    pub fn col2im(dpatches: &[f64], l: &PatchLayout, dx: &mut [f64]) {
        let patch_item = l.geom.oh * l.geom.ow * l.cols();
        let x_item = l.h * l.w * l.cin;
        dx.par_chunks_mut(x_item).enumerate().for_each(|(b, dx_item)| {
            col2im_item(
                &dpatches[b * patch_item..(b + 1) * patch_item],
                l,
                dx_item,
            );
        });
    }

    pub fn maxpool_forward(x: &[f64], l: &PatchLayout, out: &mut [f64], argmax: &mut [usize]) {
        let item = l.geom.oh * l.geom.ow * l.cin;
        out.par_chunks_mut(item)
            .zip(argmax.par_chunks_mut(item))
            .enumerate()
            .for_each(|(b, (o, am))| maxpool_item(x, l, b, o, am));
    }

    pub fn unary_map(x: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
        if x.len() < PAR_MAP_MIN {
            return seq::unary_map(x, out, f);
        }
        out.par_iter_mut().zip(x.par_iter()).for_each(|(o, &v)| *o = f(v));
    }

    pub fn zip_map(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync) {
        if a.len() < PAR_MAP_MIN {
            return seq::zip_map(a, b, out, f);
        }
        out.par_iter_mut()
            .zip(a.par_iter())
            .zip(b.par_iter())
            .for_each(|((o, &x), &y)| *o = f(x, y));
    }
}

macro_rules! dispatch {
    ($name:ident ( $($arg:ident : $ty:ty),* $(,)? )) => {
        pub fn $name($($arg: $ty),*) {
            #[cfg(feature = "parallel")]
            return par::$name($($arg),*);
            #[cfg(not(feature = "parallel"))]
            seq::$name($($arg),*)
        }
    };
}

dispatch!(matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]));
dispatch!(gram(a: &[f64], b: &[f64], rows: usize, ca: usize, cb: usize, out: &mut [f64]));
dispatch!(transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]));
dispatch!(im2col(x: &[f64], l: &PatchLayout, patches: &mut [f64]));
dispatch!(col2im(dpatches: &[f64], l: &PatchLayout, dx: &mut [f64]));
dispatch!(maxpool_forward(x: &[f64], l: &PatchLayout, out: &mut [f64], argmax: &mut [usize]));

pub fn unary_map(x: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
    #[cfg(feature = "parallel")]
    return par::unary_map(x, out, f);
    #[cfg(not(feature = "parallel"))]
    seq::unary_map(x, out, f)
}

pub fn zip_map(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    #[cfg(feature = "parallel")]
    return par::zip_map(a, b, out, f);
    #[cfg(not(feature = "parallel"))]
    seq::zip_map(a, b, out, f)
}

pub fn maxpool_backward(g: &[f64], argmax: &[usize], dx: &mut [f64]) {
    for (&grad, &at) in g.iter().zip(argmax.iter()) {
        if at != usize::MAX {
            dx[at] += grad;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill_pattern(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 + 11) % 23) as f64 * 0.17 - 1.3).collect()
    }

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 6];
        seq::matmul(&eye, &b, 2, 2, 3, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn gram_matches_naive() {
        let rows = 2500; // spans multiple blocks
        let (ca, cb) = (3, 4);
        let a = fill_pattern(rows * ca);
        let b = fill_pattern(rows * cb);
        let mut out = vec![0.0; ca * cb];
        seq::gram(&a, &b, rows, ca, cb, &mut out);
        for i in 0..ca {
            for j in 0..cb {
                let want: f64 = (0..rows).map(|r| a[r * ca + i] * b[r * cb + j]).sum();
                assert!((out[i * cb + j] - want).abs() < 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernels_are_bit_identical() {
        let (m, k, n) = (67, 45, 33);
        let a = fill_pattern(m * k);
        let b = fill_pattern(k * n);
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        seq::matmul(&a, &b, m, k, n, &mut s);
        par::matmul(&a, &b, m, k, n, &mut p);
        assert_eq!(s, p);

        let rows = 3000;
        let (ca, cb) = (7, 5);
        let a = fill_pattern(rows * ca);
        let b = fill_pattern(rows * cb);
        let mut s = vec![0.0; ca * cb];
        let mut p = vec![0.0; ca * cb];
        seq::gram(&a, &b, rows, ca, cb, &mut s);
        par::gram(&a, &b, rows, ca, cb, &mut p);
        assert_eq!(s, p);

        let layout = PatchLayout {
            batch: 3,
            h: 9,
            w: 8,
            cin: 2,
            kh: 3,
            kw: 3,
            stride: 2,
            geom: WindowGeom::compute(9, 8, 3, 3, 2, Padding::Same).unwrap(),
        };
        let x = fill_pattern(3 * 9 * 8 * 2);
        let rows = layout.rows() * layout.cols();
        let mut ps = vec![0.0; rows];
        let mut pp = vec![0.0; rows];
        seq::im2col(&x, &layout, &mut ps);
        par::im2col(&x, &layout, &mut pp);
        assert_eq!(ps, pp);
    }

    #[test]
    fn window_geometry_same_and_valid() {
        let g = WindowGeom::compute(28, 28, 3, 3, 2, Padding::Valid).unwrap();
        assert_eq!((g.oh, g.ow), (13, 13));
        let g = WindowGeom::compute(28, 28, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (28, 28));
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        let g = WindowGeom::compute(28, 28, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (14, 14));
        assert!(WindowGeom::compute(2, 2, 3, 3, 1, Padding::Valid).is_err());
        assert!(WindowGeom::compute(4, 4, 2, 2, 0, Padding::Valid).is_err());
    }
}
