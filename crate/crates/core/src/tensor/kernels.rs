//! Raw loops behind the graph primitives. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

use serde::{Deserialize, Serialize};

use super::NEG_INF;
use crate::error::{Error, Result};

/// Largest max-plus value whose `exp` stays comfortably finite.
pub(crate) fn saturation_limit() -> f64 {
    f64::MAX.ln() - 1.0
}

/// Stride and symmetric zero padding of a 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

/// Fully resolved dimensions of a batched 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], k: &[usize], geom: ConvGeometry, op: &'static str) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape(
                op,
                format!("expected 4-D input and kernel, got {x:?} and {k:?}"),
            ));
        }
        if x[1] != k[1] {
            return Err(Error::shape(
                op,
                format!("input has {} channels, kernel expects {}", x[1], k[1]),
            ));
        }
        if geom.stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * geom.pad < kh || w + 2 * geom.pad < kw {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {})", geom.pad),
            ));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            h,
            w,
            out_ch: k[0],
            kh,
            kw,
            stride: geom.stride,
            pad: geom.pad,
            oh: (h + 2 * geom.pad - kh) / geom.stride + 1,
            ow: (w + 2 * geom.pad - kw) / geom.stride + 1,
        })
    }

    /// Receptive field size: inputs feeding one output value.
    pub fn field(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_plane(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.out_ch * self.positions()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.oh, self.ow]
    }

    /// Input coordinate (flat index within one image) read by field entry `p`
    /// at output position `pos`, or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, p: usize, pos: usize) -> Option<usize> {
        let c = p / (self.kh * self.kw);
        let i = (p / self.kw) % self.kh;
        let j = p % self.kw;
        let oy = pos / self.ow;
        let ox = pos % self.ow;
        let iy = (oy * self.stride + i) as isize - self.pad as isize;
        let ix = (ox * self.stride + j) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            None
        } else {
            Some((c * self.h + iy as usize) * self.w + ix as usize)
        }
    }
}

/// Unfolds one image (`in_ch × h × w`) into `cols` laid out as `field × positions`.
pub(crate) fn im2col(img: &[f64], d: &ConvDims, pad_value: f64, cols: &mut [f64]) {
    let npos = d.positions();
    debug_assert_eq!(cols.len(), d.field() * npos);
    for c in 0..d.in_ch {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let p = (c * d.kh + i) * d.kw + j;
                let row = &mut cols[p * npos..(p + 1) * npos];
                for oy in 0..d.oh {
                    let out = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    let iy = (oy * d.stride + i) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        out.fill(pad_value);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 && d.pad == 0 {
                        out.copy_from_slice(&src[j..j + d.ow]);
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * d.stride + j) as isize - d.pad as isize;
                        *o = if ix < 0 || ix as usize >= d.w {
                            pad_value
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the image gradient.
pub(crate) fn col2im_add(cols: &[f64], d: &ConvDims, img: &mut [f64]) {
    let npos = d.positions();
    for c in 0..d.in_ch {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let p = (c * d.kh + i) * d.kw + j;
                let row = &cols[p * npos..(p + 1) * npos];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + i) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + j) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            img[base + ix as usize] += row[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with explicit row/column strides (so transposes are free).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs + 1
    };
    if k > 0 {
        assert!(a.len() >= last(m, k, a_strides));
        assert!(b.len() >= last(k, n, b_strides));
    }
    assert!(c.len() >= last(m, n, c_strides));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (p, npos) = (d.field(), d.positions());
    let mut out = vec![0.0; d.batch * d.out_plane()];
    let mut cols = vec![0.0; p * npos];
    for b in 0..d.batch {
        im2col(&x[b * d.in_plane()..(b + 1) * d.in_plane()], d, 0.0, &mut cols);
        let o = &mut out[b * d.out_plane()..(b + 1) * d.out_plane()];
        gemm(d.out_ch, p, npos, w, (p, 1), &cols, (npos, 1), 0.0, o, (npos, 1));
    }
    out
}

/// Returns `(dx, dw)`; each is only computed when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, npos) = (d.field(), d.positions());
    let mut dx = need_dx.then(|| vec![0.0; d.batch * d.in_plane()]);
    let mut dw = need_dw.then(|| vec![0.0; d.out_ch * p]);
    let mut cols = vec![0.0; p * npos];
    let mut dcols = vec![0.0; p * npos];
    for b in 0..d.batch {
        let gb = &g[b * d.out_plane()..(b + 1) * d.out_plane()];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * d.in_plane()..(b + 1) * d.in_plane()], d, 0.0, &mut cols);
            // dw[O×P] += g[O×npos] · colsᵀ[npos×P]
            gemm(d.out_ch, npos, p, gb, (npos, 1), &cols, (1, npos), 1.0, dw, (p, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[P×npos] = wᵀ[P×O] · g[O×npos]
            gemm(p, d.out_ch, npos, w, (1, p), gb, (npos, 1), 0.0, &mut dcols, (npos, 1));
            col2im_add(&dcols, d, &mut dx[b * d.in_plane()..(b + 1) * d.in_plane()]);
        }
    }
    (dx, dw)
}

/// Output of a max-plus correlation together with its routing record.
pub(crate) struct MaxPlusOut {
    pub values: Vec<f64>,
    /// Winning field index per output (lowest index on ties).
    pub argmax: Vec<u32>,
    pub saturated: usize,
}

fn clamp_saturated(values: &mut [f64]) -> usize {
    let limit = saturation_limit();
    let mut n = 0;
    for v in values.iter_mut() {
        if *v > limit {
            *v = limit;
            n += 1;
        }
    }
    n
}

/// `out[b, k] = max_l (x[b, l] + v[k, l])` for `x: batch × n`, `v: m × n`.
pub(crate) fn maxplus_dense_forward(x: &[f64], v: &[f64], batch: usize, n: usize, m: usize) -> MaxPlusOut {
    let mut values = vec![NEG_INF; batch * m];
    let mut argmax = vec![0u32; batch * m];
    for b in 0..batch {
        let xr = &x[b * n..(b + 1) * n];
        for k in 0..m {
            let vr = &v[k * n..(k + 1) * n];
            let best = max_of_sums(xr, vr);
            let idx = xr
                .iter()
                .zip(vr)
                .position(|(a, c)| a + c == best)
                .unwrap_or(0);
            values[b * m + k] = best;
            argmax[b * m + k] = idx as u32;
        }
    }
    let saturated = clamp_saturated(&mut values);
    MaxPlusOut {
        values,
        argmax,
        saturated,
    }
}

#[inline]
fn max_of_sums(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [NEG_INF; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for lane in 0..4 {
            let s = a[c * 4 + lane] + b[c * 4 + lane];
            if s > acc[lane] {
                acc[lane] = s;
            }
        }
    }
    let mut best = acc[0].max(acc[1]).max(acc[2].max(acc[3]));
    for i in chunks * 4..a.len() {
        let s = a[i] + b[i];
        if s > best {
            best = s;
        }
    }
    best
}

pub(crate) fn maxplus_dense_backward(
    argmax: &[u32],
    g: &[f64],
    batch: usize,
    n: usize,
    m: usize,
    mut dx: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    for b in 0..batch {
        for k in 0..m {
            let gk = g[b * m + k];
            if gk == 0.0 {
                continue;
            }
            let l = argmax[b * m + k] as usize;
            if let Some(dx) = dx.as_deref_mut() {
                dx[b * n + l] += gk;
            }
            if let Some(dv) = dv.as_deref_mut() {
                dv[k * n + l] += gk;
            }
        }
    }
}

/// Max-plus correlation over receptive fields; padded positions read `NEG_INF`.
pub(crate) fn maxplus_conv_forward(x: &[f64], v: &[f64], d: &ConvDims) -> MaxPlusOut {
    let (p, npos) = (d.field(), d.positions());
    let mut values = vec![NEG_INF; d.batch * d.out_plane()];
    let mut argmax = vec![0u32; d.batch * d.out_plane()];
    let mut cols = vec![0.0; p * npos];
    // Winning field index per position, kept as f64 so the select vectorizes.
    let mut best = vec![0.0f64; npos];
    let mut live = vec![false; p];
    for b in 0..d.batch {
        im2col(&x[b * d.in_plane()..(b + 1) * d.in_plane()], d, NEG_INF, &mut cols);
        for (q, l) in live.iter_mut().enumerate() {
            *l = cols[q * npos..(q + 1) * npos].iter().any(|&c| c != NEG_INF);
        }
        for k in 0..d.out_ch {
            let off = b * d.out_plane() + k * npos;
            let out = &mut values[off..off + npos];
            best.fill(0.0);
            let vk = &v[k * p..(k + 1) * p];
            // Ascending q with a strict comparison keeps the lowest index on
            // ties; positions that never see a finite sum stay at index 0.
            for (q, &vq) in vk.iter().enumerate() {
                if vq == NEG_INF || !live[q] {
                    continue;
                }
                let qf = q as f64;
                let row = &cols[q * npos..(q + 1) * npos];
                for ((o, a), &c) in out.iter_mut().zip(best.iter_mut()).zip(row) {
                    let s = c + vq;
                    let win = s > *o;
                    *o = if win { s } else { *o };
                    *a = if win { qf } else { *a };
                }
            }
            for (dst, &a) in argmax[off..off + npos].iter_mut().zip(&best) {
                *dst = a as u32;
            }
        }
    }
    let saturated = clamp_saturated(&mut values);
    MaxPlusOut {
        values,
        argmax,
        saturated,
    }
}

pub(crate) fn maxplus_conv_backward(
    argmax: &[u32],
    g: &[f64],
    d: &ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let (p, npos) = (d.field(), d.positions());
    for b in 0..d.batch {
        for k in 0..d.out_ch {
            let off = b * d.out_plane() + k * npos;
            for pos in 0..npos {
                let gk = g[off + pos];
                if gk == 0.0 {
                    continue;
                }
                let q = argmax[off + pos] as usize;
                if let Some(dv) = dv.as_deref_mut() {
                    dv[k * p + q] += gk;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    if let Some(src) = d.source(q, pos) {
                        dx[b * d.in_plane() + src] += gk;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling (stride equals window, trailing rows/cols dropped).
pub(crate) fn maxpool_forward(
    x: &[f64],
    shape: &[usize],
    kh: usize,
    kw: usize,
) -> (Vec<usize>, Vec<f64>, Vec<u32>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = NEG_INF;
                let mut best_i = oy * kh * w + ox * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let idx = (oy * kh + i) * w + ox * kw + j;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (vec![b, c, oh, ow], out, arg)
}
