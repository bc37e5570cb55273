//! Slice-level spatial kernels shared by [`Tensor`](crate::Tensor) and the tape.
//!
//! Every kernel uses a fixed loop nesting, so summation order (and hence the
//! result) never depends on thread count. Batched variants split work per
//! sample; cross-sample reductions are summed in sample order.

use rayon::prelude::*;

use crate::tensor::{Result, TensorError};

/// Convolution hyper-parameters. `kernel` is `(height, width, in_channels, out_channels)`;
/// weights are stored `[out, in, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvSpec {
    pub fn new(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw, c_in, c_out),
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    pub fn stride(mut self, h: usize, w: usize) -> Self {
        self.stride = (h, w);
        self
    }

    pub fn pad(mut self, h: usize, w: usize) -> Self {
        self.pad = (h, w);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.2
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.3
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel.3, self.kernel.2, self.kernel.0, self.kernel.1]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Output spatial extent for an `(h, w)` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent("conv2d", h, self.kernel.0, self.stride.0, self.pad.0)?;
        let ow = out_extent("conv2d", w, self.kernel.1, self.stride.1, self.pad.1)?;
        Ok((oh, ow))
    }
}

/// `floor((input + 2·pad − window)/stride) + 1`, rejecting non-positive results.
pub fn out_extent(op: &'static str, input: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || window == 0 || padded < window {
        return Err(TensorError::NonPositiveExtent {
            op,
            input,
            window,
            stride,
            pad,
        });
    }
    Ok((padded - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.oh, self.ow]
    }

    /// Output indices `o` with `0 <= o*stride + k - pad < extent`.
    fn valid(o_max: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        if extent + pad <= k {
            return (0, 0);
        }
        let hi = ((extent - 1 + pad - k) / stride + 1).min(o_max);
        (lo.min(hi), hi)
    }

    fn rows(&self, ky: usize) -> (usize, usize) {
        Self::valid(self.oh, self.h, ky, self.sh, self.ph)
    }

    fn cols(&self, kx: usize) -> (usize, usize) {
        Self::valid(self.ow, self.w, kx, self.sw, self.pw)
    }
}

pub(crate) fn with_batch(batched: bool, batch: usize, shape: &[usize; 3]) -> Vec<usize> {
    if batched {
        vec![batch, shape[0], shape[1], shape[2]]
    } else {
        shape.to_vec()
    }
}

fn split_batch(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((1, [c, h, w])),
        [b, c, h, w] => Ok((b, [c, h, w])),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a rank-3 or rank-4 map, got {shape:?}"),
        }),
    }
}

pub(crate) fn conv_geometry(
    spec: &ConvSpec,
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
) -> Result<(usize, ConvGeom)> {
    let (batch, [c, h, w]) = split_batch("conv2d", input)?;
    if c != spec.in_channels() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![spec.in_channels(), h, w],
            actual: vec![c, h, w],
        });
    }
    if weight != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: spec.weight_shape().to_vec(),
            actual: weight.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b != [spec.out_channels()] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![spec.out_channels()],
                actual: b.to_vec(),
            });
        }
    }
    let (oh, ow) = spec.output_extent(h, w)?;
    Ok((
        batch,
        ConvGeom {
            c_in: c,
            h,
            w,
            c_out: spec.out_channels(),
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.pad.0,
            pw: spec.pad.1,
            oh,
            ow,
        },
    ))
}

/// `C (m×n) = A (m×k) · B (k×n) + beta · C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), beta: f64, c: &mut [f64], (rsc, csc): (usize, usize)) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds every receptive field of a batch into rows of `col`
/// (`[batch·oh·ow, c_in·kh·kw]`); out-of-bounds taps are zero.
fn im2col(input: &[f64], g: &ConvGeom, batch: usize) -> Vec<f64> {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut col = vec![0.0; batch * p * k];
    col.par_chunks_mut(p * k).enumerate().for_each(|(b, cs)| {
        let inp = &input[b * g.in_len()..(b + 1) * g.in_len()];
        for ic in 0..g.c_in {
            for ky in 0..g.kh {
                let (y0, y1) = g.rows(ky);
                for kx in 0..g.kw {
                    let (x0, x1) = g.cols(kx);
                    let kk = (ic * g.kh + ky) * g.kw + kx;
                    for oy in y0..y1 {
                        let iy = oy * g.sh + ky - g.ph;
                        let row = &inp[(ic * g.h + iy) * g.w..(ic * g.h + iy + 1) * g.w];
                        for ox in x0..x1 {
                            cs[(oy * g.ow + ox) * k + kk] = row[ox * g.sw + kx - g.pw];
                        }
                    }
                }
            }
        }
    });
    col
}

/// Scatter-adds unfolded gradients back onto the input layout.
fn col2im(col: &[f64], g: &ConvGeom, batch: usize, gin: &mut [f64]) {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    gin.par_chunks_mut(g.in_len()).enumerate().take(batch).for_each(|(b, gi)| {
        let cs = &col[b * p * k..(b + 1) * p * k];
        for ic in 0..g.c_in {
            for ky in 0..g.kh {
                let (y0, y1) = g.rows(ky);
                for kx in 0..g.kw {
                    let (x0, x1) = g.cols(kx);
                    let kk = (ic * g.kh + ky) * g.kw + kx;
                    for oy in y0..y1 {
                        let iy = oy * g.sh + ky - g.ph;
                        let row = &mut gi[(ic * g.h + iy) * g.w..(ic * g.h + iy + 1) * g.w];
                        for ox in x0..x1 {
                            row[ox * g.sw + kx - g.pw] += cs[(oy * g.ow + ox) * k + kk];
                        }
                    }
                }
            }
        }
    });
}

/// Batched cross-correlation, lowered to one matrix product over all samples
/// and positions. Each output is its receptive-field dot product summed in
/// `(ic, ky, kx)` order, with the bias added last.
pub(crate) fn conv2d_forward_batch(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    batch: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * g.in_len());
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    let n = batch * p;
    let col = im2col(input, g, batch);
    // tmp[oc, b·p] = W[oc, :] · col[b·p, :]
    let mut tmp = vec![0.0; g.c_out * n];
    gemm(g.c_out, k, n, weight, (k, 1), &col, (1, k), 0.0, &mut tmp, (n, 1));
    for b in 0..batch {
        for oc in 0..g.c_out {
            let shift = bias.map_or(0.0, |bs| bs[oc]);
            let src = &tmp[oc * n + b * p..oc * n + (b + 1) * p];
            let dst = &mut out[(b * g.c_out + oc) * p..(b * g.c_out + oc + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + shift;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_batch(
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    batch: usize,
    gin: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let k = g.c_in * g.kh * g.kw;
    let p = g.oh * g.ow;
    let n = batch * p;
    // gout viewed as [c_out, batch·p]
    let mut gt = vec![0.0; g.c_out * n];
    for b in 0..batch {
        for oc in 0..g.c_out {
            gt[oc * n + b * p..oc * n + (b + 1) * p].copy_from_slice(&gout[(b * g.c_out + oc) * p..(b * g.c_out + oc + 1) * p]);
        }
    }
    if let Some(gb) = gb {
        for (oc, d) in gb.iter_mut().enumerate() {
            *d += gt[oc * n..(oc + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        let col = im2col(input, g, batch);
        gemm(g.c_out, n, k, &gt, (n, 1), &col, (k, 1), 1.0, gw, (k, 1));
    }
    if let Some(gin) = gin {
        let mut dcol = vec![0.0; n * k];
        gemm(n, g.c_out, k, &gt, (1, n), weight, (k, 1), 0.0, &mut dcol, (k, 1));
        col2im(&dcol, g, batch, gin);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c * self.oh * self.ow
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c, self.oh, self.ow]
    }
}

pub(crate) fn pool_geometry(shape: &[usize], window: (usize, usize), stride: (usize, usize)) -> Result<(usize, PoolGeom)> {
    let (batch, [c, h, w]) = split_batch("maxpool2d", shape)?;
    let oh = out_extent("maxpool2d", h, window.0, stride.0, 0)?;
    let ow = out_extent("maxpool2d", w, window.1, stride.1, 0)?;
    Ok((
        batch,
        PoolGeom {
            c,
            h,
            w,
            wh: window.0,
            ww: window.1,
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
        },
    ))
}

/// `argmax` receives flat indices into the whole (batched) input.
pub(crate) fn maxpool_forward_batch(input: &[f64], g: &PoolGeom, batch: usize, out: &mut [f64], argmax: &mut [usize]) {
    for b in 0..batch {
        let base = b * g.in_len();
        for c in 0..g.c {
            let plane = base + c * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = plane + oy * g.sh * g.w + ox * g.sw;
                    for ky in 0..g.wh {
                        for kx in 0..g.ww {
                            let idx = plane + (oy * g.sh + ky) * g.w + ox * g.sw + kx;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = b * g.out_len() + (c * g.oh + oy) * g.ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
}

pub(crate) fn gap_forward(input: &[f64], maps: usize, plane: usize, out: &mut [f64]) {
    for m in 0..maps {
        out[m] = input[m * plane..(m + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
}

pub(crate) fn dense_geometry(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    let (batch, n) = match *input {
        [n] => (1, n),
        [b, n] => (b, n),
        _ => {
            return Err(TensorError::Invalid {
                op: "dense",
                msg: format!("expected rank-1 or rank-2 input, got {input:?}"),
            })
        }
    };
    let m = match *weight {
        [wn, m] if wn == n => m,
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                expected: vec![n, weight.last().copied().unwrap_or(0)],
                actual: weight.to_vec(),
            })
        }
    };
    if let Some(b) = bias {
        if b != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                expected: vec![m],
                actual: b.to_vec(),
            });
        }
    }
    Ok((batch, n, m))
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, batch: usize, n: usize, m: usize, out: &mut [f64]) {
    gemm(batch, n, m, x, (n, 1), w, (m, 1), 0.0, out, (m, 1));
    if let Some(bias) = bias {
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
    }
}

/// Direct-loop convolution, kept as an independent oracle for the lowered kernels.
#[cfg(test)]
pub(crate) mod direct {
    use super::*;

    pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom, out: &mut [f64]) {
        let plane = g.oh * g.ow;
        let in_plane = g.h * g.w;
        for oc in 0..g.c_out {
            let o = &mut out[oc * plane..(oc + 1) * plane];
            o.fill(0.0);
            for ic in 0..g.c_in {
                let inp = &input[ic * in_plane..(ic + 1) * in_plane];
                for ky in 0..g.kh {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.kw {
                        let wv = weight[((oc * g.c_in + ic) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.cols(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let row_in = &inp[iy * g.w..(iy + 1) * g.w];
                            let row_out = &mut o[oy * g.ow..(oy + 1) * g.ow];
                            if g.sw == 1 {
                                let off = kx as isize - g.pw as isize;
                                let src = &row_in[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                                for (d, s) in row_out[x0..x1].iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    row_out[ox] += wv * row_in[ox * g.sw + kx - g.pw];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for v in o.iter_mut() {
                    *v += b[oc];
                }
            }
        }
    }

    pub(crate) fn conv2d_forward_batch_direct(
        input: &[f64],
        weight: &[f64],
        bias: Option<&[f64]>,
        g: &ConvGeom,
        batch: usize,
        out: &mut [f64],
    ) {
        debug_assert_eq!(input.len(), batch * g.in_len());
        out.par_chunks_mut(g.out_len())
            .zip(input.par_chunks(g.in_len()))
            .for_each(|(o, i)| conv2d_forward(i, weight, bias, g, o));
    }

    /// Accumulates `d input` into `gin`.
    pub(crate) fn conv2d_backward_input(gout: &[f64], weight: &[f64], g: &ConvGeom, gin: &mut [f64]) {
        let plane = g.oh * g.ow;
        let in_plane = g.h * g.w;
        for oc in 0..g.c_out {
            let go = &gout[oc * plane..(oc + 1) * plane];
            for ic in 0..g.c_in {
                let gi = &mut gin[ic * in_plane..(ic + 1) * in_plane];
                for ky in 0..g.kh {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.kw {
                        let wv = weight[((oc * g.c_in + ic) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.cols(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let row_g = &go[oy * g.ow..(oy + 1) * g.ow];
                            let row_in = &mut gi[iy * g.w..(iy + 1) * g.w];
                            if g.sw == 1 {
                                let off = kx as isize - g.pw as isize;
                                let dst = &mut row_in[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                                for (d, s) in dst.iter_mut().zip(&row_g[x0..x1]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    row_in[ox * g.sw + kx - g.pw] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `d weight` (and `d bias`) for one sample.
    pub(crate) fn conv2d_backward_params(input: &[f64], gout: &[f64], g: &ConvGeom, gw: &mut [f64], gb: Option<&mut [f64]>) {
        let plane = g.oh * g.ow;
        let in_plane = g.h * g.w;
        for oc in 0..g.c_out {
            let go = &gout[oc * plane..(oc + 1) * plane];
            for ic in 0..g.c_in {
                let inp = &input[ic * in_plane..(ic + 1) * in_plane];
                for ky in 0..g.kh {
                    let (y0, y1) = g.rows(ky);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.cols(kx);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let row_in = &inp[iy * g.w..(iy + 1) * g.w];
                            let row_g = &go[oy * g.ow..(oy + 1) * g.ow];
                            for ox in x0..x1 {
                                acc += row_g[ox] * row_in[ox * g.sw + kx - g.pw];
                            }
                        }
                        gw[((oc * g.c_in + ic) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
        if let Some(gb) = gb {
            for oc in 0..g.c_out {
                gb[oc] += gout[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
        }
    }

    pub(crate) fn conv2d_backward_batch_direct(
        input: &[f64],
        weight: &[f64],
        gout: &[f64],
        g: &ConvGeom,
        batch: usize,
        gin: Option<&mut [f64]>,
        gw: Option<&mut [f64]>,
        gb: Option<&mut [f64]>,
    ) {
        if let Some(gin) = gin {
            gin.par_chunks_mut(g.in_len())
                .zip(gout.par_chunks(g.out_len()))
                .for_each(|(gi, go)| conv2d_backward_input(go, weight, g, gi));
        }
        if gw.is_none() && gb.is_none() {
            return;
        }
        let want_bias = gb.is_some();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut pw = vec![0.0; g.weight_len()];
                let mut pb = vec![0.0; if want_bias { g.c_out } else { 0 }];
                conv2d_backward_params(
                    &input[b * g.in_len()..(b + 1) * g.in_len()],
                    &gout[b * g.out_len()..(b + 1) * g.out_len()],
                    g,
                    &mut pw,
                    want_bias.then_some(pb.as_mut_slice()),
                );
                (pw, pb)
            })
            .collect();
        if let Some(gw) = gw {
            for (pw, _) in &partials {
                for (d, s) in gw.iter_mut().zip(pw) {
                    *d += s;
                }
            }
        }
        if let Some(gb) = gb {
            for (_, pb) in &partials {
                for (d, s) in gb.iter_mut().zip(pb) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Precision, Tensor};

    fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape.to_vec(), 1.0, Precision::F64)
    }

    #[test]
    fn table_layer1_shape() {
        let spec = ConvSpec::new(7, 7, 3, 32).stride(3, 3);
        assert_eq!(spec.output_extent(112, 112).unwrap(), (36, 36));
    }

    #[test]
    fn conv_hand_sum() {
        let x = ones(&[1, 3, 3]);
        let w = ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&ConvSpec::new(3, 3, 1, 1), &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let w = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = x.conv2d(&ConvSpec::new(1, 1, 2, 2), &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_padding_and_stride() {
        // 3x3 ones with pad 1: corner outputs see 4 taps, edges 6, centre 9.
        let x = ones(&[1, 3, 3]);
        let w = ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&ConvSpec::new(3, 3, 1, 1).pad(1, 1), &w, None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let y = x.conv2d(&ConvSpec::new(3, 3, 1, 1).pad(1, 1).stride(2, 2), &w, None).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = ones(&[2, 3, 3]);
        let w = ones(&[1, 1, 3, 3]);
        assert!(matches!(
            x.conv2d(&ConvSpec::new(3, 3, 1, 1), &w, None),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let x = ones(&[1, 2, 2]);
        assert!(matches!(
            x.conv2d(&ConvSpec::new(3, 3, 1, 1), &w, None),
            Err(TensorError::NonPositiveExtent { .. })
        ));
    }

    #[test]
    fn maxpool_values_and_shapes() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = x.maxpool2d((2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let big = Tensor::full(vec![32, 36, 36], -0.5, Precision::F64);
        let (y, _) = big.maxpool2d((3, 3), (3, 3)).unwrap();
        assert_eq!(y.shape(), &[32, 12, 12]);
        assert!(y.data().iter().all(|&v| v == -0.5));

        assert!(x.maxpool2d((3, 3), (1, 1)).is_err());
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = x.maxpool2d((2, 2), (2, 2)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn batched_conv_matches_per_sample() {
        let spec = ConvSpec::new(3, 3, 2, 3).pad(1, 1);
        let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|s| Tensor::new(vec![2, 4, 5], (0..40).map(|v| ((v + 7 * s) as f64 * 0.91).cos()).collect()).unwrap())
            .collect();
        let mut all = Vec::new();
        for x in &xs {
            all.extend_from_slice(x.data());
        }
        let batched = Tensor::new(vec![3, 2, 4, 5], all).unwrap().conv2d(&spec, &w, Some(&b)).unwrap();
        assert_eq!(batched.shape(), &[3, 3, 4, 5]);
        for (s, x) in xs.iter().enumerate() {
            let single = x.conv2d(&spec, &w, Some(&b)).unwrap();
            assert_eq!(&batched.data()[s * 60..(s + 1) * 60], single.data());
        }
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        for (spec, h, w) in [
            (ConvSpec::new(3, 3, 2, 3).pad(1, 1), 4, 5),
            (ConvSpec::new(5, 5, 1, 4).stride(2, 2), 13, 13),
            (ConvSpec::new(3, 2, 3, 2).stride(2, 1).pad(1, 0), 6, 5),
        ] {
            let (batch, g) = conv_geometry(&spec, &[2, spec.in_channels(), h, w], &spec.weight_shape(), None).unwrap();
            let x: Vec<f64> = (0..batch * g.in_len()).map(|v| (v as f64 * 0.61).sin()).collect();
            let wt: Vec<f64> = (0..g.weight_len()).map(|v| (v as f64 * 0.29).cos()).collect();
            let bias: Vec<f64> = (0..g.c_out).map(|v| v as f64 * 0.1).collect();
            let go: Vec<f64> = (0..batch * g.out_len()).map(|v| (v as f64 * 0.17).sin()).collect();

            let mut a = vec![0.0; batch * g.out_len()];
            let mut b = a.clone();
            conv2d_forward_batch(&x, &wt, Some(&bias), &g, batch, &mut a);
            direct::conv2d_forward_batch_direct(&x, &wt, Some(&bias), &g, batch, &mut b);
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));

            let mut gi = (vec![0.0; x.len()], vec![0.0; x.len()]);
            let mut gw = (vec![0.0; wt.len()], vec![0.0; wt.len()]);
            let mut gb = (vec![0.0; g.c_out], vec![0.0; g.c_out]);
            conv2d_backward_batch(&x, &wt, &go, &g, batch, Some(&mut gi.0), Some(&mut gw.0), Some(&mut gb.0));
            direct::conv2d_backward_batch_direct(&x, &wt, &go, &g, batch, Some(&mut gi.1), Some(&mut gw.1), Some(&mut gb.1));
            for (p, q) in [(&gi.0, &gi.1), (&gw.0, &gw.1), (&gb.0, &gb.1)] {
                assert!(p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12));
            }
        }
    }
}
