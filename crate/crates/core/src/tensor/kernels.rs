//! Forward and backward kernels over raw tensors.
//!
//! These are the building blocks of the autograd ops; they can also be
//! called directly when no gradient is needed.

use super::{MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// `a x b` for `a: M x K`, `b: K x N`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.as_matrix("matmul")?;
    let [k2, n] = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        MatRef::new(a.data()),
        MatRef::new(b.data()),
        T::zero(),
        &mut out,
    );
    Tensor::from_op("matmul", vec![m, n], out)
}

/// Row-wise softmax of an `R x C` matrix, with per-row max subtraction.
pub fn softmax_row<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let [rows, cols] = m.as_matrix("softmax_row")?;
    let mut out = m.data().to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::from_op("softmax_row", vec![rows, cols], out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Per-channel extrema of a `C x N` matrix.
pub fn channel_minmax<T: Scalar>(f: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [c, n] = f.as_matrix("channel_minmax")?;
    let ext = channel_extrema(f.data(), c, n);
    Ok((
        ext.iter().map(|e| e.min).collect(),
        ext.iter().map(|e| e.max).collect(),
    ))
}

/// Extremum values together with the first position attaining each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrema<T> {
    pub min: T,
    pub max: T,
    pub argmin: usize,
    pub argmax: usize,
}

pub(crate) fn channel_extrema<T: Scalar>(data: &[T], c: usize, n: usize) -> Vec<Extrema<T>> {
    (0..c)
        .map(|ch| {
            let row = &data[ch * n..(ch + 1) * n];
            let mut e = Extrema {
                min: row[0],
                max: row[0],
                argmin: 0,
                argmax: 0,
            };
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v < e.min {
                    e.min = v;
                    e.argmin = i;
                }
                if v > e.max {
                    e.max = v;
                    e.argmax = i;
                }
            }
            e
        })
        .collect()
}

/// Sum of `values` accumulated in ascending order, so the result does not
/// depend on the order the values are stored in.
pub(crate) fn ordered_sum<T: Scalar>(values: &[T], scratch: &mut Vec<T>) -> T {
    scratch.clear();
    scratch.extend_from_slice(values);
    scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    scratch.iter().copied().sum()
}

/// Global average pooling: `B x C x H x W` (or `C x H x W`) to `B x C`.
pub fn gap<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = f.as_bchw("gap")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).expect("pixel count");
    let mut scratch = Vec::with_capacity(hw);
    let out = f
        .data()
        .chunks_exact(hw)
        .map(|plane| ordered_sum(plane, &mut scratch) * inv)
        .collect();
    let dims = if f.rank() == 3 { vec![c] } else { vec![b, c] };
    Tensor::from_op("gap", dims, out)
}

/// Leading zero padding for one axis of a "same" convolution, chosen so
/// that tap `j` of a `k`-tap kernel reads offset `(j - k/2) * dilation`.
/// Odd kernels are symmetric; even kernels put the extra tap on the leading
/// side.
pub fn same_padding(k: usize, dilation: usize) -> usize {
    (k / 2) * dilation
}

/// Geometry of a depthwise "same" convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DepthwiseGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl DepthwiseGeom {
    pub fn new(
        f: &Tensor<impl Scalar>,
        kernel: &Tensor<impl Scalar>,
        dilation: usize,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::InvalidArgument(format!(
                "depthwise dilation must be >= 1, got {dilation}"
            )));
        }
        let [batch, channels, h, w] = f.as_bchw("conv2d_depthwise")?;
        let [kc, kh, kw] = match *kernel.dims() {
            [a, b, c] => [a, b, c],
            _ => {
                return Err(Error::shape(
                    "conv2d_depthwise",
                    format!("kernel must be C x kh x kw, got {:?}", kernel.dims()),
                ))
            }
        };
        if kc != channels {
            return Err(Error::shape(
                "conv2d_depthwise",
                format!("kernel has {kc} channels, input has {channels}"),
            ));
        }
        Ok(Self {
            batch,
            channels,
            h,
            w,
            kh,
            kw,
            dilation,
        })
    }

    /// Visits every in-bounds `(tap_index, input_index, output_index)`
    /// triple within one channel plane.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (h, w, d) = (self.h as isize, self.w as isize, self.dilation as isize);
        let ph = same_padding(self.kh, self.dilation) as isize;
        let pw = same_padding(self.kw, self.dilation) as isize;
        for i in 0..self.kh {
            let dy = i as isize * d - ph;
            let y0 = (-dy).max(0);
            let y1 = (h - dy).min(h);
            for j in 0..self.kw {
                let dx = j as isize * d - pw;
                let x0 = (-dx).max(0);
                let x1 = (w - dx).min(w);
                if y0 >= y1 || x0 >= x1 {
                    continue;
                }
                let tap = i * self.kw + j;
                for y in y0..y1 {
                    let out_row = (y * w) as usize;
                    let in_row = ((y + dy) * w) as usize;
                    for x in x0..x1 {
                        visit(tap, in_row + (x + dx) as usize, out_row + x as usize);
                    }
                }
            }
        }
    }
}

/// Per-channel 2-D correlation with zero "same" padding (see
/// [`same_padding`]). Output spatial dims equal the input's.
pub fn conv2d_depthwise<T: Scalar>(
    f: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = DepthwiseGeom::new(f, kernel, dilation)?;
    let out = depthwise_forward(&g, f.data(), kernel.data());
    Tensor::from_op("conv2d_depthwise", f.dims().to_vec(), out)
}

pub(crate) fn depthwise_forward<T: Scalar>(g: &DepthwiseGeom, x: &[T], k: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * plane;
            let xin = &x[base..base + plane];
            let kc = &k[c * taps..(c + 1) * taps];
            let o = &mut out[base..base + plane];
            g.for_each_tap(|tap, xi, oi| o[oi] += kc[tap] * xin[xi]);
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn depthwise_backward<T: Scalar>(
    g: &DepthwiseGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * plane;
            let xin = &x[base..base + plane];
            let go = &dy[base..base + plane];
            let kc = &k[c * taps..(c + 1) * taps];
            let dkc = &mut dk[c * taps..(c + 1) * taps];
            let dxc = &mut dx[base..base + plane];
            g.for_each_tap(|tap, xi, oi| {
                dkc[tap] += go[oi] * xin[xi];
                dxc[xi] += go[oi] * kc[tap];
            });
        }
    }
    (dx, dk)
}

/// Hyper-parameters of a dense 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(
        x: &Tensor<impl Scalar>,
        weight: &Tensor<impl Scalar>,
        spec: ConvSpec,
    ) -> Result<Self> {
        if spec.stride < 1 || spec.dilation < 1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride and dilation must be >= 1, got {spec:?}"
            )));
        }
        let [batch, cin, h, w] = x.as_bchw("conv2d")?;
        let [cout, wcin, kh, kw] = match *weight.dims() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "weight must be Cout x Cin x kh x kw, got {:?}",
                        weight.dims()
                    ),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel span {span_h}x{span_w} exceeds padded input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * spec.padding - span_h) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - span_w) / spec.stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.oh * self.ow;
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let y = (oy * stride + i * dilation) as isize - padding as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = (ox * stride + j * dilation) as isize - padding as isize;
                            *d = if xx < 0 || xx >= self.w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.oh * self.ow;
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let y = (oy * stride + i * dilation) as isize - padding as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, &g) in row[oy * self.ow..(oy + 1) * self.ow].iter().enumerate() {
                            let xx = (ox * stride + j * dilation) as isize - padding as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution (cross-correlation) with symmetric zero padding.
/// `x: B x Cin x H x W`, `weight: Cout x Cin x kh x kw`, `bias: Cout`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, spec)?;
    if let Some(b) = bias {
        if b.dims() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must have {} entries, got {:?}", g.cout, b.dims()),
            ));
        }
    }
    let out = conv_forward(&g, x.data(), weight.data(), bias.map(Tensor::data));
    let dims = if x.rank() == 3 {
        vec![g.cout, g.oh, g.ow]
    } else {
        vec![g.batch, g.cout, g.oh, g.ow]
    };
    Tensor::from_op("conv2d", dims, out)
}

pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.oh * g.ow;
    let ck = g.col_rows();
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * p;
    let mut out = vec![T::zero(); g.batch * out_plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let yb = &mut out[b * out_plane..(b + 1) * out_plane];
        let rhs = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            ck,
            p,
            MatRef::new(w),
            MatRef::new(rhs),
            T::zero(),
            yb,
        );
        if let Some(bias) = bias {
            for (o, &bv) in yb.chunks_exact_mut(p).zip(bias) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when not
/// needed.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.oh * g.ow;
    let ck = g.col_rows();
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * p;
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let gy = &dy[b * out_plane..(b + 1) * out_plane];
        for (acc, row) in db.iter_mut().zip(gy.chunks_exact(p)) {
            *acc += row.iter().copied().sum::<T>();
        }
        let rhs = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(
            g.cout,
            p,
            ck,
            MatRef::new(gy),
            MatRef::t(rhs),
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
            if g.is_pointwise() {
                T::gemm(ck, g.cout, p, MatRef::t(w), MatRef::new(gy), T::zero(), dxb);
            } else {
                T::gemm(
                    ck,
                    g.cout,
                    p,
                    MatRef::t(w),
                    MatRef::new(gy),
                    T::zero(),
                    &mut dcols,
                );
                g.col2im(&dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Source sample positions for one axis of an `align_corners = false`
/// bilinear resize: `(lower index, upper index, upper weight)`.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Precomputed sampling positions of a bilinear resize between two fixed
/// plane sizes.
#[derive(Debug, Clone)]
pub(crate) struct BilinearPlan {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Self {
            h,
            w,
            oh,
            ow,
            ys: bilinear_axis(h, oh),
            xs: bilinear_axis(w, ow),
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], planes: usize) -> Vec<T> {
        let (w, oh, ow) = (self.w, self.oh, self.ow);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for plane in x.chunks_exact(self.h * w) {
            for &(y0, y1, ly) in &self.ys {
                let ly = T::from_f64_lossy(ly);
                let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
                for &(x0, x1, lx) in &self.xs {
                    let lx = T::from_f64_lossy(lx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * lx;
                    out.push(top + (bottom - top) * ly);
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, dy: &[T], planes: usize) -> Vec<T> {
        let (w, ow) = (self.w, self.ow);
        let mut dx = vec![T::zero(); planes * self.h * w];
        for (gplane, dplane) in dy
            .chunks_exact(self.oh * ow)
            .zip(dx.chunks_exact_mut(self.h * w))
        {
            for (oy, &(y0, y1, ly)) in self.ys.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (ox, &(x0, x1, lx)) in self.xs.iter().enumerate() {
                    let lx = T::from_f64_lossy(lx);
                    let g = gplane[oy * ow + ox];
                    let top = g * (T::one() - ly);
                    let bottom = g * ly;
                    dplane[y0 * w + x0] += top * (T::one() - lx);
                    dplane[y0 * w + x1] += top * lx;
                    dplane[y1 * w + x0] += bottom * (T::one() - lx);
                    dplane[y1 * w + x1] += bottom * lx;
                }
            }
        }
        dx
    }
}

/// Bilinear resize of every channel plane to `out_h x out_w`
/// (half-pixel centers, edge clamping).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.as_bchw("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let out = BilinearPlan::new(h, w, out_h, out_w).forward(x.data(), b * c);
    let dims = if x.rank() == 3 {
        vec![c, out_h, out_w]
    } else {
        vec![b, c, out_h, out_w]
    };
    Tensor::from_op("resize_bilinear", dims, out)
}
