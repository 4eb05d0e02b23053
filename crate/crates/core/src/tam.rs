//! Threshold attention.
//!
//! Each channel of a `C x N` feature map is split into `L` equal-width bins
//! between its extrema. Attention runs over the `L x C` matrix of bin
//! centers instead of over the `N` pixels, and every pixel then reads back
//! the attended row of its own bin. Cost is `O(L*C^2 + L^2*C)` for the
//! attention plus `O(C*N)` for binning and the gather, so it is linear in
//! the pixel count.
//!
//! Gradients: bin indices and extremum positions are constants of the
//! backward pass. Gradients reach the projections through `Q`, `K`, `V`
//! and reach the input only through the bin centers' dependence on the
//! extremum values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{channel_extrema, softmax_in_place, Extrema};
use crate::tensor::{MatRef, Scalar, Tensor};

/// Default level count for enhancement-module instances.
pub const DEFAULT_AFEM_LEVELS: usize = 150;
/// Default level count for pyramid-pooling instances.
pub const DEFAULT_TAPP_LEVELS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    levels: usize,
}

impl ThresholdSpec {
    pub fn new(levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument(
                "threshold level count must be >= 1".into(),
            ));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

/// Per-channel bin centers, `centers: L x C`.
#[derive(Debug, Clone)]
pub struct ThresholdMatrix<T: Scalar> {
    pub centers: Tensor<T>,
    pub channel_min: Vec<T>,
    pub channel_max: Vec<T>,
}

/// Query/key/value projections, each `C x C`.
#[derive(Debug, Clone)]
pub struct ProjectionParams<T: Scalar> {
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn from_tensors(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>) -> Result<Self> {
        let c = wq.dims().first().copied().unwrap_or(0);
        for w in [&wq, &wk, &wv] {
            if w.dims() != [c, c] {
                return Err(Error::shape(
                    "projection_params",
                    format!("projections must all be {c} x {c}, got {:?}", w.dims()),
                ));
            }
        }
        Ok(Self {
            wq: Parameter::new(wq),
            wk: Parameter::new(wk),
            wv: Parameter::new(wv),
        })
    }

    /// Random init. Query and key use a small scale so the unscaled
    /// logits start near uniform attention; values use `1/sqrt(C)`.
    pub fn random(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels as f64;
        Self::from_tensors(
            Tensor::randn(vec![channels, channels], 1.0 / c, rng)?,
            Tensor::randn(vec![channels, channels], 1.0 / c, rng)?,
            Tensor::randn(vec![channels, channels], 1.0 / c.sqrt(), rng)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.wq.value.dims()[0]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Parameter<T>); 3] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
        ]
    }
}

/// Intermediates of the attention over bin centers.
#[derive(Debug, Clone)]
pub struct AttentionState<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Row softmax of `Q K^T`, `L x L`.
    pub s: Tensor<T>,
    /// `S V`, `L x C`.
    pub a: Tensor<T>,
}

/// Bin index of every pixel, `C x N` row-major, entries in `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    channels: usize,
    pixels: usize,
    levels: Vec<usize>,
}

impl LevelMap {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn get(&self, c: usize, n: usize) -> usize {
        self.levels[c * self.pixels + n]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.levels
    }
}

fn centers_into<T: Scalar>(ext: &[Extrema<T>], levels: usize, out: &mut [T]) {
    let c = ext.len();
    let two_l = T::from_usize(2 * levels).expect("level count");
    for (ch, e) in ext.iter().enumerate() {
        let step = (e.max - e.min) / two_l;
        for l in 0..levels {
            let odd = T::from_usize(2 * l + 1).expect("level index");
            out[l * c + ch] = step * odd + e.min;
        }
    }
}

#[inline]
fn level_of<T: Scalar>(v: T, e: &Extrema<T>, levels: usize, lf: T) -> usize {
    if e.max > e.min {
        let raw = ((v - e.min) / (e.max - e.min) * lf).floor();
        raw.to_usize().unwrap_or(0).min(levels - 1)
    } else {
        0
    }
}

fn levels_into<T: Scalar>(f: &[T], ext: &[Extrema<T>], n: usize, levels: usize, out: &mut [usize]) {
    let lf = T::from_usize(levels).expect("level count");
    for (ch, e) in ext.iter().enumerate() {
        for (o, &v) in out[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(&f[ch * n..(ch + 1) * n])
        {
            *o = level_of(v, e, levels, lf);
        }
    }
}

/// Bin centers of a `C x N` map:
/// `center[l][c] = (max_c - min_c) / (2L) * (2l + 1) + min_c`, `l = 0..L`.
pub fn threshold_centers<T: Scalar>(
    f: &Tensor<T>,
    spec: ThresholdSpec,
) -> Result<ThresholdMatrix<T>> {
    let [c, n] = f.as_matrix("threshold_centers")?;
    let ext = channel_extrema(f.data(), c, n);
    let mut centers = vec![T::zero(); spec.levels * c];
    centers_into(&ext, spec.levels, &mut centers);
    Ok(ThresholdMatrix {
        centers: Tensor::from_op("threshold_centers", vec![spec.levels, c], centers)?,
        channel_min: ext.iter().map(|e| e.min).collect(),
        channel_max: ext.iter().map(|e| e.max).collect(),
    })
}

/// Bin index of every entry of a `C x N` map:
/// `clamp(floor((f - min) / (max - min) * L), 0, L - 1)`, and `0` for a
/// constant channel. A value exactly on a bin edge takes the floor index.
pub fn discretize<T: Scalar>(f: &Tensor<T>, spec: ThresholdSpec) -> Result<LevelMap> {
    let [c, n] = f.as_matrix("discretize")?;
    let ext = channel_extrema(f.data(), c, n);
    let mut levels = vec![0; c * n];
    levels_into(f.data(), &ext, n, spec.levels, &mut levels);
    Ok(LevelMap {
        channels: c,
        pixels: n,
        levels,
    })
}

fn check_projections<T: Scalar>(c: usize, p: &ProjectionParams<T>, op: &'static str) -> Result<()> {
    for w in [&p.wq.value, &p.wk.value, &p.wv.value] {
        if w.dims() != [c, c] {
            return Err(Error::shape(
                op,
                format!(
                    "{c} channels need {c} x {c} projections, got {:?}",
                    w.dims()
                ),
            ));
        }
    }
    Ok(())
}

/// `Q = T Wq`, `K = T Wk`, `V = T Wv`, `S = softmax_row(Q K^T)` (unscaled),
/// `A = S V`.
pub fn attention_over_thresholds<T: Scalar>(
    t: &ThresholdMatrix<T>,
    p: &ProjectionParams<T>,
) -> Result<AttentionState<T>> {
    let [levels, c] = t.centers.as_matrix("attention_over_thresholds")?;
    check_projections(c, p, "attention_over_thresholds")?;
    let w = Weights::of(p);
    let st = attend(t.centers.data(), levels, c, &w);
    let mk = |dims: Vec<usize>, d: Vec<T>| Tensor::from_op("attention_over_thresholds", dims, d);
    Ok(AttentionState {
        q: mk(vec![levels, c], st.q)?,
        k: mk(vec![levels, c], st.k)?,
        v: mk(vec![levels, c], st.v)?,
        s: mk(vec![levels, levels], st.s)?,
        a: mk(vec![levels, c], st.a)?,
    })
}

struct Weights<'a, T> {
    q: &'a [T],
    k: &'a [T],
    v: &'a [T],
}

impl<'a, T: Scalar> Weights<'a, T> {
    fn of(p: &'a ProjectionParams<T>) -> Self {
        Self {
            q: p.wq.value.data(),
            k: p.wk.value.data(),
            v: p.wv.value.data(),
        }
    }
}

struct Attended<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    s: Vec<T>,
    a: Vec<T>,
}

fn attend<T: Scalar>(centers: &[T], levels: usize, c: usize, w: &Weights<'_, T>) -> Attended<T> {
    let project = |wm: &[T]| {
        let mut out = vec![T::zero(); levels * c];
        T::gemm(
            levels,
            c,
            c,
            MatRef::new(centers),
            MatRef::new(wm),
            T::zero(),
            &mut out,
        );
        out
    };
    let (q, k, v) = (project(w.q), project(w.k), project(w.v));
    let mut s = vec![T::zero(); levels * levels];
    T::gemm(
        levels,
        c,
        levels,
        MatRef::new(&q),
        MatRef::t(&k),
        T::zero(),
        &mut s,
    );
    for row in s.chunks_exact_mut(levels) {
        softmax_in_place(row);
    }
    let mut a = vec![T::zero(); levels * c];
    T::gemm(
        levels,
        levels,
        c,
        MatRef::new(&s),
        MatRef::new(&v),
        T::zero(),
        &mut a,
    );
    Attended { q, k, v, s, a }
}

/// Everything one sample's forward pass produces; the backward pass needs
/// all of it.
struct SampleState<T> {
    ext: Vec<Extrema<T>>,
    centers: Vec<T>,
    att: Attended<T>,
    levels: Vec<usize>,
}

fn sample_forward<T: Scalar>(
    f: &[T],
    c: usize,
    n: usize,
    levels: usize,
    w: &Weights<'_, T>,
    out: &mut [T],
) -> SampleState<T> {
    let ext = channel_extrema(f, c, n);
    let mut centers = vec![T::zero(); levels * c];
    centers_into(&ext, levels, &mut centers);
    let att = attend(&centers, levels, c, w);
    let mut lv = vec![0; c * n];
    levels_into(f, &ext, n, levels, &mut lv);
    for ch in 0..c {
        for (o, &l) in out[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(&lv[ch * n..(ch + 1) * n])
        {
            *o = att.a[l * c + ch];
        }
    }
    SampleState {
        ext,
        centers,
        att,
        levels: lv,
    }
}

fn validate_input<T: Scalar>(f: &Tensor<T>, p: &ProjectionParams<T>) -> Result<[usize; 4]> {
    let dims = f.as_bchw("tam_forward")?;
    check_projections(dims[1], p, "tam_forward")?;
    if !f.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "tam_forward" });
    }
    Ok(dims)
}

/// Threshold attention over a `C x H x W` or `B x C x H x W` map; batched
/// samples are processed independently (per-sample extrema). The output has
/// the input's dims and `out[c][n] = A[level[c][n]][c]`.
pub fn tam_forward<T: Scalar>(
    f: &Tensor<T>,
    spec: ThresholdSpec,
    p: &ProjectionParams<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = validate_input(f, p)?;
    let n = h * w;
    let weights = Weights::of(p);
    let mut out = vec![T::zero(); f.len()];
    for bi in 0..b {
        let span = bi * c * n..(bi + 1) * c * n;
        sample_forward(
            &f.data()[span.clone()],
            c,
            n,
            spec.levels,
            &weights,
            &mut out[span],
        );
    }
    Tensor::from_op("tam_forward", f.dims().to_vec(), out)
}

/// Closed-form flop count of one threshold attention pass:
/// `6LC^2` (three projections) `+ 4L^2C` (`QK^T` and `SV`) `+ 5L^2`
/// (softmax at 5 per entry) `+ 4CN` (extrema, binning, gather).
pub fn tam_flops(c: u64, n: u64, l: u64) -> u64 {
    tam_flop_breakdown(c, n, l).iter().map(|(_, v)| v).sum()
}

pub(crate) fn tam_flop_breakdown(c: u64, n: u64, l: u64) -> [(&'static str, u64); 4] {
    [
        ("projections", 6 * l * c * c),
        ("attention", 4 * l * l * c),
        ("softmax", 5 * l * l),
        ("pixel_ops", 4 * c * n),
    ]
}

impl<T: Scalar> Graph<T> {
    /// Differentiable threshold attention over a `B x C x H x W` map.
    pub fn tam(&mut self, x: Var, spec: ThresholdSpec, p: &ProjectionParams<T>) -> Result<Var> {
        let vars = [self.param(&p.wq), self.param(&p.wk), self.param(&p.wv)];
        self.tam_vars(x, spec, vars)
    }

    /// As [`Graph::tam`], with the projections given as recorded values
    /// `[wq, wk, wv]`.
    pub fn tam_vars(&mut self, x: Var, spec: ThresholdSpec, [wq, wk, wv]: [Var; 3]) -> Result<Var> {
        let xv = self.value(x).clone();
        let (pq, pk, pv) = (
            self.value(wq).clone(),
            self.value(wk).clone(),
            self.value(wv).clone(),
        );
        let [b, c, h, w] = xv.as_bchw("tam")?;
        if xv.rank() != 4 {
            return Err(Error::shape("tam", "graph tam expects a batched map"));
        }
        for m in [&pq, &pk, &pv] {
            if m.dims() != [c, c] {
                return Err(Error::shape(
                    "tam",
                    format!(
                        "{c} channels need {c} x {c} projections, got {:?}",
                        m.dims()
                    ),
                ));
            }
        }
        if !xv.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tam" });
        }
        let n = h * w;
        let levels = spec.levels;
        let weights = Weights {
            q: pq.data(),
            k: pk.data(),
            v: pv.data(),
        };
        let mut out = vec![T::zero(); xv.len()];
        let states: Vec<SampleState<T>> = (0..b)
            .map(|bi| {
                let span = bi * c * n..(bi + 1) * c * n;
                sample_forward(
                    &xv.data()[span.clone()],
                    c,
                    n,
                    levels,
                    &weights,
                    &mut out[span],
                )
            })
            .collect();
        let out = Tensor::from_op("tam", xv.dims().to_vec(), out)?;
        let dims = xv.dims().to_vec();
        Ok(self.record(
            out,
            vec![x, wq, wk, wv],
            Box::new(move |g, need| {
                let mut dx = need[0].then(|| vec![T::zero(); b * c * n]);
                let mut dwq = vec![T::zero(); c * c];
                let mut dwk = vec![T::zero(); c * c];
                let mut dwv = vec![T::zero(); c * c];
                for (bi, st) in states.iter().enumerate() {
                    let gs = &g.data()[bi * c * n..(bi + 1) * c * n];
                    let dt = sample_backward(
                        st,
                        gs,
                        c,
                        n,
                        levels,
                        [pq.data(), pk.data(), pv.data()],
                        [&mut dwq, &mut dwk, &mut dwv],
                    );
                    if let Some(dx) = dx.as_mut() {
                        scatter_center_grad(
                            st,
                            &dt,
                            c,
                            n,
                            levels,
                            &mut dx[bi * c * n..(bi + 1) * c * n],
                        );
                    }
                }
                let mk = |d: Vec<T>| Tensor::from_op("tam", vec![c, c], d);
                Ok(vec![
                    dx.map(|d| Tensor::from_op("tam", dims.clone(), d))
                        .transpose()?,
                    Some(mk(dwq)?),
                    Some(mk(dwk)?),
                    Some(mk(dwv)?),
                ])
            }),
        ))
    }
}

/// Accumulates projection gradients for one sample and returns the
/// gradient w.r.t. the bin centers (`L x C`).
fn sample_backward<T: Scalar>(
    st: &SampleState<T>,
    g: &[T],
    c: usize,
    n: usize,
    levels: usize,
    w: [&[T]; 3],
    dw: [&mut Vec<T>; 3],
) -> Vec<T> {
    let att = &st.att;
    // gather transpose: dA[l][c] = sum of output grads of pixels in bin l
    let mut da = vec![T::zero(); levels * c];
    for ch in 0..c {
        for (&l, &gv) in st.levels[ch * n..(ch + 1) * n]
            .iter()
            .zip(&g[ch * n..(ch + 1) * n])
        {
            da[l * c + ch] += gv;
        }
    }
    let mut ds = vec![T::zero(); levels * levels];
    T::gemm(
        levels,
        c,
        levels,
        MatRef::new(&da),
        MatRef::t(&att.v),
        T::zero(),
        &mut ds,
    );
    let mut dv = vec![T::zero(); levels * c];
    T::gemm(
        levels,
        levels,
        c,
        MatRef::t(&att.s),
        MatRef::new(&da),
        T::zero(),
        &mut dv,
    );
    let mut dz = vec![T::zero(); levels * levels];
    crate::autograd::softmax_backward_rows(&att.s, &ds, levels, &mut dz);
    let mut dq = vec![T::zero(); levels * c];
    T::gemm(
        levels,
        levels,
        c,
        MatRef::new(&dz),
        MatRef::new(&att.k),
        T::zero(),
        &mut dq,
    );
    let mut dk = vec![T::zero(); levels * c];
    T::gemm(
        levels,
        levels,
        c,
        MatRef::t(&dz),
        MatRef::new(&att.q),
        T::zero(),
        &mut dk,
    );

    let [dwq, dwk, dwv] = dw;
    let mut dt = vec![T::zero(); levels * c];
    for ((dproj, wm), acc) in [&dq, &dk, &dv].into_iter().zip(w).zip([dwq, dwk, dwv]) {
        T::gemm(
            c,
            levels,
            c,
            MatRef::t(&st.centers),
            MatRef::new(dproj),
            T::one(),
            acc,
        );
        T::gemm(
            levels,
            c,
            c,
            MatRef::new(dproj),
            MatRef::t(wm),
            T::one(),
            &mut dt,
        );
    }
    dt
}

/// Routes the center gradient to the pixels holding each channel's
/// extrema: `center[l] = min * (1 - a_l) + max * a_l`, `a_l = (2l+1)/(2L)`.
fn scatter_center_grad<T: Scalar>(
    st: &SampleState<T>,
    dt: &[T],
    c: usize,
    n: usize,
    levels: usize,
    dx: &mut [T],
) {
    let two_l = T::from_usize(2 * levels).expect("level count");
    for (ch, e) in st.ext.iter().enumerate() {
        let mut dmin = T::zero();
        let mut dmax = T::zero();
        for l in 0..levels {
            let a = T::from_usize(2 * l + 1).expect("level index") / two_l;
            let d = dt[l * c + ch];
            dmin += d * (T::one() - a);
            dmax += d * a;
        }
        dx[ch * n + e.argmin] += dmin;
        dx[ch * n + e.argmax] += dmax;
    }
}
