//! Cosine-similarity prefilter and squeeze-excitation style channel
//! attention.

use rand::Rng;

use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::tensor::kernels::gap;
use crate::tensor::{Scalar, Tensor};

const NORM_FLOOR: f64 = 1e-12;

/// Per-pixel cosine similarity of one `C x N` sample with its channel mean
/// `g`; zero where either norm is below `1e-12`.
fn similarity<T: Scalar>(x: &[T], g: &[T], c: usize, n: usize) -> (Vec<T>, Vec<T>, T) {
    let floor = T::from_f64_lossy(NORM_FLOOR);
    let gnorm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut dot = vec![T::zero(); n];
    let mut sq = vec![T::zero(); n];
    for ch in 0..c {
        let row = &x[ch * n..(ch + 1) * n];
        let gc = g[ch];
        for i in 0..n {
            dot[i] += row[i] * gc;
            sq[i] += row[i] * row[i];
        }
    }
    let norms: Vec<T> = sq.into_iter().map(T::sqrt).collect();
    let s = dot
        .iter()
        .zip(&norms)
        .map(|(&d, &fn_)| {
            if fn_ < floor || gnorm < floor {
                T::zero()
            } else {
                d / (fn_ * gnorm)
            }
        })
        .collect();
    (s, norms, gnorm)
}

fn scale_pixels<T: Scalar>(x: &[T], s: &[T], c: usize, n: usize, out: &mut [T]) {
    for ch in 0..c {
        for i in 0..n {
            out[ch * n + i] = x[ch * n + i] * s[i];
        }
    }
}

/// Reweights every pixel by its cosine similarity with the global average
/// feature: `out[c][n] = f[c][n] * cos(f_n, gap(f))`. Accepts `C x H x W`
/// or `B x C x H x W`; batched samples are independent.
pub fn cos_prefilter<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = f.as_bchw("cos_prefilter")?;
    let n = h * w;
    let g = gap(f)?;
    let mut out = vec![T::zero(); f.len()];
    for bi in 0..b {
        let x = &f.data()[bi * c * n..(bi + 1) * c * n];
        let (s, _, _) = similarity(x, &g.data()[bi * c..(bi + 1) * c], c, n);
        scale_pixels(x, &s, c, n, &mut out[bi * c * n..(bi + 1) * c * n]);
    }
    Tensor::from_op("cos_prefilter", f.dims().to_vec(), out)
}

impl<T: Scalar> Graph<T> {
    /// Differentiable [`cos_prefilter`] over a `B x C x H x W` map.
    pub fn cos_prefilter(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 4 {
            return Err(Error::shape(
                "cos_prefilter",
                "graph op expects a batched map",
            ));
        }
        let out = cos_prefilter(&xv)?;
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |dy, _| cos_backward(&xv, dy).map(|d| vec![Some(d)])),
        ))
    }
}

fn cos_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.as_bchw("cos_prefilter")?;
    let n = h * w;
    let g = gap(x)?;
    let inv_n = T::one() / T::from_usize(n).expect("pixel count");
    let mut dx = vec![T::zero(); x.len()];
    for bi in 0..b {
        let span = bi * c * n..(bi + 1) * c * n;
        let (xs, dys, dxs) = (
            &x.data()[span.clone()],
            &dy.data()[span.clone()],
            &mut dx[span],
        );
        let gs = &g.data()[bi * c..(bi + 1) * c];
        let (s, norms, gnorm) = similarity(xs, gs, c, n);
        // u_n = <dy_n, x_n> is the gradient reaching s_n.
        let mut u = vec![T::zero(); n];
        for ch in 0..c {
            for i in 0..n {
                u[i] += dys[ch * n + i] * xs[ch * n + i];
            }
        }
        let floor = T::from_f64_lossy(NORM_FLOOR);
        let active: Vec<bool> = norms
            .iter()
            .map(|&v| v >= floor && gnorm >= floor)
            .collect();
        let mut dg = vec![T::zero(); c];
        for ch in 0..c {
            for i in 0..n {
                let xi = xs[ch * n + i];
                let mut d = dys[ch * n + i] * s[i];
                if active[i] {
                    let (fnorm, sv) = (norms[i], s[i]);
                    d += u[i] * (gs[ch] / (fnorm * gnorm) - sv * xi / (fnorm * fnorm));
                    dg[ch] += u[i] * (xi / (fnorm * gnorm) - sv * gs[ch] / (gnorm * gnorm));
                }
                dxs[ch * n + i] = d;
            }
        }
        for ch in 0..c {
            let spread = dg[ch] * inv_n;
            dxs[ch * n..(ch + 1) * n]
                .iter_mut()
                .for_each(|d| *d += spread);
        }
    }
    Tensor::from_op("cos_prefilter", x.dims().to_vec(), dx)
}

/// `w = sigmoid(relu(gap(f) W1) W2)` with `W1: C x C/r`, `W2: C/r x C`,
/// no biases.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Scalar> {
    pub w1: Parameter<T>,
    pub w2: Parameter<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "channel count {channels} is not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: Parameter::new(Tensor::randn(
                vec![channels, hidden],
                (2.0 / channels as f64).sqrt(),
                rng,
            )?),
            w2: Parameter::new(Tensor::randn(
                vec![hidden, channels],
                (1.0 / hidden as f64).sqrt(),
                rng,
            )?),
        })
    }

    pub fn from_tensors(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        match (w1.dims(), w2.dims()) {
            (&[c, r], &[r2, c2]) if r == r2 && c == c2 => Ok(Self {
                w1: Parameter::new(w1),
                w2: Parameter::new(w2),
            }),
            (a, b) => Err(Error::shape(
                "channel_attention",
                format!("weights {a:?} and {b:?} must be C x C/r and C/r x C"),
            )),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.value.dims()[0]
    }

    /// Channel weights `B x C` for a `B x C x H x W` map.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.value(x).as_bchw("channel_attention")?[1];
        if c != self.channels() {
            return Err(Error::shape(
                "channel_attention",
                format!("input has {c} channels, weights expect {}", self.channels()),
            ));
        }
        let pooled = g.gap(x)?;
        let w1 = g.param(&self.w1);
        let w2 = g.param(&self.w2);
        let h = g.matmul(pooled, w1)?;
        let h = g.relu(h)?;
        let z = g.matmul(h, w2)?;
        g.sigmoid(z)
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "w2"), &mut self.w2);
    }
}

/// Channel weights of a single `C x H x W` map (or `B x C` for a batch).
pub fn channel_attention<T: Scalar>(f: &Tensor<T>, ca: &ChannelAttention<T>) -> Result<Tensor<T>> {
    super::batched(f, "channel_attention", |g, x| ca.forward(g, x))
}
