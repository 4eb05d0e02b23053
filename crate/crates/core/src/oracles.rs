//! Reference implementations used to validate the optimized kernels.
//!
//! Everything here is written with plain scalar loops and shares nothing
//! with the production kernels except the [`Tensor`] container.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tam::{ProjectionParams, ThresholdSpec};
use crate::tensor::{Scalar, Tensor};

pub const NAIVE_MAX_CHANNELS: usize = 16;
pub const NAIVE_MAX_PIXELS: usize = 1024;
pub const NAIVE_MAX_LEVELS: usize = 32;
/// Largest pixel count for which [`dense_sa`] materializes the `N x N`
/// attention matrix.
pub const DENSE_SA_MAX_PIXELS: usize = 1 << 13;

fn bchw(f: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize)> {
    let d = f.dims();
    match d.len() {
        3 => Ok((1, d[0], d[1] * d[2])),
        4 => Ok((d[0], d[1], d[2] * d[3])),
        _ => Err(Error::shape(
            op,
            format!("expected C x H x W or B x C x H x W, got {d:?}"),
        )),
    }
}

fn square(w: &Tensor<impl Scalar>, c: usize, op: &'static str) -> Result<()> {
    if w.dims() != [c, c] {
        return Err(Error::shape(
            op,
            format!("projection must be {c} x {c}, got {:?}", w.dims()),
        ));
    }
    Ok(())
}

fn row_softmax(row: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// `out[i][j] = sum_k a[i][k] * w[k][j]` with `a: rows x c`, `w: c x c`.
fn project(a: &[f64], w: &[f64], rows: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c];
    for i in 0..rows {
        for j in 0..c {
            let mut acc = 0.0;
            for k in 0..c {
                acc += a[i * c + k] * w[k * c + j];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// Threshold attention computed literally: bin centers, projections,
/// softmax attention, then `A'_c P'_c` with an explicit one-hot `P'`.
/// Inputs are capped at 16 channels, 1024 pixels and 32 levels.
pub fn tam_naive<T: Scalar>(
    f: &Tensor<T>,
    spec: ThresholdSpec,
    p: &ProjectionParams<T>,
) -> Result<Tensor<T>> {
    let (b, c, n) = bchw(f, "tam_naive")?;
    let l = spec.levels();
    if c > NAIVE_MAX_CHANNELS || n > NAIVE_MAX_PIXELS || l > NAIVE_MAX_LEVELS {
        return Err(Error::CapExceeded {
            op: "tam_naive",
            detail: format!(
                "C={c}, N={n}, L={l} exceeds C<={NAIVE_MAX_CHANNELS}, N<={NAIVE_MAX_PIXELS}, L<={NAIVE_MAX_LEVELS}"
            ),
        });
    }
    for w in [&p.wq.value, &p.wk.value, &p.wv.value] {
        square(w, c, "tam_naive")?;
    }
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let (wq, wk, wv) = (to64(&p.wq.value), to64(&p.wk.value), to64(&p.wv.value));
    let x = to64(f);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "tam_naive" });
    }
    let mut out = vec![0.0f64; x.len()];
    for s in 0..b {
        let fs = &x[s * c * n..(s + 1) * c * n];
        let mut lo = vec![0.0; c];
        let mut hi = vec![0.0; c];
        for ch in 0..c {
            lo[ch] = fs[ch * n];
            hi[ch] = fs[ch * n];
            for i in 1..n {
                let v = fs[ch * n + i];
                if v < lo[ch] {
                    lo[ch] = v;
                }
                if v > hi[ch] {
                    hi[ch] = v;
                }
            }
        }
        // T: L x C
        let mut t = vec![0.0; l * c];
        for li in 0..l {
            for ch in 0..c {
                t[li * c + ch] =
                    (hi[ch] - lo[ch]) / (2.0 * l as f64) * (2 * li + 1) as f64 + lo[ch];
            }
        }
        let q = project(&t, &wq, l, c);
        let k = project(&t, &wk, l, c);
        let v = project(&t, &wv, l, c);
        let mut sm = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += q[i * c + ch] * k[j * c + ch];
                }
                sm[i * l + j] = acc;
            }
            row_softmax(&mut sm[i * l..(i + 1) * l]);
        }
        let mut a = vec![0.0; l * c];
        for i in 0..l {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += sm[i * l + j] * v[j * c + ch];
                }
                a[i * c + ch] = acc;
            }
        }
        // A': C x L
        let mut at = vec![0.0; c * l];
        for i in 0..l {
            for ch in 0..c {
                at[ch * l + i] = a[i * c + ch];
            }
        }
        for ch in 0..c {
            let mut onehot = vec![0.0; l * n];
            for i in 0..n {
                let level = if hi[ch] > lo[ch] {
                    let r = ((fs[ch * n + i] - lo[ch]) / (hi[ch] - lo[ch]) * l as f64).floor();
                    (r.max(0.0) as usize).min(l - 1)
                } else {
                    0
                };
                onehot[level * n + i] = 1.0;
            }
            for i in 0..n {
                let mut acc = 0.0;
                for li in 0..l {
                    acc += at[ch * l + li] * onehot[li * n + i];
                }
                out[s * c * n + ch * n + i] = acc;
            }
        }
    }
    Tensor::new(
        f.dims().to_vec(),
        out.into_iter().map(T::from_f64_lossy).collect(),
    )
}

/// Dense dot-product self-attention over pixels: `X` is `N x C`,
/// `out = softmax_row((X W_q)(X W_k)^T) (X W_v)`, reshaped back to the
/// input layout. No scaling, no residual.
pub fn dense_sa<T: Scalar>(f: &Tensor<T>, p: &ProjectionParams<T>) -> Result<Tensor<T>> {
    dense_sa_capped(f, p, DENSE_SA_MAX_PIXELS)
}

pub fn dense_sa_capped<T: Scalar>(
    f: &Tensor<T>,
    p: &ProjectionParams<T>,
    max_pixels: usize,
) -> Result<Tensor<T>> {
    let (b, c, n) = bchw(f, "dense_sa")?;
    if n > max_pixels {
        return Err(Error::CapExceeded {
            op: "dense_sa",
            detail: format!("N={n} would allocate an {n} x {n} matrix; cap is N<={max_pixels}"),
        });
    }
    for w in [&p.wq.value, &p.wk.value, &p.wv.value] {
        square(w, c, "dense_sa")?;
    }
    let (wq, wk, wv) = (p.wq.value.data(), p.wk.value.data(), p.wv.value.data());
    let mut out = vec![T::zero(); f.len()];
    let mut xt = vec![T::zero(); n * c];
    let mut q = vec![T::zero(); n * c];
    let mut k = vec![T::zero(); n * c];
    let mut v = vec![T::zero(); n * c];
    let mut s = vec![T::zero(); n * n];
    let mut y = vec![T::zero(); n * c];
    for bi in 0..b {
        let fs = &f.data()[bi * c * n..(bi + 1) * c * n];
        for ch in 0..c {
            for i in 0..n {
                xt[i * c + ch] = fs[ch * n + i];
            }
        }
        for (dst, w) in [(&mut q, wq), (&mut k, wk), (&mut v, wv)] {
            dst.iter_mut().for_each(|d| *d = T::zero());
            for i in 0..n {
                for kk in 0..c {
                    let a = xt[i * c + kk];
                    for j in 0..c {
                        dst[i * c + j] += a * w[kk * c + j];
                    }
                }
            }
        }
        for i in 0..n {
            let qi = &q[i * c..(i + 1) * c];
            let row = &mut s[i * n..(i + 1) * n];
            for (j, e) in row.iter_mut().enumerate() {
                let kj = &k[j * c..(j + 1) * c];
                let mut acc = T::zero();
                for ch in 0..c {
                    acc += qi[ch] * kj[ch];
                }
                *e = acc;
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|e| *e *= inv);
        }
        y.iter_mut().for_each(|d| *d = T::zero());
        for i in 0..n {
            let yi = &mut y[i * c..(i + 1) * c];
            for j in 0..n {
                let sij = s[i * n + j];
                let vj = &v[j * c..(j + 1) * c];
                for ch in 0..c {
                    yi[ch] += sij * vj[ch];
                }
            }
        }
        let os = &mut out[bi * c * n..(bi + 1) * c * n];
        for ch in 0..c {
            for i in 0..n {
                os[ch * n + i] = y[i * c + ch];
            }
        }
    }
    Tensor::from_op("dense_sa", f.dims().to_vec(), out)
}

/// Flop count of dense self-attention under the same conventions as the
/// threshold attention count: `6NC^2 + 4N^2C + 5N^2`.
pub fn sa_flops(c: u64, n: u64) -> u64 {
    sa_flop_report(c, n).total
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopStage {
    pub stage: String,
    pub flops: u64,
}

/// Per-stage flop count of one attention pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mechanism: String,
    pub c: u64,
    pub n: u64,
    pub l: Option<u64>,
    pub total: u64,
    pub breakdown: Vec<FlopStage>,
}

impl FlopReport {
    fn from_stages(
        mechanism: &str,
        c: u64,
        n: u64,
        l: Option<u64>,
        stages: &[(&str, u64)],
    ) -> Self {
        Self {
            mechanism: mechanism.to_string(),
            c,
            n,
            l,
            total: stages.iter().map(|s| s.1).sum(),
            breakdown: stages
                .iter()
                .map(|&(stage, flops)| FlopStage {
                    stage: stage.to_string(),
                    flops,
                })
                .collect(),
        }
    }
}

pub fn tam_flop_report(c: u64, n: u64, l: u64) -> FlopReport {
    FlopReport::from_stages(
        "tam",
        c,
        n,
        Some(l),
        &[
            ("projections", 6 * l * c * c),
            ("attention", 4 * l * l * c),
            ("softmax", 5 * l * l),
            ("pixel_ops", 4 * c * n),
        ],
    )
}

pub fn sa_flop_report(c: u64, n: u64) -> FlopReport {
    FlopReport::from_stages(
        "dense_sa",
        c,
        n,
        None,
        &[
            ("projections", 6 * n * c * c),
            ("attention", 4 * n * n * c),
            ("softmax", 5 * n * n),
        ],
    )
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// Where the relative error peaks, as `(input or parameter name, flat index)`.
    pub worst: Option<(String, usize)>,
}

struct Tracker {
    report: GradCheckReport,
}

impl Tracker {
    fn new() -> Self {
        Self {
            report: GradCheckReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                coordinates: 0,
                worst: None,
            },
        }
    }

    fn push(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
        let r = &mut self.report;
        r.coordinates += 1;
        r.max_abs_error = r.max_abs_error.max(abs);
        if rel > r.max_rel_error || r.worst.is_none() {
            r.max_rel_error = r.max_rel_error.max(rel);
            r.worst = Some((name.to_string(), index));
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.dims().to_vec()));
    }
    Ok(t.data()[0])
}

/// Central-difference check of `objective` with respect to every
/// coordinate of every input.
pub fn grad_check<F>(objective: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = objective(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = objective(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut tracker = Tracker::new();
    let mut values = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|t| t.data().to_vec());
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[i];
            values[ti].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[ti].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[ti].data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            tracker.push(&format!("input{ti}"), i, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(tracker.report)
}

/// Central-difference check of `objective` with respect to the trainable
/// parameters of `module`. At most `max_per_param` evenly spaced
/// coordinates are checked in each parameter tensor.
pub fn grad_check_module<M, F>(
    module: &mut M,
    objective: F,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: Fn(&mut M, &mut Graph<f64>) -> Result<Var>,
{
    let eval = |m: &mut M| -> Result<f64> {
        let mut g = Graph::new();
        let out = objective(m, &mut g)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let out = objective(module, &mut g)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    // (name, analytic gradient, coordinates to check)
    let mut plan: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    module.visit_params("", &mut |name, p: &mut Parameter<f64>| {
        if !p.trainable {
            return;
        }
        let len = p.value.len();
        let analytic = grads
            .of_param(p)
            .map_or_else(|| vec![0.0; len], |t| t.data().to_vec());
        let stride = len.div_ceil(max_per_param.max(1));
        plan.push((
            name.to_string(),
            analytic,
            (0..len).step_by(stride.max(1)).collect(),
        ));
    });
    drop(g);
    let mut tracker = Tracker::new();
    for (pi, (name, analytic, coords)) in plan.iter().enumerate() {
        for &i in coords {
            let nudge = |m: &mut M, delta: f64| {
                let mut k = 0;
                m.visit_params("", &mut |_, p| {
                    if p.trainable {
                        if k == pi {
                            p.value.data_mut()[i] += delta;
                        }
                        k += 1;
                    }
                });
            };
            nudge(module, step);
            let plus = eval(module)?;
            nudge(module, -2.0 * step);
            let minus = eval(module)?;
            nudge(module, step);
            tracker.push(name, i, analytic[i], (plus - minus) / (2.0 * step));
        }
    }
    Ok(tracker.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tam::{tam_flops, tam_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut r = rng(1);
        let x = Tensor::<f64>::randn(vec![4], 1.0, &mut r).unwrap();
        let w = Tensor::<f64>::randn(vec![4], 1.0, &mut r).unwrap();
        let report = grad_check(
            |g, v| {
                let w = g.constant(w.clone());
                let y = g.mul(v[0], w)?;
                g.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn grad_check_quadratic_form() {
        let mut r = rng(2);
        let a = Tensor::<f64>::randn(vec![3, 3], 1.0, &mut r).unwrap();
        let x = Tensor::<f64>::randn(vec![3, 1], 1.0, &mut r).unwrap();
        let report = grad_check(
            |g, v| {
                let xr = g.reshape(v[1], vec![1, 3])?;
                let ax = g.matmul(v[0], v[1])?;
                let q = g.matmul(xr, ax)?;
                g.sum(q)
            },
            &[a, x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros(vec![2]).unwrap();
        let err = grad_check(|_, v| Ok(v[0]), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn naive_caps_are_enforced() {
        let mut r = rng(3);
        let p = ProjectionParams::<f64>::random(2, &mut r).unwrap();
        let f = Tensor::<f64>::zeros(vec![2, 33, 32]).unwrap();
        let spec = ThresholdSpec::new(4).unwrap();
        assert!(matches!(
            tam_naive(&f, spec, &p),
            Err(Error::CapExceeded { .. })
        ));
        let f = Tensor::<f64>::zeros(vec![2, 4, 4]).unwrap();
        let spec = ThresholdSpec::new(33).unwrap();
        assert!(matches!(
            tam_naive(&f, spec, &p),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn naive_agrees_with_tam_forward() {
        let mut r = rng(4);
        for case in 0..40 {
            let c = 1 + case % 5;
            let l = 1 + case % 8;
            let f = Tensor::<f64>::randn(vec![c, 1 + case % 7, 1 + case % 9], 1.0, &mut r).unwrap();
            let p = ProjectionParams::random(c, &mut r).unwrap();
            let spec = ThresholdSpec::new(l).unwrap();
            let a = tam_forward(&f, spec, &p).unwrap();
            let b = tam_naive(&f, spec, &p).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10, "case {case}");
        }
    }

    #[test]
    fn naive_single_level_is_constant_per_channel() {
        let mut r = rng(5);
        let f = Tensor::<f64>::randn(vec![3, 5, 5], 1.0, &mut r).unwrap();
        let p = ProjectionParams::random(3, &mut r).unwrap();
        let out = tam_naive(&f, ThresholdSpec::new(1).unwrap(), &p).unwrap();
        for ch in out.data().chunks(25) {
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
    }

    fn sa_scalar(x: &[f64], c: usize, n: usize, p: &ProjectionParams<f64>) -> Vec<f64> {
        let w = |m: &Tensor<f64>, i: usize, j: usize| m.data()[i * c + j];
        let proj = |m: &Tensor<f64>, pix: usize, j: usize| {
            (0..c).map(|k| x[k * n + pix] * w(m, k, j)).sum::<f64>()
        };
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    (0..c)
                        .map(|ch| proj(&p.wq.value, i, ch) * proj(&p.wk.value, j, ch))
                        .sum()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for ch in 0..c {
                out[ch * n + i] = (0..n)
                    .map(|j| (logits[j] - m).exp() / z * proj(&p.wv.value, j, ch))
                    .sum();
            }
        }
        out
    }

    #[test]
    fn dense_sa_matches_scalar_loops() {
        let mut r = rng(6);
        let f = Tensor::<f64>::randn(vec![3, 4, 4], 1.0, &mut r).unwrap();
        let p = ProjectionParams::random(3, &mut r).unwrap();
        let out = dense_sa(&f, &p).unwrap();
        let want = sa_scalar(f.data(), 3, 16, &p);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dense_sa_single_pixel_is_value_projection() {
        let mut r = rng(7);
        let f = Tensor::<f64>::randn(vec![3, 1, 1], 1.0, &mut r).unwrap();
        let p = ProjectionParams::random(3, &mut r).unwrap();
        let out = dense_sa(&f, &p).unwrap();
        for j in 0..3 {
            let want: f64 = (0..3)
                .map(|k| f.data()[k] * p.wv.value.data()[k * 3 + j])
                .sum();
            assert!((out.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_sa_identical_pixels_agree() {
        let f = Tensor::<f64>::new(vec![2, 1, 2], vec![0.3, 0.3, -1.0, -1.0]).unwrap();
        let p = ProjectionParams::random(2, &mut rng(8)).unwrap();
        let out = dense_sa(&f, &p).unwrap();
        assert_eq!(out.data()[0], out.data()[1]);
        assert_eq!(out.data()[2], out.data()[3]);
    }

    #[test]
    fn dense_sa_cap_rejects() {
        let f = Tensor::<f32>::zeros(vec![1, 8, 8]).unwrap();
        let p = ProjectionParams::<f32>::random(1, &mut rng(9)).unwrap();
        assert!(matches!(
            dense_sa_capped(&f, &p, 63),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn flop_formulas() {
        assert_eq!(sa_flops(64, 4096), 4_479_516_672);
        let r = sa_flop_report(64, 4096);
        assert_eq!(r.breakdown[0].flops + r.breakdown[1].flops, 4_395_630_592);
        let t = tam_flop_report(64, 4096, 64);
        assert_eq!(t.total, 3_690_496);
        assert_eq!(t.total, tam_flops(64, 4096, 64));
        assert_eq!(t.total, t.breakdown.iter().map(|s| s.flops).sum::<u64>());
        let json = serde_json::to_value(&t).unwrap();
        for key in ["mechanism", "c", "n", "l", "total", "breakdown"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(serde_json::to_value(&r).unwrap()["l"].is_null());
    }

    #[test]
    fn doubling_pixels_quadruples_quadratic_terms() {
        let a = sa_flop_report(32, 1000);
        let b = sa_flop_report(32, 2000);
        assert_eq!(b.breakdown[1].flops, 4 * a.breakdown[1].flops);
        assert_eq!(b.breakdown[2].flops, 4 * a.breakdown[2].flops);
        let (t1, t2) = (tam_flop_report(32, 1000, 16), tam_flop_report(32, 2000, 16));
        assert_eq!(t2.total - t1.total, 4 * 32 * 1000);
    }

    #[test]
    fn tam_is_cheaper_whenever_pixels_exceed_levels() {
        for c in [1u64, 4, 16, 64, 256] {
            for l in [1u64, 8, 64, 200] {
                for n in [l + 1, 2 * l, 10 * l, 4096, 1 << 16] {
                    if n > l {
                        assert!(tam_flops(c, n, l) < sa_flops(c, n), "c={c} n={n} l={l}");
                    }
                }
            }
        }
        let ratio = |n| sa_flops(64, n) as f64 / tam_flops(64, n, 64) as f64;
        assert!(ratio(1 << 14) > ratio(1 << 12));
    }
}
