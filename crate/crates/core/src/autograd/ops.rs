use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, BilinearPlan, ConvGeom, ConvSpec, DepthwiseGeom};
use crate::tensor::{MatRef, Scalar, Tensor};

/// Per-channel statistics of one training-mode normalization pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<T>,
}

fn shape_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims()))
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.mul(&bv)?;
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                Ok(vec![
                    if need[0] { Some(g.mul(&bv)?) } else { None },
                    if need[1] { Some(g.mul(&av)?) } else { None },
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| Ok(vec![Some(g.scale(s)?)])),
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let dims = self.value(a).dims().to_vec();
        let out = Tensor::scalar(self.value(a).sum())?;
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(dims.clone(), g.data()[0])?)])),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).clone();
        let out = x.map("relu", |v| v.max(T::zero()))?;
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| {
                Ok(vec![Some(g.zip_map(&x, "relu", |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })?)])
            }),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map("sigmoid", |v| T::one() / (T::one() + (-v).exp()))?;
        let y = out.clone();
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| {
                Ok(vec![Some(
                    g.zip_map(&y, "sigmoid", |g, y| g * y * (T::one() - y))?,
                )])
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let from = self.value(a).dims().to_vec();
        let out = self.value(a).reshape(dims)?;
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| Ok(vec![Some(g.reshape(from.clone())?)])),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = kernels::matmul(&av, &bv)?;
        let ([m, k], [_, n]) = (av.as_matrix("matmul")?, bv.as_matrix("matmul")?);
        Ok(self.record(
            out,
            vec![a, b],
            Box::new(move |g, need| {
                let da = if need[0] {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        MatRef::new(g.data()),
                        MatRef::t(bv.data()),
                        T::zero(),
                        &mut d,
                    );
                    Some(Tensor::from_op("matmul", vec![m, k], d)?)
                } else {
                    None
                };
                let db = if need[1] {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        MatRef::t(av.data()),
                        MatRef::new(g.data()),
                        T::zero(),
                        &mut d,
                    );
                    Some(Tensor::from_op("matmul", vec![k, n], d)?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }),
        ))
    }

    /// Adds a length-`F` bias to every row of a `B x F` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let [rows, cols] = xv.as_matrix("add_row_bias")?;
        if bv.dims() != [cols] {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let data = xv
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::from_op("add_row_bias", vec![rows, cols], data)?;
        Ok(self.record(
            out,
            vec![x, bias],
            Box::new(move |g, _| {
                let mut db = vec![T::zero(); cols];
                for row in g.data().chunks_exact(cols) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                Ok(vec![
                    Some(g.clone()),
                    Some(Tensor::from_op("add_row_bias", vec![cols], db)?),
                ])
            }),
        ))
    }

    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_row(self.value(a))?;
        let s = out.clone();
        Ok(self.record(
            out,
            vec![a],
            Box::new(move |g, _| {
                let [rows, cols] = s.as_matrix("softmax_row")?;
                let mut dz = vec![T::zero(); rows * cols];
                softmax_backward_rows(s.data(), g.data(), cols, &mut dz);
                Ok(vec![Some(Tensor::from_op(
                    "softmax_row",
                    vec![rows, cols],
                    dz,
                )?)])
            }),
        ))
    }

    /// Channel-wise concatenation of `B x Ci x H x W` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [b, _, h, w] = self.value(first).as_bchw("concat_channels")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).as_bchw("concat_channels")?;
            if (pb, ph, pw) != (b, h, w) || self.value(p).rank() != 4 {
                return Err(shape_err(
                    "concat_channels",
                    self.value(first),
                    self.value(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::from_op("concat_channels", vec![b, total, h, w], data)?;
        Ok(self.record(
            out,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (i, &c) in widths.iter().enumerate() {
                    if need[i] {
                        let mut d = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        grads.push(Some(Tensor::from_op(
                            "concat_channels",
                            vec![b, c, h, w],
                            d,
                        )?));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                Ok(grads)
            }),
        ))
    }

    /// `x[b][c][..] * w[b][c]` for `x: B x C x H x W`, `w: B x C`.
    pub fn scale_channels(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(weights).clone());
        let [b, c, h, w] = xv.as_bchw("scale_channels")?;
        if xv.rank() != 4 || wv.dims() != [b, c] {
            return Err(shape_err("scale_channels", &xv, &wv));
        }
        let plane = h * w;
        let data = xv
            .data()
            .chunks_exact(plane)
            .zip(wv.data())
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let out = Tensor::from_op("scale_channels", xv.dims().to_vec(), data)?;
        Ok(self.record(
            out,
            vec![x, weights],
            Box::new(move |g, need| {
                let dx = if need[0] {
                    let d = g
                        .data()
                        .chunks_exact(plane)
                        .zip(wv.data())
                        .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
                        .collect();
                    Some(Tensor::from_op("scale_channels", xv.dims().to_vec(), d)?)
                } else {
                    None
                };
                let dw = if need[1] {
                    let d = g
                        .data()
                        .chunks_exact(plane)
                        .zip(xv.data().chunks_exact(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Some(Tensor::from_op("scale_channels", vec![b, c], d)?)
                } else {
                    None
                };
                Ok(vec![dx, dw])
            }),
        ))
    }

    /// Global average pooling `B x C x H x W -> B x C`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.as_bchw("gap")?;
        if xv.rank() != 4 {
            return Err(Error::shape("gap", "graph gap expects a batched map"));
        }
        let out = kernels::gap(xv)?;
        let plane = h * w;
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |g, _| {
                let inv = T::one() / T::from_usize(plane).expect("pixel count");
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                    .collect();
                Ok(vec![Some(Tensor::from_op("gap", vec![b, c, h, w], d)?)])
            }),
        ))
    }

    /// Nearest (constant) broadcast `B x C -> B x C x H x W`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c] = xv.as_matrix("broadcast_spatial")?;
        let plane = h * w;
        let data = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, plane))
            .collect();
        let out = Tensor::from_op("broadcast_spatial", vec![b, c, h, w], data)?;
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .chunks_exact(plane)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                Ok(vec![Some(Tensor::from_op(
                    "broadcast_spatial",
                    vec![b, c],
                    d,
                )?)])
            }),
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(weight).clone());
        if xv.rank() != 4 {
            return Err(Error::shape("conv2d", "graph conv2d expects a batched map"));
        }
        let bv = bias.map(|b| self.value(b).clone());
        let out = kernels::conv2d(&xv, &wv, bv.as_ref(), spec)?;
        let geom = ConvGeom::new(&xv, &wv, spec)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            out,
            inputs,
            Box::new(move |g, need| {
                let (dx, dw, db) =
                    kernels::conv_backward(&geom, xv.data(), wv.data(), g.data(), need[0]);
                let mut grads = vec![
                    dx.map(|d| Tensor::from_op("conv2d", xv.dims().to_vec(), d))
                        .transpose()?,
                    Some(Tensor::from_op("conv2d", wv.dims().to_vec(), dw)?),
                ];
                if need.len() == 3 {
                    grads.push(Some(Tensor::from_op("conv2d", vec![geom.cout], db)?));
                }
                Ok(grads)
            }),
        ))
    }

    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x).clone(), self.value(kernel).clone());
        let out = kernels::conv2d_depthwise(&xv, &kv, dilation)?;
        let geom = DepthwiseGeom::new(&xv, &kv, dilation)?;
        Ok(self.record(
            out,
            vec![x, kernel],
            Box::new(move |g, _| {
                let (dx, dk) = kernels::depthwise_backward(&geom, xv.data(), kv.data(), g.data());
                Ok(vec![
                    Some(Tensor::from_op("conv2d_depthwise", xv.dims().to_vec(), dx)?),
                    Some(Tensor::from_op("conv2d_depthwise", kv.dims().to_vec(), dk)?),
                ])
            }),
        ))
    }

    /// Per-channel normalization of a `B x C x H x W` map. In training mode
    /// batch statistics are used and returned; in evaluation mode the given
    /// running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        mode: super::Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x).clone();
        let [b, c, h, w] = xv.as_bchw("batch_norm")?;
        if xv.rank() != 4 {
            return Err(Error::shape("batch_norm", "expects a batched map"));
        }
        let (gv, bv) = (self.value(gamma).clone(), self.value(beta).clone());
        for t in [&gv, &bv, running_mean, running_var] {
            if t.dims() != [c] {
                return Err(shape_err("batch_norm", &xv, t));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let nf = T::from_usize(count).expect("count");
        let (mean, var, stats) = match mode {
            super::Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let values = (0..b).flat_map(|bi| {
                        let start = (bi * c + ch) * plane;
                        xv.data()[start..start + plane].iter().copied()
                    });
                    *m = values.clone().sum::<T>() / nf;
                    *v = values.map(|x| (x - *m) * (x - *m)).sum::<T>() / nf;
                }
                let unbiased = if count > 1 {
                    let f = nf / (nf - T::one());
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            super::Mode::Eval => (
                running_mean.data().to_vec(),
                running_var.data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let start = (bi * c + ch) * plane;
                for i in start..start + plane {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    y[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let out = Tensor::from_op("batch_norm", xv.dims().to_vec(), y)?;
        let train = mode == super::Mode::Train;
        let v = self.record(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        for i in start..start + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let dx = if need[0] {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        let scale = gv.data()[ch] * inv_std[ch];
                        // dxhat sums reduce to dbeta/dgamma scaled by gamma
                        let (sum_d, sum_dx) = if train {
                            (dbeta[ch] / nf, dgamma[ch] / nf)
                        } else {
                            (T::zero(), T::zero())
                        };
                        for bi in 0..b {
                            let start = (bi * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = scale * (gd[i] - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    }
                    Some(Tensor::from_op("batch_norm", vec![b, c, h, w], dx)?)
                } else {
                    None
                };
                Ok(vec![
                    dx,
                    Some(Tensor::from_op("batch_norm", vec![c], dgamma)?),
                    Some(Tensor::from_op("batch_norm", vec![c], dbeta)?),
                ])
            }),
        );
        Ok((v, stats))
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.as_bchw("avg_pool2")?;
        if xv.rank() != 4 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("needs even B x C x H x W, got {:?}", xv.dims()),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in xv.data().chunks_exact(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let out = Tensor::from_op("avg_pool2", vec![b, c, oh, ow], out)?;
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); b * c * h * w];
                for (gp, dp) in g
                    .data()
                    .chunks_exact(oh * ow)
                    .zip(dx.chunks_exact_mut(h * w))
                {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = gp[y * ow + xx] * quarter;
                            let i = 2 * y * w + 2 * xx;
                            dp[i] = v;
                            dp[i + 1] = v;
                            dp[i + w] = v;
                            dp[i + w + 1] = v;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_op(
                    "avg_pool2",
                    vec![b, c, h, w],
                    dx,
                )?)])
            }),
        ))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.as_bchw("resize_bilinear")?;
        if xv.rank() != 4 {
            return Err(Error::shape(
                "resize_bilinear",
                "graph resize expects a batched map",
            ));
        }
        let out = kernels::resize_bilinear(xv, out_h, out_w)?;
        let plan = BilinearPlan::new(h, w, out_h, out_w);
        Ok(self.record(
            out,
            vec![x],
            Box::new(move |g, _| {
                let dx = plan.backward(g.data(), b * c);
                Ok(vec![Some(Tensor::from_op(
                    "resize_bilinear",
                    vec![b, c, h, w],
                    dx,
                )?)])
            }),
        ))
    }
}

/// `dz = s * (g - rowsum(g * s))` for each row of length `cols`.
pub(crate) fn softmax_backward_rows<T: Scalar>(s: &[T], g: &[T], cols: usize, dz: &mut [T]) {
    for ((srow, grow), drow) in s
        .chunks_exact(cols)
        .zip(g.chunks_exact(cols))
        .zip(dz.chunks_exact_mut(cols))
    {
        let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for ((d, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
            *d = sv * (gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;
    use crate::oracles::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(dims.to_vec(), 1.0, rng).unwrap()
    }

    /// Weighted sum with fixed random weights, so no op is checked through a
    /// gradient that happens to cancel.
    fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let dims = g.value(y).dims().to_vec();
        let w = g.constant(Tensor::randn(dims, 1.0, &mut rng(seed)).unwrap());
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        let report = grad_check(|g, vars| f(g, vars), &inputs, 1e-5).unwrap();
        assert!(
            report.max_rel_error < TOL,
            "max relative error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn two_layer_chain_matches_finite_differences() {
        let mut r = rng(1);
        let inputs = vec![
            randn(&[4, 5], &mut r),
            randn(&[5, 3], &mut r),
            randn(&[3], &mut r),
            randn(&[3, 2], &mut r),
        ];
        check(inputs, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row_bias(h, v[2])?;
            let h = g.sigmoid(h)?;
            let out = g.matmul(h, v[3])?;
            probe(g, out, 2)
        });
    }

    #[test]
    fn softmax_and_relu_gradients() {
        let mut r = rng(3);
        check(vec![randn(&[3, 5], &mut r)], |g, v| {
            let s = g.softmax_row(v[0])?;
            probe(g, s, 4)
        });
        check(vec![randn(&[3, 5], &mut r)], |g, v| {
            let s = g.relu(v[0])?;
            probe(g, s, 5)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng(6);
        for spec in [
            ConvSpec {
                stride: 1,
                padding: 1,
                dilation: 1,
            },
            ConvSpec {
                stride: 2,
                padding: 1,
                dilation: 1,
            },
            ConvSpec::default(),
        ] {
            let k = if spec == ConvSpec::default() { 1 } else { 3 };
            check(
                vec![
                    randn(&[2, 3, 6, 5], &mut r),
                    randn(&[4, 3, k, k], &mut r),
                    randn(&[4], &mut r),
                ],
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    probe(g, y, 7)
                },
            );
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut r = rng(8);
        for (kh, kw, d) in [(1, 4, 4), (6, 1, 6), (3, 3, 1), (1, 8, 8)] {
            check(
                vec![randn(&[2, 3, 9, 10], &mut r), randn(&[3, kh, kw], &mut r)],
                move |g, v| {
                    let y = g.conv2d_depthwise(v[0], v[1], d)?;
                    probe(g, y, 9)
                },
            );
        }
    }

    #[test]
    fn batch_norm_gradients_both_modes() {
        let mut r = rng(10);
        let rm = Tensor::<f64>::randn(vec![3], 0.5, &mut r).unwrap();
        let rv = Tensor::<f64>::uniform(vec![3], 0.5, 2.0, &mut r).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (rm, rv) = (rm.clone(), rv.clone());
            check(
                vec![
                    randn(&[2, 3, 4, 3], &mut r),
                    randn(&[3], &mut r),
                    randn(&[3], &mut r),
                ],
                move |g, v| {
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], &rm, &rv, 1e-5, mode)?;
                    probe(g, y, 11)
                },
            );
        }
    }

    #[test]
    fn pooling_resize_and_channel_ops_gradients() {
        let mut r = rng(12);
        check(vec![randn(&[2, 3, 4, 6], &mut r)], |g, v| {
            let y = g.avg_pool2(v[0])?;
            probe(g, y, 13)
        });
        check(vec![randn(&[2, 3, 4, 5], &mut r)], |g, v| {
            let y = g.resize_bilinear(v[0], 16, 20)?;
            probe(g, y, 14)
        });
        check(
            vec![randn(&[2, 3, 4, 5], &mut r), randn(&[2, 3], &mut r)],
            |g, v| {
                let y = g.scale_channels(v[0], v[1])?;
                probe(g, y, 15)
            },
        );
        check(
            vec![randn(&[2, 3, 4, 5], &mut r), randn(&[2, 2, 4, 5], &mut r)],
            |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                let p = g.gap(y)?;
                let b = g.broadcast_spatial(p, 2, 3)?;
                let y2 = g.reshape(b, vec![2, 30])?;
                probe(g, y2, 16)
            },
        );
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 2, 2], 3.0).unwrap());
        let gamma = g.constant(Tensor::full(vec![1], 2.0).unwrap());
        let beta = g.constant(Tensor::full(vec![1], 0.5).unwrap());
        let rm = Tensor::full(vec![1], 1.0).unwrap();
        let rv = Tensor::full(vec![1], 4.0).unwrap();
        let (y, stats) = g
            .batch_norm(x, gamma, beta, &rm, &rv, 0.0, Mode::Eval)
            .unwrap();
        assert!(stats.is_none());
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
