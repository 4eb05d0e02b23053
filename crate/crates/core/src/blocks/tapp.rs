//! Threshold attention pyramid pooling: separable dilated branches, a
//! global pooling branch and a TAM branch, fused by a pointwise block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batched;
use crate::autograd::{Graph, Mode, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Cbr, Module};
use crate::tam::{ProjectionParams, ThresholdSpec, DEFAULT_TAPP_LEVELS};
use crate::tensor::{Scalar, Tensor};

/// Kernel size (and dilation) of the three separable branches.
pub const BRANCH_KERNELS: [usize; 3] = [4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TappConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
}

impl TappConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            mid_channels: 64,
            out_channels: 64,
            levels: DEFAULT_TAPP_LEVELS,
        }
    }

    /// Channel count entering the fusion block.
    pub fn fusion_channels(&self) -> usize {
        5 * self.mid_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "TAPP channel counts must be positive: {self:?}"
            )));
        }
        ThresholdSpec::new(self.levels).map(|_| ())
    }
}

/// Depthwise `1 x K` then `K x 1` convolutions, both dilated by `K`,
/// followed by a pointwise block to `C_mid`.
#[derive(Debug, Clone)]
pub struct SepDilatedBranch<T: Scalar> {
    pub kernel: usize,
    /// `C x 1 x K`
    pub horizontal: Parameter<T>,
    /// `C x K x 1`
    pub vertical: Parameter<T>,
    pub pointwise: Cbr<T>,
}

impl<T: Scalar> SepDilatedBranch<T> {
    pub fn new(
        cin: usize,
        cmid: usize,
        kernel: usize,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !BRANCH_KERNELS.contains(&kernel) {
            return Err(Error::InvalidArgument(format!(
                "separable branch kernel must be one of {BRANCH_KERNELS:?}, got {kernel}"
            )));
        }
        let std = (1.0 / kernel as f64).sqrt();
        Ok(Self {
            kernel,
            horizontal: Parameter::new(Tensor::randn(vec![cin, 1, kernel], std, rng)?),
            vertical: Parameter::new(Tensor::randn(vec![cin, kernel, 1], std, rng)?),
            pointwise: Cbr::new(cin, cmid, 1, Default::default(), norm, rng)?,
        })
    }

    /// The two depthwise convolutions only.
    pub fn spatial(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = g.param(&self.horizontal);
        let v = g.param(&self.vertical);
        let y = g.conv2d_depthwise(x, h, self.kernel)?;
        g.conv2d_depthwise(y, v, self.kernel)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.spatial(g, x)?;
        self.pointwise.forward(g, y, mode)
    }
}

impl<T: Scalar> Module<T> for SepDilatedBranch<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "horizontal"), &mut self.horizontal);
        f(&join(prefix, "vertical"), &mut self.vertical);
        self.pointwise.visit_params(&join(prefix, "pointwise"), f);
    }
}

/// Applies one separable branch to a `C x H x W` or `B x C x H x W` map.
pub fn sep_dilated_branch<T: Scalar>(
    f: &Tensor<T>,
    branch: &mut SepDilatedBranch<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    batched(f, "sep_dilated_branch", |g, x| branch.forward(g, x, mode))
}

#[derive(Debug, Clone)]
pub struct Tapp<T: Scalar> {
    pub cfg: TappConfig,
    pub branches: Vec<SepDilatedBranch<T>>,
    pub pool: Cbr<T>,
    pub tam: ProjectionParams<T>,
    pub tam_reduce: Cbr<T>,
    pub fuse: Cbr<T>,
}

impl<T: Scalar> Tapp<T> {
    pub fn new(cfg: TappConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (cin, cmid) = (cfg.in_channels, cfg.mid_channels);
        let branches = BRANCH_KERNELS
            .iter()
            .map(|&k| SepDilatedBranch::new(cin, cmid, k, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            branches,
            pool: Cbr::pointwise(cin, cmid, rng)?,
            tam: ProjectionParams::random(cin, rng)?,
            tam_reduce: Cbr::pointwise(cin, cmid, rng)?,
            fuse: Cbr::pointwise(cfg.fusion_channels(), cfg.out_channels, rng)?,
        })
    }

    /// The five branch outputs before fusion, in concat order.
    pub fn branch_outputs(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Vec<Var>> {
        let [b, c, h, w] = g.value(x).as_bchw("tapp")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "tapp",
                format!(
                    "input has {c} channels, block expects {}",
                    self.cfg.in_channels
                ),
            ));
        }
        let mut parts = Vec::with_capacity(5);
        for branch in &mut self.branches {
            parts.push(branch.forward(g, x, mode)?);
        }
        let pooled = g.gap(x)?;
        let pooled = g.reshape(pooled, vec![b, c, 1, 1])?;
        let pooled = self.pool.forward(g, pooled, mode)?;
        let pooled = g.reshape(pooled, vec![b, self.cfg.mid_channels])?;
        parts.push(g.broadcast_spatial(pooled, h, w)?);
        let filtered = g.cos_prefilter(x)?;
        let t = g.tam(filtered, ThresholdSpec::new(self.cfg.levels)?, &self.tam)?;
        parts.push(self.tam_reduce.forward(g, t, mode)?);
        Ok(parts)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let parts = self.branch_outputs(g, x, mode)?;
        let cat = g.concat_channels(&parts)?;
        self.fuse.forward(g, cat, mode)
    }
}

impl<T: Scalar> Module<T> for Tapp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
        self.pool.visit_params(&join(prefix, "pool"), f);
        for (name, p) in self.tam.params_mut() {
            f(&join(&join(prefix, "tam"), name), p);
        }
        self.tam_reduce.visit_params(&join(prefix, "tam_reduce"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
    }
}

/// Applies the block to a `C x H x W` or `B x C x H x W` map.
pub fn tapp_forward<T: Scalar>(
    f: &Tensor<T>,
    block: &mut Tapp<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    batched(f, "tapp", |g, x| block.forward(g, x, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::cos::cos_prefilter;
    use crate::nn::BatchNorm2d;
    use crate::oracles::grad_check_module;
    use crate::tam::tam_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct dilated 2-D correlation with the rank-1 kernel
    /// `v[i] * h[j]`, zero padding, taps at `(i - K/2) * K`.
    fn rank1_conv(
        x: &[f64],
        c: usize,
        hgt: usize,
        wid: usize,
        hk: &[f64],
        vk: &[f64],
        k: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; c * hgt * wid];
        let off = |t: usize| (t as isize - (k / 2) as isize) * k as isize;
        for ch in 0..c {
            for y in 0..hgt {
                for xx in 0..wid {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let (sy, sx) = (y as isize + off(i), xx as isize + off(j));
                            if sy < 0 || sx < 0 || sy >= hgt as isize || sx >= wid as isize {
                                continue;
                            }
                            acc += vk[ch * k + i]
                                * hk[ch * k + j]
                                * x[(ch * hgt + sy as usize) * wid + sx as usize];
                        }
                    }
                    out[(ch * hgt + y) * wid + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn separable_pair_equals_rank1_conv() {
        let mut r = rng(1);
        for case in 0..120 {
            let k = BRANCH_KERNELS[case % 3];
            let (c, h, w) = (1 + case % 3, 3 + case % 17, 2 + (case * 7) % 19);
            let branch = SepDilatedBranch::<f64>::new(c, 2, k, true, &mut r).unwrap();
            let x = Tensor::randn(vec![1, c, h, w], 1.0, &mut r).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = branch.spatial(&mut g, xv).unwrap();
            let want = rank1_conv(
                x.data(),
                c,
                h,
                w,
                branch.horizontal.value.data(),
                branch.vertical.value.data(),
                k,
            );
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "case {case}");
            }
        }
    }

    #[test]
    fn receptive_field_is_k_squared_minus_k_plus_one() {
        for k in BRANCH_KERNELS {
            let n = 2 * k * k;
            let mut x = vec![0.0; n * n];
            x[(n / 2) * n + n / 2] = 1.0;
            let ones = vec![1.0; k];
            let out = rank1_conv(&x, 1, n, n, &ones, &ones, k);
            let cols: Vec<usize> = (0..n).filter(|&j| out[(n / 2) * n + j] != 0.0).collect();
            assert_eq!(cols.last().unwrap() - cols[0] + 1, (k - 1) * k + 1);
        }
    }

    #[test]
    fn delta_kernels_without_norm_pass_input_through() {
        let mut r = rng(2);
        let (c, k) = (3, 6);
        let mut branch = SepDilatedBranch::<f64>::new(c, c, k, false, &mut r).unwrap();
        let delta = |dims: Vec<usize>| {
            Tensor::from_fn(dims, |i| if i % k == k / 2 { 1.0 } else { 0.0 }).unwrap()
        };
        branch.horizontal.value = delta(vec![c, 1, k]);
        branch.vertical.value = delta(vec![c, k, 1]);
        branch.pointwise.conv.weight.value =
            Tensor::eye(c).unwrap().reshape(vec![c, c, 1, 1]).unwrap();
        let x = Tensor::uniform(vec![c, 7, 9], 0.0, 1.0, &mut r).unwrap();
        let out = sep_dilated_branch(&x, &mut branch, Mode::Eval).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn kernel_outside_set_rejected() {
        assert!(SepDilatedBranch::<f32>::new(2, 2, 5, true, &mut rng(0)).is_err());
    }

    fn small_cfg() -> TappConfig {
        TappConfig {
            in_channels: 4,
            mid_channels: 3,
            out_channels: 5,
            levels: 6,
        }
    }

    #[test]
    fn fusion_width_is_five_branches() {
        assert_eq!(TappConfig::new(128).fusion_channels(), 320);
    }

    #[test]
    fn pooling_branch_is_spatially_constant() {
        let mut t = Tapp::<f64>::new(small_cfg(), &mut rng(3)).unwrap();
        let x = Tensor::randn(vec![2, 4, 6, 5], 1.0, &mut rng(4)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let parts = t.branch_outputs(&mut g, xv, Mode::Train).unwrap();
        for plane in g.value(parts[3]).data().chunks(30) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    fn pointwise_eval(x: &[f64], c: usize, n: usize, cbr: &Cbr<f64>) -> Vec<f64> {
        let w = cbr.conv.weight.value.data();
        let cout = cbr.conv.out_channels();
        let bn: &BatchNorm2d<f64> = cbr.norm.as_ref().unwrap();
        let mut out = vec![0.0; cout * n];
        for o in 0..cout {
            let scale = bn.gamma.value.data()[o] / (bn.running_var.value.data()[o] + bn.eps).sqrt();
            for i in 0..n {
                let z: f64 = (0..c).map(|ci| w[o * c + ci] * x[ci * n + i]).sum();
                let y = (z - bn.running_mean.value.data()[o]) * scale + bn.beta.value.data()[o];
                out[o * n + i] = y.max(0.0);
            }
        }
        out
    }

    #[test]
    fn matches_composed_branches() {
        let cfg = small_cfg();
        let mut t = Tapp::<f64>::new(cfg, &mut rng(5)).unwrap();
        // non-trivial running statistics
        t.visit_params("", &mut |name, p| {
            if name.ends_with("running_var") {
                p.value = p.value.map("test", |v| v * 1.7).unwrap();
            }
            if name.ends_with("running_mean") {
                p.value = p.value.map("test", |v| v + 0.2).unwrap();
            }
        });
        let (c, h, w) = (4, 9, 8);
        let n = h * w;
        let x = Tensor::randn(vec![c, h, w], 1.0, &mut rng(6)).unwrap();
        let out = tapp_forward(&x, &mut t, Mode::Eval).unwrap();

        let mut cat = Vec::new();
        for b in &t.branches {
            let s = rank1_conv(
                x.data(),
                c,
                h,
                w,
                b.horizontal.value.data(),
                b.vertical.value.data(),
                b.kernel,
            );
            cat.extend(pointwise_eval(&s, c, n, &b.pointwise));
        }
        let mean: Vec<f64> = x
            .data()
            .chunks(n)
            .map(|p| p.iter().sum::<f64>() / n as f64)
            .collect();
        for v in pointwise_eval(&mean, c, 1, &t.pool) {
            cat.extend(std::iter::repeat_n(v, n));
        }
        let tam = tam_forward(
            &cos_prefilter(&x).unwrap(),
            ThresholdSpec::new(cfg.levels).unwrap(),
            &t.tam,
        )
        .unwrap();
        cat.extend(pointwise_eval(tam.data(), c, n, &t.tam_reduce));
        let want = pointwise_eval(&cat, cfg.fusion_channels(), n, &t.fuse);
        assert_eq!(out.dims(), &[5, h, w]);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut t = Tapp::<f64>::new(small_cfg(), &mut rng(7)).unwrap();
        let x = Tensor::<f64>::zeros(vec![3, 4, 4]).unwrap();
        assert!(tapp_forward(&x, &mut t, Mode::Eval).is_err());
    }

    #[test]
    fn parameter_gradients() {
        let mut t = Tapp::<f64>::new(small_cfg(), &mut rng(8)).unwrap();
        let x = Tensor::randn(vec![2, 4, 5, 5], 1.0, &mut rng(9)).unwrap();
        let probe = Tensor::randn(vec![2, 5, 5, 5], 1.0, &mut rng(10)).unwrap();
        let report = grad_check_module(
            &mut t,
            |m, g| {
                let xv = g.constant(x.clone());
                let y = m.forward(g, xv, Mode::Train)?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                g.sum(y)
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
