//! Attentional feature enhancement: a residual TAM branch gated by channel
//! attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batched;
use super::cos::ChannelAttention;
use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::tam::{ProjectionParams, ThresholdSpec, DEFAULT_AFEM_LEVELS};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfemConfig {
    pub channels: usize,
    pub levels: usize,
    pub reduction: usize,
}

impl AfemConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            levels: DEFAULT_AFEM_LEVELS,
            reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.reduction == 0
            || !self.channels.is_multiple_of(self.reduction)
        {
            return Err(Error::InvalidArgument(format!(
                "AFEM channels {} must be a positive multiple of the reduction {}",
                self.channels, self.reduction
            )));
        }
        ThresholdSpec::new(self.levels).map(|_| ())
    }
}

/// `out = f + w * tam(cos_prefilter(f))` with `w = channel_attention(f)`
/// applied per channel.
#[derive(Debug, Clone)]
pub struct Afem<T: Scalar> {
    pub cfg: AfemConfig,
    pub tam: ProjectionParams<T>,
    pub attention: ChannelAttention<T>,
}

impl<T: Scalar> Afem<T> {
    pub fn new(cfg: AfemConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tam: ProjectionParams::random(cfg.channels, rng)?,
            attention: ChannelAttention::new(cfg.channels, cfg.reduction, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.value(x).as_bchw("afem")?[1];
        if c != self.cfg.channels {
            return Err(Error::shape(
                "afem",
                format!(
                    "input has {c} channels, block expects {}",
                    self.cfg.channels
                ),
            ));
        }
        let spec = ThresholdSpec::new(self.cfg.levels)?;
        let w = self.attention.forward(g, x)?;
        let filtered = g.cos_prefilter(x)?;
        let t = g.tam(filtered, spec, &self.tam)?;
        let gated = g.scale_channels(t, w)?;
        g.add(x, gated)
    }
}

impl<T: Scalar> Module<T> for Afem<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        for (name, p) in self.tam.params_mut() {
            f(&join(&join(prefix, "tam"), name), p);
        }
        self.attention.visit_params(&join(prefix, "attention"), f);
    }
}

/// Applies the block to a `C x H x W` or `B x C x H x W` map.
pub fn afem_forward<T: Scalar>(f: &Tensor<T>, block: &Afem<T>) -> Result<Tensor<T>> {
    batched(f, "afem", |g, x| block.forward(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::cos::{channel_attention, cos_prefilter};
    use crate::oracles::grad_check_module;
    use crate::tam::tam_forward;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, l: usize, seed: u64) -> Afem<f64> {
        let cfg = AfemConfig {
            levels: l,
            ..AfemConfig::new(c)
        };
        Afem::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut b = block(8, 10, 1);
        b.tam.wv.value = Tensor::zeros(vec![8, 8]).unwrap();
        let f = Tensor::randn(vec![2, 8, 5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = afem_forward(&f, &b).unwrap();
        assert_eq!(out.dims(), f.dims());
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn matches_composed_suboperations() {
        let b = block(8, 12, 3);
        let f = Tensor::randn(vec![8, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let out = afem_forward(&f, &b).unwrap();
        let t = tam_forward(
            &cos_prefilter(&f).unwrap(),
            ThresholdSpec::new(12).unwrap(),
            &b.tam,
        )
        .unwrap();
        let w = channel_attention(&f, &b.attention).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let want = f.data()[i] + w.data()[i / 36] * t.data()[i];
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_permutation_commutes_exactly() {
        let b = block(8, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, n) = (8, 35);
        let f = Tensor::randn(vec![c, 5, 7], 1.0, &mut rng).unwrap();
        let out = afem_forward(&f, &b).unwrap();
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permute = |t: &Tensor<f64>| {
                Tensor::from_fn(vec![c, 5, 7], |i| t.data()[(i / n) * n + perm[i % n]]).unwrap()
            };
            assert_eq!(
                afem_forward(&permute(&f), &b).unwrap().data(),
                permute(&out).data()
            );
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let b = block(8, 4, 7);
        let f = Tensor::<f64>::zeros(vec![4, 3, 3]).unwrap();
        assert!(afem_forward(&f, &b).is_err());
        assert!(Afem::<f64>::new(AfemConfig::new(6), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn parameter_gradients() {
        let mut b = block(8, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(vec![2, 8, 4, 4], 1.0, &mut rng).unwrap();
        let probe = Tensor::randn(vec![2, 8, 4, 4], 1.0, &mut rng).unwrap();
        let report = grad_check_module(
            &mut b,
            |m, g| {
                let xv = g.constant(x.clone());
                let y = m.forward(g, xv)?;
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
