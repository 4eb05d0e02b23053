//! Pixel-wise cross-entropy, online hard example mining, and the combined
//! main + auxiliary objective.
//!
//! Logits are laid out `K x N`, `K x H x W` or `B x K x H x W`; labels and
//! masks run over pixels in batch-major, then row-major order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the auxiliary term.
    pub aux_weight: f64,
    /// Pixels whose true-class probability is below this are hard.
    pub ohem_threshold: f64,
    /// Minimum number of pixels kept by hard example mining.
    pub ohem_min_kept: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            aux_weight: 0.5,
            ohem_threshold: 0.65,
            ohem_min_kept: 10_000,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ohem_threshold) {
            return Err(Error::InvalidArgument(format!(
                "OHEM threshold must lie in [0, 1], got {}",
                self.ohem_threshold
            )));
        }
        if self.aux_weight.is_nan() || self.aux_weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "aux weight must be >= 0, got {}",
                self.aux_weight
            )));
        }
        Ok(())
    }
}

/// `(batch, classes, pixels per sample)`
fn layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [k, n] => Ok((1, k, n)),
        [k, h, w] => Ok((1, k, h * w)),
        [b, k, h, w] => Ok((b, k, h * w)),
        _ => Err(Error::shape(
            "ce_loss",
            format!("unsupported logits dims {dims:?}"),
        )),
    }
}

/// Per-pixel class probabilities `pixels x K`, pixel-major.
fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Result<(Vec<T>, usize)> {
    let (b, k, n) = layout(logits.dims())?;
    let d = logits.data();
    let mut p = vec![T::zero(); b * n * k];
    for bi in 0..b {
        for i in 0..n {
            let row = &mut p[(bi * n + i) * k..(bi * n + i + 1) * k];
            for (c, r) in row.iter_mut().enumerate() {
                *r = d[(bi * k + c) * n + i];
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|r| *r *= inv);
        }
    }
    Ok((p, k))
}

fn check_labels(labels: &[usize], mask: Option<&[bool]>, pixels: usize, k: usize) -> Result<()> {
    if labels.len() != pixels || mask.is_some_and(|m| m.len() != pixels) {
        return Err(Error::shape(
            "ce_loss",
            format!(
                "{pixels} pixels but {} labels and {} mask entries",
                labels.len(),
                mask.map_or(pixels, <[bool]>::len)
            ),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k && mask.is_none_or(|m| m[i]) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at pixel {i} is outside [0, {k})"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood over masked pixels and its gradient with
/// respect to the logits. An empty mask gives zero loss.
fn ce_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    mask: &[bool],
) -> Result<(T, Vec<T>)> {
    let (b, k, n) = layout(logits.dims())?;
    check_labels(labels, Some(mask), b * n, k)?;
    let d = logits.data();
    let kept = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![T::zero(); logits.len()];
    if kept == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize(kept).expect("count");
    let mut total = T::zero();
    for bi in 0..b {
        for i in 0..n {
            let pix = bi * n + i;
            if !mask[pix] {
                continue;
            }
            let at = |c: usize| (bi * k + c) * n + i;
            let m = (0..k).map(|c| d[at(c)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|c| (d[at(c)] - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - d[at(labels[pix])];
            for c in 0..k {
                let p = (d[at(c)] - lse).exp();
                let y = if c == labels[pix] {
                    T::one()
                } else {
                    T::zero()
                };
                grad[at(c)] = (p - y) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean of `-log softmax(logits)[label]` over pixels where `mask` is set.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], mask: &[bool]) -> Result<T> {
    ce_with_grad(logits, labels, mask).map(|(l, _)| l)
}

/// Hard-pixel mask: every pixel whose true-class probability is below the
/// threshold, topped up with the lowest-probability remaining pixels (lower
/// index first on ties) until `min(S, N)` are kept.
pub fn ohem_select<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Vec<bool>> {
    let (probs, k) = probabilities(logits)?;
    let pixels = probs.len() / k;
    check_labels(labels, None, pixels, k)?;
    let p: Vec<f64> = (0..pixels)
        .map(|i| probs[i * k + labels[i]].as_f64())
        .collect();
    let mut mask: Vec<bool> = p.iter().map(|&v| v < cfg.ohem_threshold).collect();
    let want = cfg.ohem_min_kept.min(pixels);
    let have = mask.iter().filter(|&&m| m).count();
    if have < want {
        let mut rest: Vec<usize> = (0..pixels).filter(|&i| !mask[i]).collect();
        rest.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
        for &i in &rest[..want - have] {
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// The two terms of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub main: f64,
    pub aux: f64,
    pub total: f64,
    pub kept: usize,
}

/// `ce(main, ohem mask) + lambda * ce(aux, all pixels)`.
pub fn total_loss<T: Scalar>(
    main: &Tensor<T>,
    aux: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if main.dims() != aux.dims() {
        return Err(Error::shape(
            "total_loss",
            format!(
                "main {:?} and aux {:?} logits differ",
                main.dims(),
                aux.dims()
            ),
        ));
    }
    let mask = ohem_select(main, labels, cfg)?;
    let all = vec![true; labels.len()];
    let m = ce_loss(main, labels, &mask)?.as_f64();
    let a = ce_loss(aux, labels, &all)?.as_f64();
    Ok(LossTerms {
        main: m,
        aux: a,
        total: m + cfg.aux_weight * a,
        kept: mask.iter().filter(|&&v| v).count(),
    })
}

impl<T: Scalar> Graph<T> {
    /// Differentiable [`ce_loss`]; the mask is a constant.
    pub fn ce_loss(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let dims = lv.dims().to_vec();
        let (loss, grad) = ce_with_grad(lv, labels, mask)?;
        let grad = Tensor::from_op("ce_loss", dims, grad)?;
        Ok(self.record(
            Tensor::scalar(loss)?,
            vec![logits],
            Box::new(move |g, _| Ok(vec![Some(grad.scale(g.data()[0])?)])),
        ))
    }

    /// Differentiable [`total_loss`]. The hard-pixel mask is chosen from the
    /// current main logits and then held fixed.
    pub fn total_loss(
        &mut self,
        main: Var,
        aux: Var,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(Var, LossTerms)> {
        self.total_loss_with_mask(main, aux, labels, None, cfg)
    }

    /// As [`Graph::total_loss`] with an optional precomputed mask.
    pub fn total_loss_with_mask(
        &mut self,
        main: Var,
        aux: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
        cfg: &LossConfig,
    ) -> Result<(Var, LossTerms)> {
        if self.value(main).dims() != self.value(aux).dims() {
            return Err(Error::shape(
                "total_loss",
                format!(
                    "main {:?} and aux {:?} logits differ",
                    self.value(main).dims(),
                    self.value(aux).dims()
                ),
            ));
        }
        let mask = match mask {
            Some(m) => m.to_vec(),
            None => ohem_select(self.value(main), labels, cfg)?,
        };
        let all = vec![true; labels.len()];
        let lm = self.ce_loss(main, labels, &mask)?;
        let la = self.ce_loss(aux, labels, &all)?;
        let weighted = self.scale(la, T::from_f64_lossy(cfg.aux_weight))?;
        let total = self.add(lm, weighted)?;
        let (m, a) = (
            self.value(lm).data()[0].as_f64(),
            self.value(la).data()[0].as_f64(),
        );
        let terms = LossTerms {
            main: m,
            aux: a,
            total: self.value(total).data()[0].as_f64(),
            kept: mask.iter().filter(|&&v| v).count(),
        };
        Ok((total, terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let logits = Tensor::<f64>::new(vec![3, 2], vec![20.0, 0.0, 0.0, 20.0, 0.0, 0.0]).unwrap();
        let l = ce_loss(&logits, &[0, 1], &[true, true]).unwrap();
        assert!((0.0..=1e-6).contains(&l), "{l}");
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::full(vec![6, 5], 0.3).unwrap();
        let l = ce_loss(&logits, &[0, 1, 2, 3, 5], &[true; 5]).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn two_pixel_hand_computation() {
        // pixel 0: logits (1, 2), label 1; pixel 1: logits (0.5, -0.5), label 0
        let logits = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.5, 2.0, -0.5]).unwrap();
        let l = ce_loss(&logits, &[1, 0], &[true, true]).unwrap();
        let nll0 = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let nll1 = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert!((l - (nll0 + nll1) / 2.0).abs() < 1e-6);
        let only_first = ce_loss(&logits, &[1, 0], &[true, false]).unwrap();
        assert!((only_first - nll0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_zero_and_bad_labels_rejected() {
        let logits = Tensor::<f64>::zeros(vec![3, 2]).unwrap();
        assert_eq!(ce_loss(&logits, &[0, 1], &[false, false]).unwrap(), 0.0);
        assert!(ce_loss(&logits, &[0, 3], &[true, true]).is_err());
        // out-of-range labels are fine where the mask is off
        assert!(ce_loss(&logits, &[0, 3], &[true, false]).is_ok());
    }

    /// Logits of two classes whose class-0 softmax probability is `p`.
    fn logits_for(p: &[f64]) -> Tensor<f64> {
        let n = p.len();
        Tensor::from_fn(vec![2, n], |i| {
            if i < n {
                (p[i] / (1.0 - p[i])).ln()
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn cfg(s: usize) -> LossConfig {
        LossConfig {
            ohem_min_kept: s,
            ..LossConfig::default()
        }
    }

    #[test]
    fn ohem_examples() {
        let l = logits_for(&[0.9, 0.5, 0.7]);
        assert_eq!(
            ohem_select(&l, &[0; 3], &cfg(0)).unwrap(),
            [false, true, false]
        );
        let l = logits_for(&[0.9, 0.9, 0.9]);
        assert_eq!(
            ohem_select(&l, &[0; 3], &cfg(2)).unwrap(),
            [true, true, false]
        );
        assert_eq!(ohem_select(&l, &[0; 3], &cfg(10)).unwrap(), [true; 3]);
        let l = logits_for(&[0.9, 0.8, 0.95, 0.7]);
        assert_eq!(
            ohem_select(&l, &[0; 4], &cfg(2)).unwrap(),
            [false, true, false, true]
        );
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!(
            (c.aux_weight, c.ohem_threshold, c.ohem_min_kept),
            (0.5, 0.65, 10_000)
        );
    }

    proptest! {
        #[test]
        fn ohem_mask_size(seed in 0u64..1000, n in 1usize..200, s in 0usize..300, theta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::<f64>::randn(vec![3, n], 2.0, &mut rng).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let c = LossConfig { ohem_threshold: theta, ohem_min_kept: s, aux_weight: 0.5 };
            let mask = ohem_select(&logits, &labels, &c).unwrap();
            let (probs, _) = probabilities(&logits).unwrap();
            let below = (0..n).filter(|&i| probs[i * 3 + labels[i]] < theta).count();
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), below.max(s.min(n)));
        }

        #[test]
        fn ce_is_nonnegative(seed in 0u64..1000, n in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::<f64>::randn(vec![4, n], 5.0, &mut rng).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            prop_assert!(ce_loss(&logits, &labels, &vec![true; n]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let main = Tensor::<f64>::randn(vec![1, 3, 2, 4], 1.0, &mut rng).unwrap();
        let aux = Tensor::<f64>::randn(vec![1, 3, 2, 4], 1.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let c = LossConfig {
            ohem_min_kept: 3,
            ..LossConfig::default()
        };
        let terms = total_loss(&main, &aux, &labels, &c).unwrap();
        let mask = ohem_select(&main, &labels, &c).unwrap();
        let m = ce_loss(&main, &labels, &mask).unwrap();
        let a = ce_loss(&aux, &labels, &[true; 8]).unwrap();
        assert!((terms.total - (m + 0.5 * a)).abs() < 1e-6);
        let zero = LossConfig {
            aux_weight: 0.0,
            ..c
        };
        assert_eq!(total_loss(&main, &aux, &labels, &zero).unwrap().total, m);
    }

    #[test]
    fn total_loss_gradient_with_frozen_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let main = Tensor::<f64>::randn(vec![2, 4, 3, 3], 1.0, &mut rng).unwrap();
        let aux = Tensor::<f64>::randn(vec![2, 4, 3, 3], 1.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..18).map(|_| rng.random_range(0..4)).collect();
        let c = LossConfig {
            ohem_min_kept: 5,
            ..LossConfig::default()
        };
        let mask = ohem_select(&main, &labels, &c).unwrap();
        let report = grad_check(
            |g, v| {
                g.total_loss_with_mask(v[0], v[1], &labels, Some(&mask), &c)
                    .map(|(l, _)| l)
            },
            &[main, aux],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn terms_combine_with_aux_weight() {
        // one pixel, two classes; main term ln 2, aux term chosen as 0.4
        let main = Tensor::<f64>::zeros(vec![2, 1]).unwrap();
        let p: f64 = (-0.4f64).exp();
        let aux = Tensor::<f64>::new(vec![2, 1], vec![(p / (1.0 - p)).ln(), 0.0]).unwrap();
        let c = LossConfig {
            ohem_min_kept: 1,
            ..LossConfig::default()
        };
        let t = total_loss(&main, &aux, &[0], &c).unwrap();
        assert!((t.aux - 0.4).abs() < 1e-12);
        assert!((t.total - (2f64.ln() + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn graph_and_tensor_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let main = Tensor::<f64>::randn(vec![1, 3, 4, 4], 1.0, &mut rng).unwrap();
        let aux = Tensor::<f64>::randn(vec![1, 3, 4, 4], 1.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let c = LossConfig {
            ohem_min_kept: 4,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let (m, a) = (g.constant(main.clone()), g.constant(aux.clone()));
        let (_, terms) = g.total_loss(m, a, &labels, &c).unwrap();
        assert_eq!(terms, total_loss(&main, &aux, &labels, &c).unwrap());
    }
}
