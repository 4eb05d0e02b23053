//! A small segmentation network: a three-stage convolutional backbone,
//! AFEM on shallow features, TAPP on deep features, and an auxiliary head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Afem, AfemConfig, Tapp, TappConfig};
use crate::autograd::{Graph, Mode, Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Cbr, Conv2d, Module};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Total downsampling factor of the backbone.
pub const TOTAL_STRIDE: usize = 4;
const STRIDES: [usize; 3] = [2, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// AFEM and TAPP blocks.
    Full,
    /// Both blocks replaced by channel-matched pointwise blocks.
    Ablated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub classes: usize,
    /// Backbone stage (0-based) feeding the auxiliary head.
    pub aux_stage: usize,
    pub fuse_channels: usize,
    pub afem: AfemConfig,
    pub tapp: TappConfig,
    pub variant: Variant,
}

impl ToyNetConfig {
    pub fn new(classes: usize, variant: Variant) -> Self {
        let widths = [32, 64, 128];
        Self {
            in_channels: 3,
            widths,
            classes,
            aux_stage: 2,
            fuse_channels: 64,
            afem: AfemConfig::new(widths[0] + widths[1]),
            tapp: TappConfig::new(widths[2]),
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aux_stage >= 3 {
            return Err(Error::InvalidArgument(format!(
                "aux stage {} does not exist",
                self.aux_stage
            )));
        }
        if self.classes < 2
            || self.in_channels == 0
            || self.widths.contains(&0)
            || self.fuse_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid network widths: {self:?}"
            )));
        }
        if self.afem.channels != self.widths[0] + self.widths[1]
            || self.tapp.in_channels != self.widths[2]
        {
            return Err(Error::InvalidArgument(
                "AFEM must take stage-1 + stage-2 channels and TAPP stage-3 channels".into(),
            ));
        }
        self.afem.validate()?;
        self.tapp.validate()
    }
}

#[derive(Debug, Clone)]
enum Shallow<T: Scalar> {
    Afem(Afem<T>),
    Pointwise(Cbr<T>),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Deep<T: Scalar> {
    Tapp(Tapp<T>),
    Pointwise(Cbr<T>),
}

#[derive(Debug, Clone)]
pub struct ToyNet<T: Scalar> {
    pub cfg: ToyNetConfig,
    stages: Vec<Cbr<T>>,
    shallow: Shallow<T>,
    deep: Deep<T>,
    fuse: Cbr<T>,
    classifier: Conv2d<T>,
    aux: Conv2d<T>,
}

impl<T: Scalar> ToyNet<T> {
    pub fn new(cfg: ToyNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(3);
        let mut cin = cfg.in_channels;
        for (&w, &stride) in cfg.widths.iter().zip(&STRIDES) {
            let spec = ConvSpec {
                stride,
                padding: 1,
                dilation: 1,
            };
            stages.push(Cbr::new(cin, w, 3, spec, true, rng)?);
            cin = w;
        }
        let shallow_ch = cfg.afem.channels;
        let deep_ch = cfg.tapp.out_channels;
        let (shallow, deep) = match cfg.variant {
            Variant::Full => (
                Shallow::Afem(Afem::new(cfg.afem, rng)?),
                Deep::Tapp(Tapp::new(cfg.tapp, rng)?),
            ),
            Variant::Ablated => (
                Shallow::Pointwise(Cbr::pointwise(shallow_ch, shallow_ch, rng)?),
                Deep::Pointwise(Cbr::pointwise(cfg.widths[2], deep_ch, rng)?),
            ),
        };
        Ok(Self {
            fuse: Cbr::pointwise(shallow_ch + deep_ch, cfg.fuse_channels, rng)?,
            classifier: Conv2d::pointwise(cfg.fuse_channels, cfg.classes, true, rng)?,
            aux: Conv2d::pointwise(cfg.widths[cfg.aux_stage], cfg.classes, true, rng)?,
            cfg,
            stages,
            shallow,
            deep,
        })
    }

    /// Backbone features of every stage.
    pub fn backbone(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.value(x).as_bchw("toynet")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "toynet",
                format!(
                    "image has {c} channels, network expects {}",
                    self.cfg.in_channels
                ),
            ));
        }
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::shape(
                "toynet",
                format!("image {h} x {w} is not divisible by the backbone stride {TOTAL_STRIDE}"),
            ));
        }
        let mut feats = Vec::with_capacity(3);
        let mut y = x;
        for stage in &mut self.stages {
            y = stage.forward(g, y, mode)?;
            feats.push(y);
        }
        Ok(feats)
    }

    fn enhance(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Vec<Var>, [Var; 4])> {
        let feats = self.backbone(g, x, mode)?;
        let pooled = g.avg_pool2(feats[0])?;
        let shallow_in = g.concat_channels(&[pooled, feats[1]])?;
        let shallow_out = match &mut self.shallow {
            Shallow::Afem(b) => b.forward(g, shallow_in)?,
            Shallow::Pointwise(b) => b.forward(g, shallow_in, mode)?,
        };
        let deep_out = match &mut self.deep {
            Deep::Tapp(b) => b.forward(g, feats[2], mode)?,
            Deep::Pointwise(b) => b.forward(g, feats[2], mode)?,
        };
        let blocks = [shallow_in, shallow_out, feats[2], deep_out];
        Ok((feats, blocks))
    }

    /// Inputs and outputs of the two enhancement blocks, for inspection:
    /// `[shallow_in, shallow_out, deep_in, deep_out]`.
    pub fn block_features(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<[Var; 4]> {
        self.enhance(g, x, mode).map(|(_, blocks)| blocks)
    }

    /// Main and auxiliary logits, each `B x K x H x W`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let [_, _, h, w] = g.value(x).as_bchw("toynet")?;
        let (feats, [_, shallow, _, deep]) = self.enhance(g, x, mode)?;
        let cat = g.concat_channels(&[shallow, deep])?;
        let fused = self.fuse.forward(g, cat, mode)?;
        let logits = self.classifier.forward(g, fused)?;
        let logits = g.resize_bilinear(logits, h, w)?;
        let aux = self.aux.forward(g, feats[self.cfg.aux_stage])?;
        let aux = g.resize_bilinear(aux, h, w)?;
        Ok((logits, aux))
    }
}

impl<T: Scalar> Module<T> for ToyNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        match &mut self.shallow {
            Shallow::Afem(b) => b.visit_params(&join(prefix, "afem"), f),
            Shallow::Pointwise(b) => b.visit_params(&join(prefix, "shallow"), f),
        }
        match &mut self.deep {
            Deep::Tapp(b) => b.visit_params(&join(prefix, "tapp"), f),
            Deep::Pointwise(b) => b.visit_params(&join(prefix, "deep"), f),
        }
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
        self.aux.visit_params(&join(prefix, "aux"), f);
    }
}

/// Runs the network on a `3 x H x W` image or a `B x 3 x H x W` batch and
/// returns `(logits, aux_logits)` in the input's batch convention.
pub fn toynet_forward<T: Scalar>(
    image: &Tensor<T>,
    net: &mut ToyNet<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = image.as_bchw("toynet")?;
    let mut g = Graph::new();
    let x = g.constant(image.reshape(vec![b, c, h, w])?);
    let (logits, aux) = net.forward(&mut g, x, mode)?;
    let unbatch = |t: &Tensor<T>| {
        if image.rank() == 3 {
            t.reshape(t.dims()[1..].to_vec())
        } else {
            Ok(t.clone())
        }
    };
    Ok((unbatch(g.value(logits))?, unbatch(g.value(aux))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::resize_bilinear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant) -> ToyNetConfig {
        let widths = [4, 8, 8];
        ToyNetConfig {
            widths,
            fuse_channels: 8,
            afem: AfemConfig {
                levels: 8,
                ..AfemConfig::new(12)
            },
            tapp: TappConfig {
                in_channels: 8,
                mid_channels: 4,
                out_channels: 8,
                levels: 8,
            },
            ..ToyNetConfig::new(3, variant)
        }
    }

    #[test]
    fn output_shapes_match_input() {
        for variant in [Variant::Full, Variant::Ablated] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut net = ToyNet::<f32>::new(tiny(variant), &mut rng).unwrap();
            let img = Tensor::uniform(vec![3, 16, 12], 0.0, 1.0, &mut rng).unwrap();
            let (logits, aux) = toynet_forward(&img, &mut net, Mode::Eval).unwrap();
            assert_eq!(logits.dims(), &[3, 16, 12]);
            assert_eq!(aux.dims(), &[3, 16, 12]);
            assert!(logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_image_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ToyNet::<f32>::new(tiny(Variant::Full), &mut rng).unwrap();
        let img = Tensor::zeros(vec![3, 10, 12]).unwrap();
        assert!(toynet_forward(&img, &mut net, Mode::Eval).is_err());
    }

    #[test]
    fn missing_aux_stage_rejected() {
        let cfg = ToyNetConfig {
            aux_stage: 3,
            ..ToyNetConfig::new(4, Variant::Full)
        };
        assert!(cfg.validate().is_err());
        assert!(ToyNetConfig::new(4, Variant::Full).validate().is_ok());
    }

    /// Bilinear sample at output `(oy, ox)` with half-pixel centers and
    /// edge clamping.
    fn bilinear_at(
        x: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        oy: usize,
        ox: usize,
    ) -> f64 {
        let src = |o: usize, n: usize, on: usize| {
            (((o as f64 + 0.5) * n as f64 / on as f64) - 0.5).clamp(0.0, (n - 1) as f64)
        };
        let (sy, sx) = (src(oy, h, oh), src(ox, w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |y: usize, xx: usize| x[y * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn bilinear_upsample_matches_direct_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (4, 5);
        let x = Tensor::<f64>::randn(vec![1, h, w], 1.0, &mut rng).unwrap();
        let up = resize_bilinear(&x, 4 * h, 4 * w).unwrap();
        for oy in 0..4 * h {
            for ox in 0..4 * w {
                let want = bilinear_at(x.data(), h, w, 4 * h, 4 * w, oy, ox);
                assert!((up.data()[oy * 4 * w + ox] - want).abs() < 1e-12);
            }
        }
        let flat = Tensor::<f64>::full(vec![1, h, w], 0.7).unwrap();
        let up = resize_bilinear(&flat, 4 * h, 4 * w).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn ablated_variant_has_no_attention_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ToyNet::<f32>::new(tiny(Variant::Ablated), &mut rng).unwrap();
        let mut names = Vec::new();
        net.visit_params("", &mut |n, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.contains("tam")));
        assert!(names.iter().any(|n| n.starts_with("shallow.")));
    }
}
