//! Seeded synthetic segmentation data: Voronoi regions, one flat color per
//! class, additive Gaussian noise.
//!
//! Layout on disk: `<root>/manifest.json`, `<root>/images/NNNN.tsr`
//! (`f32`, `3 x H x W`) and `<root>/labels/NNNN.tsr` (`u8`, `H x W`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tsr::{read_tsr, write_tsr};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub sites: usize,
    /// Mean RGB color of each class, in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub noise_std: f64,
    pub train: usize,
    pub val: usize,
}

/// Distinct, well separated class colors for up to 8 classes; further
/// classes get colors on a hue circle.
pub fn palette(classes: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 8] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.7, 0.25],
        [0.2, 0.3, 0.85],
        [0.9, 0.85, 0.2],
        [0.75, 0.3, 0.8],
        [0.2, 0.8, 0.8],
        [0.95, 0.6, 0.2],
        [0.5, 0.5, 0.5],
    ];
    (0..classes)
        .map(|k| {
            if k < BASE.len() {
                BASE[k]
            } else {
                let hue = k as f64 / classes as f64 * std::f64::consts::TAU;
                [
                    0.5 + 0.4 * hue.cos(),
                    0.5 + 0.4 * (hue + 2.1).cos(),
                    0.5 + 0.4 * (hue + 4.2).cos(),
                ]
            }
        })
        .collect()
}

impl SynthConfig {
    /// 64 x 64 images, 4 classes, 12 sites, noise 0.05, 200 train and
    /// 50 validation samples.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            height: 64,
            width: 64,
            classes: 4,
            sites: 12,
            colors: palette(4),
            noise_std: 0.05,
            train: 200,
            val: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 || self.classes > 256 {
            return bad(format!(
                "class count must be in [2, 256], got {}",
                self.classes
            ));
        }
        if self.sites < self.classes {
            return bad(format!(
                "need at least as many sites ({}) as classes ({})",
                self.sites, self.classes
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!(
                "noise std must be finite and >= 0, got {}",
                self.noise_std
            ));
        }
        if self.colors.len() != self.classes {
            return bad(format!(
                "{} colors for {} classes",
                self.colors.len(),
                self.classes
            ));
        }
        if self
            .colors
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return bad("colors must lie in [0, 1]".into());
        }
        for (i, a) in self.colors.iter().enumerate() {
            if self.colors[..i].contains(a) {
                return bad(format!("class {i} repeats an earlier color"));
            }
        }
        if self.train + self.val == 0 || self.train + self.val > 10_000 {
            return bad("sample count must be in [1, 10000]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub splits: Splits,
}

/// One generated sample: `3 x H x W` image and `H x W` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Tensor<u8>,
}

/// Generates sample `index`. Each sample draws from its own stream of the
/// seeded generator, so samples are independent of generation order.
pub fn gen_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let sites: Vec<(f64, f64, usize)> = (0..cfg.sites)
        .map(|s| {
            let y = rng.random::<f64>() * h as f64;
            let x = rng.random::<f64>() * w as f64;
            let class = if s < k { s } else { rng.random_range(0..k) };
            (y, x, class)
        })
        .collect();
    let mut labels = vec![0u8; h * w];
    for py in 0..h {
        for px in 0..w {
            let (cy, cx) = (py as f64 + 0.5, px as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for &(sy, sx, class) in &sites {
                let d = (sy - cy).powi(2) + (sx - cx).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            labels[py * w + px] = best.1 as u8;
        }
    }
    let noise =
        Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut image = vec![0f32; 3 * h * w];
    for ch in 0..3 {
        for (i, &l) in labels.iter().enumerate() {
            let mean = cfg.colors[l as usize][ch];
            let v = if cfg.noise_std > 0.0 {
                mean + noise.sample(&mut rng)
            } else {
                mean
            };
            image[ch * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], image)?,
        labels: Tensor::new(vec![h, w], labels)?,
    })
}

fn sample_paths(root: &Path, id: usize) -> (PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{id:04}.tsr")),
        root.join("labels").join(format!("{id:04}.tsr")),
    )
}

/// Writes the whole dataset under `root` and returns its manifest.
pub fn gen_dataset(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let root = root.as_ref();
    for dir in [root.join("images"), root.join("labels")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    }
    let total = cfg.train + cfg.val;
    for id in 0..total {
        let s = gen_sample(cfg, id)?;
        let (ip, lp) = sample_paths(root, id);
        write_tsr(ip, &s.image)?;
        write_tsr(lp, &s.labels)?;
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.clone(),
        splits: Splits {
            train: (0..cfg.train).collect(),
            val: (cfg.train..total).collect(),
        },
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Ok(Self { root, manifest })
    }

    pub fn classes(&self) -> usize {
        self.manifest.config.classes
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
        }
    }

    pub fn load(&self, id: usize) -> Result<Sample> {
        let (ip, lp) = sample_paths(&self.root, id);
        let image: Tensor<f32> = read_tsr(&ip)?;
        let labels: Tensor<u8> = read_tsr(&lp)?;
        let k = self.classes();
        if image.rank() != 3 || image.dims()[0] != 3 || image.dims()[1..] != *labels.dims() {
            return Err(Error::Format {
                path: ip,
                detail: format!(
                    "image {:?} does not match labels {:?}",
                    image.dims(),
                    labels.dims()
                ),
            });
        }
        if labels.data().iter().any(|&l| l as usize >= k) {
            return Err(Error::Format {
                path: lp,
                detail: format!("label outside [0, {k})"),
            });
        }
        Ok(Sample { image, labels })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.ids(split).iter().map(|&id| self.load(id)).collect()
    }
}
