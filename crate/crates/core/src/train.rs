//! Toy training loop, checkpoints and evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::blocks::{ToyNet, ToyNetConfig};
use crate::error::{Error, Result};
use crate::io::tsr::{read_tsr, write_tsr};
use crate::loss::LossConfig;
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::nn::Module;
use crate::optim::{poly_lr, zero_grad, AdamW};
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub loss: LossConfig,
    pub seed: u64,
    /// Evaluate on the validation split after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 5e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            loss: LossConfig::default(),
            seed: 0,
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.base_lr.is_nan()
            || self.base_lr < 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidArgument(
                "learning rate and weight decay must be >= 0".into(),
            ));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub net: ToyNet<f32>,
    pub log: Vec<EpochLog>,
}

/// Stacks samples into a `B x 3 x H x W` batch and flat labels.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels = samples
        .iter()
        .flat_map(|s| s.labels.data().iter().map(|&l| l as usize))
        .collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Trains a fresh network on the train split. Initialization and the
/// per-epoch visiting order derive from `cfg.seed` only.
pub fn train_toy(ds: &Dataset, net_cfg: &ToyNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net_cfg.classes != ds.classes() {
        return Err(Error::InvalidArgument(format!(
            "network predicts {} classes, dataset has {}",
            net_cfg.classes,
            ds.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ToyNet::<f32>::new(net_cfg.clone(), &mut rng)?;
    let train = ds.load_split(Split::Train)?;
    let val = if cfg.validate_each_epoch {
        ds.load_split(Split::Val)?
    } else {
        Vec::new()
    };
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let max_iter = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.betas.0, cfg.betas.1, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let lr_start = poly_lr(iter, max_iter, cfg.base_lr);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let abort = |detail: String| Error::Training {
                epoch,
                iteration: step,
                detail,
            };
            let members: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (images, labels) = batch(&members)?;
            let mut g = Graph::new();
            let x = g.constant(images);
            let result = net
                .forward(&mut g, x, Mode::Train)
                .and_then(|(main, aux)| g.total_loss(main, aux, &labels, &cfg.loss));
            let (loss, terms) = match result {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => {
                    return Err(abort(format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() {
                return Err(abort(format!("loss is {}", terms.total)));
            }
            let grads = match g.backward(loss) {
                Ok(grads) => grads,
                Err(Error::NonFinite { op }) => {
                    return Err(abort(format!("non-finite gradient in {op}")))
                }
                Err(e) => return Err(e),
            };
            zero_grad(&mut net);
            net.visit_params("", &mut |_, p| {
                if let Some(d) = grads.of_param(p) {
                    p.grad = d.clone();
                }
            });
            opt.step(&mut net, poly_lr(iter, max_iter, cfg.base_lr));
            loss_sum += terms.total;
            iter += 1;
        }
        let train_loss = loss_sum / per_epoch as f64;
        let val_miou = if cfg.validate_each_epoch && !val.is_empty() {
            Some(evaluate_samples(&mut net, &val, cfg.batch_size)?.miou)
        } else {
            None
        };
        log::info!(
            "epoch {:>3}  loss {:.4}  val mIoU {}",
            epoch + 1,
            train_loss,
            val_miou.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_miou,
            lr: lr_start,
        });
    }
    Ok(TrainOutcome { net, log })
}

/// Per-pixel argmax over the class axis of `B x K x H x W` logits.
pub fn predict(logits: &Tensor<f32>) -> Result<Vec<usize>> {
    let [b, k, h, w] = logits.as_bchw("predict")?;
    let n = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        for i in 0..n {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * n + i] > d[(bi * k + best) * n + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate_samples(
    net: &mut ToyNet<f32>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(net.cfg.classes)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (images, labels) = batch(chunk)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let (main, _) = net.forward(&mut g, x, Mode::Eval)?;
        cm.update(&predict(g.value(main))?, &labels)?;
    }
    compute_metrics(&cm)
}

/// Metrics of `net` over one split of `ds`.
pub fn evaluate_model(net: &mut ToyNet<f32>, ds: &Dataset, split: Split) -> Result<MetricsReport> {
    if net.cfg.classes != ds.classes() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint predicts {} classes, dataset has {}",
            net.cfg.classes,
            ds.classes()
        )));
    }
    evaluate_samples(net, &ds.load_split(split)?, 8)
}

const CHECKPOINT_CONFIG: &str = "config.json";

/// Writes `config.json` and one TSR file per parameter (including
/// normalization statistics) into `dir`.
pub fn save_checkpoint(net: &mut ToyNet<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let params = dir.join("params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    let path = dir.join(CHECKPOINT_CONFIG);
    let text = serde_json::to_string_pretty(&net.cfg).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mut result = Ok(());
    net.visit_params("", &mut |name, p| {
        if result.is_ok() {
            result = write_tsr(params.join(format!("{name}.tsr")), &p.value);
        }
    });
    result
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyNet<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: ToyNetConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut net = ToyNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = dir.join("params");
    let mut result = Ok(());
    net.visit_params("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        result = read_tsr::<f32>(params.join(format!("{name}.tsr"))).and_then(|t| p.set_value(t));
    });
    result.map(|_| net)
}
