//! Mini-batch training with momentum SGD, the epoch log and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::Bundle;
use crate::config::ArchConfig;
use crate::d2r::Q_MIN;
use crate::dataset::{Dataset, Normalizer};
use crate::error::{Error, FormatError, ParseError, Result};
use crate::eval::argmax;
use crate::model::{DapNet, EmbeddingBank, Relaxation};
use crate::nn::{flatten, Params};
use crate::par::{self, Parallelism};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate to zero over the run, stepped per epoch.
    #[default]
    Cosine,
}

/// How the optimizer moves the quantile `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QParam {
    /// Plain step on `q`, then clamp to the valid range.
    #[default]
    Clamp,
    /// Step on the logit of `q`.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    None,
    /// Weight each class by `n / (K_present * n_c)`.
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Free-form hint recorded in snapshots; only `cpu` is implemented.
    pub device: String,
    pub q_param: QParam,
    pub class_weighting: ClassWeighting,
    pub relaxation: Relaxation,
    /// Clips whose gradients are held in memory at once; does not change results.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            seed: 0,
            device: "cpu".into(),
            q_param: QParam::Clamp,
            class_weighting: ClassWeighting::None,
            relaxation: Relaxation::StraightThrough,
            grad_chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("train.{k} {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a nonnegative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be a nonnegative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.device != "cpu" {
            return bad("device", "supports only `cpu`");
        }
        if self.grad_chunk == 0 {
            return bad("grad_chunk", "must be at least 1");
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub q: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).map_err(|e| Error::Validation(e.to_string()))?;
    }
    if log.is_empty() {
        w.write_record(["epoch", "loss", "acc", "q"]).map_err(|e| Error::Validation(e.to_string()))?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Validation(e.to_string()))?).expect("csv is utf-8"))
}

pub fn log_from_csv(text: &str) -> Result<Vec<EpochLog>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                ParseError::Malformed {
                    row: i + 2,
                    reason: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

fn class_weights(data: &Dataset, mode: ClassWeighting) -> Vec<f64> {
    let counts = data.class_counts();
    match mode {
        ClassWeighting::None => vec![1.0; counts.len()],
        ClassWeighting::InverseFrequency => {
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            let n = data.len() as f64;
            counts
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
                .collect()
        }
    }
}

/// Momentum SGD state over the flattened parameter vector.
struct Sgd {
    velocity: Vec<f64>,
    q_logit: f64,
}

fn logit(q: f64) -> f64 {
    (q / (1.0 - q)).ln()
}

impl Sgd {
    fn new(model: &DapNet) -> Self {
        Sgd {
            velocity: vec![0.0; flatten(model).len()],
            q_logit: logit(model.q),
        }
    }

    /// Weight decay applies to every tensor except `q`.
    fn step(&mut self, model: &mut DapNet, grad: &[f64], cfg: &TrainConfig, lr: f64) {
        let q_max = 1.0 - Q_MIN;
        let mut offset = 0;
        let Sgd { velocity, q_logit } = self;
        model.visit_mut("", &mut |name, values| {
            let is_q = name == "q";
            for (k, p) in values.iter_mut().enumerate() {
                let i = offset + k;
                let mut g = grad[i];
                if is_q {
                    if cfg.q_param == QParam::Sigmoid {
                        g *= *p * (1.0 - *p);
                    }
                } else {
                    g += cfg.weight_decay * *p;
                }
                velocity[i] = cfg.momentum * velocity[i] + g;
                if is_q && cfg.q_param == QParam::Sigmoid {
                    *q_logit -= lr * velocity[i];
                    *p = (1.0 / (1.0 + (-*q_logit).exp())).clamp(Q_MIN, q_max);
                } else if is_q {
                    *p = (*p - lr * velocity[i]).clamp(Q_MIN, q_max);
                } else {
                    *p -= lr * velocity[i];
                }
            }
            offset += values.len();
        });
    }
}

/// Densification seed of clip `index` in `epoch`.
pub fn train_seed(base: u64, epoch: usize, index: usize) -> u64 {
    seed::derive(base, &[epoch as u64, index as u64])
}

/// Train in place and return the per-epoch log. `on_epoch` sees each log
/// line as soon as the epoch ends.
pub fn train(
    model: &mut DapNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mode: Parallelism,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("the training set is empty".into()));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= model.classes) {
        return Err(Error::Training(format!(
            "sample {} has label {} outside the {}-class label space",
            s.id, s.label, model.classes
        )));
    }
    let weights = class_weights(data, cfg.class_weighting);
    let mut opt = Sgd::new(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng_at(cfg.seed, &[epoch as u64]));
        let lr = cfg.rate_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut total = vec![0.0; opt.velocity.len()];
            let mut weight_sum = 0.0;
            for chunk in batch.chunks(cfg.grad_chunk) {
                let model_ref = &*model;
                let results = par::map(mode, chunk, |_, &i| {
                    let s = &data.samples[i];
                    let w = weights[s.label];
                    model_ref
                        .loss_and_grad(&s.clip, s.label, train_seed(model_ref.arch.d2r.seed, epoch, i), cfg.relaxation, w)
                        .map(|(loss, out, grad)| (loss, argmax(out.logits.view()), flatten(&grad)))
                });
                for (&i, r) in chunk.iter().zip(results) {
                    let (loss, pred, grad) = r?;
                    let s = &data.samples[i];
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Training(format!(
                            "non-finite loss or gradient at epoch {} on sample {} (loss {loss}, q {:.6}, lr {lr})",
                            epoch + 1,
                            s.id,
                            model.q
                        )));
                    }
                    loss_sum += loss;
                    weight_sum += weights[s.label];
                    correct += (pred == s.label) as usize;
                    total.iter_mut().zip(&grad).for_each(|(t, g)| *t += g);
                }
            }
            if weight_sum > 0.0 {
                total.iter_mut().for_each(|t| *t /= weight_sum);
                opt.step(model, &total, cfg, lr);
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            q: model.q,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dtype: String,
    tensors: Vec<(String, usize)>,
    class_names: Vec<String>,
    arch: ArchConfig,
    normalizer: Normalizer,
}

/// A trained network with everything needed to apply it to new data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DapNet,
    pub normalizer: Normalizer,
    /// Effective run configuration at save time, as TOML text.
    pub config: String,
}

impl Checkpoint {
    pub fn new(model: DapNet, normalizer: Normalizer, config: String) -> Self {
        Checkpoint {
            model,
            normalizer,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            dtype: "f64le".into(),
            tensors: self.model.shapes(),
            class_names: self.model.class_names.clone(),
            arch: self.model.arch.clone(),
            normalizer: self.normalizer,
        };
        let mut b = Bundle::new();
        b.insert_json("meta", &meta);
        b.insert_f64("params", &flatten(&self.model));
        let bank = self.model.bank.to_bundle();
        for name in ["data", "meta"] {
            b.insert(format!("bank/{name}"), bank.get(name)?.to_vec());
        }
        b.insert("config", self.config.clone().into_bytes());
        b.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::read(path)?;
        let meta: CheckpointMeta = b.json("meta")?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                path: path.to_path_buf(),
                found: meta.version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        if meta.dtype != "f64le" {
            return Err(b.bad_meta(format!("unsupported dtype `{}`", meta.dtype)));
        }
        let mut bank_bundle = Bundle::new();
        for name in ["data", "meta"] {
            bank_bundle.insert(name, b.get(&format!("bank/{name}"))?.to_vec());
        }
        let bank = EmbeddingBank::from_bundle(&bank_bundle).map_err(|e| b.bad_meta(format!("embedded bank: {e}")))?;
        let mut model = DapNet::new(&meta.arch, &meta.class_names, Some(bank))?;
        let expected: usize = meta.tensors.iter().map(|t| t.1).sum();
        let params = b.f64s("params", expected)?;
        load_params(&mut model, &meta.tensors, &params)?;
        Ok(Checkpoint {
            model,
            normalizer: meta.normalizer,
            config: b.text("config")?.to_string(),
        })
    }

    /// Copy the stored parameters into an existing network, which must have
    /// exactly the stored tensor names and sizes.
    pub fn load_into(path: &Path, model: &mut DapNet) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        load_params(model, &ck.model.shapes(), &flatten(&ck.model))
    }
}

fn load_params(model: &mut DapNet, tensors: &[(String, usize)], params: &[f64]) -> Result<()> {
    let have = model.shapes();
    if have != tensors {
        let diff = have
            .iter()
            .zip(tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("`{}` has {} values, stored `{}` has {}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("{} tensors vs {} stored", have.len(), tensors.len()));
        return Err(Error::Shape(format!("checkpoint does not fit the model: {diff}")));
    }
    let mut offset = 0;
    model.visit_mut("", &mut |_, values| {
        values.copy_from_slice(&params[offset..offset + values.len()]);
        offset += values.len();
    });
    Ok(())
}
