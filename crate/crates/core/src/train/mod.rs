//! AdamW, the step learning-rate schedule, the training loop and
//! checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use optim::{adamw_step, OptimizerState, ADAM_EPS, BETA1, BETA2};

use crate::data::{augment, RgbdSample};
use crate::error::{Error, Result};
use crate::loss::{final_loss, LossConfig};
use crate::model::{prepare_input, ModelConfig, TodeNet};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub augment: bool,
    pub seed: u64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Worker threads for per-sample gradients; 1 runs on the caller's thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 40,
            lr_milestones: vec![15, 30],
            lr_gamma: 0.1,
            augment: true,
            seed: 0,
            max_steps: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return fail("epochs", "must be positive".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_milestones", format!("must be strictly increasing, got {:?}", self.lr_milestones));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return fail("lr_gamma", format!("must be positive, got {}", self.lr_gamma));
        }
        if self.max_steps == Some(0) {
            return fail("max_steps", "must be positive when set".into());
        }
        if self.threads == 0 {
            return fail("threads", "must be positive".into());
        }
        Ok(())
    }
}

/// `lr · gamma^(milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_gamma.powi(passed as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    /// Mean loss over the batch, before the update.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.epoch, r.loss);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("step,epoch,loss") {
            return Err(Error::Format("loss history must start with `step,epoch,loss`".into()));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').map(str::trim).collect();
                let bad = || Error::Format(format!("bad loss history row {l:?}"));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(StepRecord {
                    step: f[0].parse().map_err(|_| bad())?,
                    epoch: f[1].parse().map_err(|_| bad())?,
                    loss: f[2].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Ground truth (meters) and binary mask tensors for a sample.
pub fn targets<T: Element>(sample: &RgbdSample) -> (Tensor<T>, Tensor<T>) {
    let shape = [sample.height(), sample.width()];
    let gt = Tensor::from_fn(&shape, |i| T::from_f64_lossy(sample.gt_depth[i] as f64));
    let mask = Tensor::from_fn(&shape, |i| if sample.mask[i] != 0 { T::one() } else { T::zero() });
    (gt, mask)
}

/// Loss and parameter gradients for one sample. A sample without
/// transparent pixels contributes only its all-pixel term.
pub fn sample_gradients<T: Element>(
    net: &TodeNet<T>,
    sample: &RgbdSample,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let cfg = net.config();
    let input = prepare_input::<T>(sample, cfg)?;
    let (gt, mask) = targets::<T>(sample);
    let loss_cfg =
        if sample.masked_count() == 0 { LossConfig { alpha_masked: 0.0, ..*loss_cfg } } else { *loss_cfg };
    let mut tape = Tape::new();
    let pv = net.params().register(&mut tape);
    let x = tape.constant(input);
    let y = net.forward(&mut tape, &pv, x)?;
    let pred = tape.scale(y, T::from_f64_lossy(cfg.max_depth));
    let gt = tape.constant(gt);
    let loss = final_loss(&mut tape, pred, gt, &mask, &loss_cfg)?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    Ok((value, pv.vars().iter().map(|&v| tape.grad(v)).collect()))
}

/// Mean loss and mean gradient over `samples`, accumulated in order.
pub fn batch_gradients<T: Element>(
    net: &TodeNet<T>,
    samples: &[RgbdSample],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_sample: Vec<Result<(f64, Vec<Tensor<T>>)>> = if threads <= 1 {
        samples.iter().map(|s| sample_gradients(net, s, loss_cfg)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
        pool.install(|| samples.par_iter().map(|s| sample_gradients(net, s, loss_cfg)).collect())
    };
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor<T>>> = None;
    for (k, r) in per_sample.into_iter().enumerate() {
        let (loss, grads) = r?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss} on batch sample {k}")));
        }
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a = *a + g);
                }
            }
        }
    }
    let n = samples.len() as f64;
    let inv = T::from_f64_lossy(1.0 / n);
    let mut grads = sum.expect("nonempty batch");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((total / n, grads))
}

/// Deterministic seed for one (purpose, a, b) slot of a run.
fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    let mut h = DefaultHasher::new();
    (seed, purpose, a, b).hash(&mut h);
    h.finish()
}

fn content_key(s: &RgbdSample) -> u64 {
    let mut h = DefaultHasher::new();
    (s.height(), s.width()).hash(&mut h);
    s.rgb.hash(&mut h);
    s.mask.hash(&mut h);
    for d in s.raw_depth.iter().chain(&s.gt_depth) {
        d.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Owns the network and optimizer state across steps.
pub struct Trainer {
    pub net: TodeNet<f32>,
    pub state: OptimizerState<f32>,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
}

impl Trainer {
    pub fn new(net: TodeNet<f32>, train_cfg: TrainConfig, loss_cfg: LossConfig) -> Result<Self> {
        train_cfg.validate()?;
        loss_cfg.validate()?;
        let state = OptimizerState::new(net.params().tensors());
        Ok(Self { net, state, train_cfg, loss_cfg })
    }

    /// One optimizer step on `batch`; returns the pre-update mean loss.
    pub fn step(&mut self, batch: &[RgbdSample], lr: f64) -> Result<f64> {
        let (loss, grads) = batch_gradients(&self.net, batch, &self.loss_cfg, self.train_cfg.threads)?;
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        adamw_step(self.net.params_mut().tensors_mut(), &grads, &mut self.state, lr, self.train_cfg.weight_decay)?;
        Ok(loss)
    }

    /// Runs the configured epochs. Samples are first put in a canonical
    /// content order, so the result does not depend on dataset order.
    pub fn fit(&mut self, dataset: &[RgbdSample], mut on_step: impl FnMut(&StepRecord)) -> Result<LossHistory> {
        if dataset.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let keys: Vec<u64> = dataset.iter().map(content_key).collect();
        order.sort_by_key(|&i| keys[i]);
        let cfg = self.train_cfg.clone();
        let mut history = LossHistory::default();
        let mut step = 0usize;
        'epochs: for epoch in 0..cfg.epochs {
            let lr = lr_at(epoch, &cfg);
            let mut perm = order.clone();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64, 0)));
            for chunk in perm.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    break 'epochs;
                }
                let batch: Vec<RgbdSample> = chunk
                    .iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        if cfg.augment {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, step as u64, slot as u64));
                            augment(&dataset[i], &mut rng)
                        } else {
                            dataset[i].clone()
                        }
                    })
                    .collect();
                let loss = self.step(&batch, lr).map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("step {} (epoch {epoch}): {msg}", step + 1)),
                    other => other,
                })?;
                step += 1;
                let record = StepRecord { step, epoch, loss };
                on_step(&record);
                history.records.push(record);
            }
        }
        Ok(history)
    }
}

/// Builds a model (seeded by the training seed) and trains it.
pub fn train(
    dataset: &[RgbdSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(TodeNet<f32>, LossHistory)> {
    let net = TodeNet::new(model_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(net, train_cfg.clone(), *loss_cfg)?;
    let history = trainer.fit(dataset, |_| {})?;
    Ok((trainer.net, history))
}
