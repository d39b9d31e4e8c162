//! Supervised training: MSE on the restored image, Adam, per-step cosine
//! learning rate, seeded shuffling and resumable checkpoints.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{derive_seed, Corpus, Record};
use crate::error::{Error, Result};
use crate::evaluation::psnr;
use crate::gray::ImageGray;
use crate::model::{Checkpoint, Model};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Keep a numbered checkpoint every this many epochs (0: only `last.ckpt`).
    pub checkpoint_every: usize,
    /// Share of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            lr_init: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            val_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    /// Large-scale protocol: batch 128 for 100 epochs.
    pub fn full() -> Self {
        Self {
            batch_size: 128,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::config(
                "lr_min",
                format!(
                    "need 0 <= lr_min < lr_init, got {} and {}",
                    self.lr_min, self.lr_init
                ),
            ));
        }
        for (f, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(f, format!("{b} outside [0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(
                "val_fraction",
                format!("{} outside [0, 1)", self.val_fraction),
            ));
        }
        Ok(())
    }
}

/// Mean squared difference over every element.
pub fn mse_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "mse_loss",
            "shape",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2`, held
/// at `lr_min` past the end.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Bias-corrected Adam. Moments are indexed like the store's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one, eps) = (T::one(), T::c(self.eps));
        let c1 = T::c(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::c(lr);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let mi = &mut m.data_mut()[i];
                let vi = &mut v.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * g[i];
                *vi = b2 * *vi + (one - b2) * g[i] * g[i];
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Degraded input and clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: ImageGray,
    pub clean: ImageGray,
}

impl From<&Record> for Pair {
    fn from(r: &Record) -> Self {
        Self {
            degraded: r.degraded.clone(),
            clean: r.clean.clone(),
        }
    }
}

/// The last `ceil(fraction * n)` records (at least one when the fraction is
/// positive) are held out; the rest train.
pub fn split_validation(corpus: &Corpus, fraction: f64) -> (Vec<Pair>, Vec<Pair>) {
    let n = corpus.records.len();
    let k = if fraction > 0.0 {
        ((fraction * n as f64).ceil() as usize).clamp(1, n)
    } else {
        0
    };
    let pairs: Vec<Pair> = corpus.records.iter().map(Pair::from).collect();
    let val = pairs[n - k..].to_vec();
    let mut train = pairs;
    train.truncate(n - k);
    (train, val)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Mean PSNR of the clamped restorations; NaN without a validation set.
    pub val_psnr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,val_psnr";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6e},{:.8},{:.4}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_psnr
        )
    }
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for l in log {
        let _ = writeln!(s, "{}", l.csv_line());
    }
    s
}

/// Optimizer progress carried across a resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam<f32>,
}

impl TrainState {
    pub fn fresh(model: &Model<f32>, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            adam: Adam::new(model.store(), cfg.beta1, cfg.beta2, cfg.eps),
        }
    }

    /// Checkpoint holding the model, the moments as `adam.m.<param>` /
    /// `adam.v.<param>` and the progress counters.
    pub fn to_checkpoint(&self, model: &Model<f32>, cfg: &TrainConfig) -> Checkpoint {
        let meta = vec![
            ("epoch".to_string(), self.epoch.to_string()),
            ("step".to_string(), self.adam.t.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("epochs".to_string(), cfg.epochs.to_string()),
            ("batch_size".to_string(), cfg.batch_size.to_string()),
        ];
        let mut ck = model.to_checkpoint(meta);
        for (p, (m, v)) in model
            .store()
            .params()
            .iter()
            .zip(self.adam.m.iter().zip(&self.adam.v))
        {
            ck.tensors.push((format!("adam.m.{}", p.name), m.clone()));
            ck.tensors.push((format!("adam.v.{}", p.name), v.clone()));
        }
        ck
    }

    /// Rebuilds model and optimizer state. Moments absent from the
    /// checkpoint (a plain model file) start at zero with the step count 0.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<(Model<f32>, Self)> {
        let model = Model::<f32>::from_checkpoint(ck)?;
        let mut adam = Adam::new(model.store(), cfg.beta1, cfg.beta2, cfg.eps);
        let num = |k: &str| -> Result<u64> {
            ck.meta(k)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|e| Error::format(format!("train.{k}"), e.to_string()))
                })
                .unwrap_or(Ok(0))
        };
        let epoch = num("epoch")? as usize;
        adam.t = num("step")?;
        if ck.meta("seed").is_some_and(|s| s != cfg.seed.to_string()) {
            log::warn!(
                "resuming with seed {} over a run started with {}",
                cfg.seed,
                ck.meta("seed").unwrap_or("")
            );
        }
        for (i, p) in model.store().params().iter().enumerate() {
            for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let name = format!("adam.{kind}.{}", p.name);
                match ck.tensor(&name) {
                    Some(t) if t.shape() == dst.shape() => *dst = t.clone(),
                    Some(t) => {
                        return Err(Error::format(
                            name,
                            format!("shape {:?} vs {:?}", t.shape(), dst.shape()),
                        ));
                    }
                    None if adam.t > 0 => {
                        return Err(Error::format(name, "missing optimizer moment"))
                    }
                    None => {}
                }
            }
        }
        Ok((model, Self { epoch, adam }))
    }
}

fn batch_tensors(pairs: &[Pair], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let deg: Vec<&ImageGray> = idx.iter().map(|&i| &pairs[i].degraded).collect();
    let cln: Vec<&ImageGray> = idx.iter().map(|&i| &pairs[i].clean).collect();
    Ok((ImageGray::stack(&deg)?, ImageGray::stack(&cln)?))
}

/// Mean PSNR of clamped restorations over `pairs`, in inference mode.
pub fn validate(model: &Model<f32>, pairs: &[Pair], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors(pairs, chunk)?;
        let out = model.predict(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let restored = ImageGray::from_tensor(&out, k)?.clamped();
            total += psnr(&restored, &pairs[i].clean)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Visiting order of the training set in `epoch` (0-based).
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        epoch as u64,
    )));
    p
}

/// Trains `model` from `state` until `cfg.epochs` epochs are complete.
///
/// With `out` set, writes `metrics.csv` (appending when resuming), and after
/// every epoch `last.ckpt`, plus `epoch_NNN.ckpt` every
/// `cfg.checkpoint_every` epochs. Returns the log lines of the epochs run.
pub fn train(
    model: &mut Model<f32>,
    state: &mut TrainState,
    train_set: &[Pair],
    val_set: &[Pair],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("corpus", "no training pairs"));
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        if state.epoch == 0 || !path.exists() {
            std::fs::write(&path, format!("{METRICS_HEADER}\n"))?;
        }
    }
    let mut log = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let order = epoch_permutation(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_init;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(state.adam.t, total, cfg.lr_init, cfg.lr_min);
            let (x, y) = batch_tensors(train_set, chunk)?;
            model.store_mut().zero_grad();
            let mut g = Graph::new(true);
            let xv = g.constant(x);
            let (_, restored) = model.forward(&mut g, xv)?;
            let yv = g.constant(y);
            let loss = g.mse(restored, yv)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    lr,
                });
            }
            g.backward_into(loss, model.store_mut())?;
            g.commit_buffers(model.store_mut());
            state.adam.step(model.store_mut(), lr);
            if model
                .store()
                .params()
                .iter()
                .any(|p| p.value.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    lr,
                });
            }
            loss_sum += value;
        }
        state.epoch = epoch + 1;
        let entry = EpochLog {
            epoch: epoch + 1,
            step: state.adam.t,
            lr,
            train_loss: loss_sum / per_epoch as f64,
            val_psnr: validate(model, val_set, cfg.batch_size)?,
        };
        log::info!("{}", entry.csv_line());
        if let Some(dir) = out {
            let mut f = OpenOptions::new()
                .append(true)
                .open(dir.join("metrics.csv"))?;
            writeln!(f, "{}", entry.csv_line())?;
            let ck = state.to_checkpoint(model, cfg);
            if cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every) {
                ck.save(&dir.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
            }
            ck.save(&dir.join("last.ckpt"))?;
        }
        log.push(entry);
    }
    Ok(log)
}
