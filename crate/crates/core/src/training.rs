//! Losses, AdamW, the two-phase schedule and the epoch loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Dataset, Sampler};
use crate::error::{Error, Result};
use crate::models::{Arch, Model, ModelConfig};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// Mean squared error over one field `[H, W]`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred).len() != 2 {
        return Err(Error::dim("mse_loss", format!("expected [H,W], got {:?}", tape.shape(pred))));
    }
    tape.mse(pred, target)
}

/// Mean squared error over all variables and cells of `[N, H, W]`.
pub fn joint_mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred).len() != 3 {
        return Err(Error::dim(
            "joint_mse_loss",
            format!("expected [N,H,W], got {:?}", tape.shape(pred)),
        ));
    }
    tape.mse(pred, target)
}

/// Two-phase learning-rate schedule with weight decay tied to the rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Weight decay as a fraction of the current learning rate.
    pub wd_ratio: f64,
    /// Checkpoint cadence in epochs; `None` picks a tenth of the run.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Schedule {
    pub fn paper() -> Self {
        Schedule {
            epochs: 400,
            steps_per_epoch: 500,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            wd_ratio: 0.1,
            checkpoint_every: None,
        }
    }

    pub fn toy() -> Self {
        Schedule {
            epochs: 20,
            steps_per_epoch: 100,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            ..Self::paper()
        }
    }

    /// First epoch of the second phase (three quarters into the run).
    pub fn boundary(&self) -> usize {
        self.epochs * 3 / 4
    }

    /// `(lr, wd)` for a zero-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> Result<(f64, f64)> {
        if epoch >= self.epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let lr = if epoch < self.boundary() {
            self.lr_phase1
        } else {
            self.lr_phase2
        };
        Ok((lr, lr * self.wd_ratio))
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.epochs / 10).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be positive".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.wd_ratio < 0.0 {
            return Err(Error::Config("wd_ratio must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the accumulated gradients. Biases and normalization
    /// parameters are not decayed. Gradients are left for the caller to zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, wd: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.kind.decays() { wd } else { 0.0 };
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.to_f64();
                let mi = b1 * m.to_f64() + (1.0 - b1) * g;
                let vi = b2 * v.to_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64(mi);
                *v = T::from_f64(vi);
                let theta = x.to_f64();
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x = T::from_f64(theta * (1.0 - decay) - update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wd: f64,
}

/// A trained network with its loss history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// `arch` for multi-variable models, `single_var_<var>` otherwise.
    pub tag: String,
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub first_step_loss: f64,
    pub first_batch_mean_square: f64,
}

/// Configurations actually trained: one per variable for the single-variable
/// architecture, otherwise the configuration itself.
pub fn members(config: &ModelConfig) -> Vec<(String, ModelConfig)> {
    if config.arch == Arch::SingleVar {
        config
            .variables
            .iter()
            .map(|v| {
                let mut c = config.clone();
                c.variables = vec![v.clone()];
                (format!("single_var_{v}"), c)
            })
            .collect()
    } else {
        vec![(config.arch.key().to_string(), config.clone())]
    }
}

fn member_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Copies the channels `idx` out of a `[N, H, W]` stack.
pub fn select_channels(x: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    if idx.len() == x.shape()[0] && idx.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(x.clone());
    }
    let planes: Vec<Tensor<f32>> = idx.iter().map(|&c| x.channel(c)).collect();
    Tensor::stack(&planes)
}

/// Trains every member of `config` on the training split.
///
/// With `out`, writes `<tag>.ckpt`, `<tag>_loss.csv` and periodic
/// `checkpoints/<tag>_epochNNNN.ckpt`. `progress` is called after each epoch.
pub fn train_run(
    config: &ModelConfig,
    dataset: &Dataset,
    schedule: &Schedule,
    seed: u64,
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<TrainedModel>> {
    schedule.validate()?;
    let (hp, wp) = dataset.grid().padded();
    if (config.height, config.width) != (hp, wp) {
        return Err(Error::Config(format!(
            "model grid {}x{} does not match padded data grid {hp}x{wp}",
            config.height, config.width
        )));
    }
    let mut trained = Vec::new();
    for (i, (tag, mut member)) in members(config).into_iter().enumerate() {
        member.seed = member_seed(seed, i);
        let channels = member
            .variables
            .iter()
            .map(|v| dataset.variable_index(v))
            .collect::<Result<Vec<_>>>()?;
        let t = train_member(&tag, &member, &channels, dataset, schedule, out, &mut progress)?;
        trained.push(t);
    }
    Ok(trained)
}

fn train_member(
    tag: &str,
    config: &ModelConfig,
    channels: &[usize],
    dataset: &Dataset,
    schedule: &Schedule,
    out: Option<&Path>,
    progress: &mut impl FnMut(&str, &EpochRecord),
) -> Result<TrainedModel> {
    let mut model = Model::<f32>::build(config)?;
    let mut opt = AdamW::new(model.params());
    let mut sampler = Sampler::new(dataset.train.len(), config.seed.wrapping_add(1))?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut first: Option<(f64, f64)> = None;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..schedule.epochs {
        let (lr, wd) = schedule.lr_for_epoch(epoch)?;
        let mut total = 0.0;
        for (step, idx) in sampler.epoch(schedule.steps_per_epoch).into_iter().enumerate() {
            let sample = &dataset.train[idx];
            let input = select_channels(&sample.input, channels)?;
            let target = select_channels(&sample.target, channels)?;
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let pred = model.forward(&mut tape, x, Some(&mut dropout_rng))?;
            let y = tape.constant(target);
            let loss = joint_mse_loss(&mut tape, pred, y)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, lr });
            }
            if first.is_none() {
                let y = tape.value(y);
                let ms = y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / y.len() as f64;
                first = Some((value, ms));
            }
            total += value;
            tape.backward(loss, model.params_mut())?;
            opt.step(model.params_mut(), lr, wd)?;
            model.params_mut().zero_grads();
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / schedule.steps_per_epoch as f64,
            lr,
            wd,
        };
        progress(tag, &record);
        history.push(record);
        if let Some(dir) = &ckpt_dir {
            if (epoch + 1) % schedule.checkpoint_interval() == 0 && epoch + 1 < schedule.epochs {
                model.save(&dir.join(format!("{tag}_epoch{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(out) = out {
        model.save(&out.join(format!("{tag}.ckpt")))?;
        write_loss_csv(&out.join(format!("{tag}_loss.csv")), &history)?;
    }
    let (first_step_loss, first_batch_mean_square) = first.unwrap_or((f64::NAN, f64::NAN));
    Ok(TrainedModel {
        tag: tag.to_string(),
        model,
        history,
        first_step_loss,
        first_batch_mean_square,
    })
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,mean_loss,lr,wd\n");
    for r in history {
        writeln!(s, "{},{:.9e},{:e},{:e}", r.epoch, r.mean_loss, r.lr, r.wd).unwrap();
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

/// Path of the final checkpoint for `tag` under `out`.
pub fn checkpoint_path(out: &Path, tag: &str) -> PathBuf {
    out.join(format!("{tag}.ckpt"))
}
