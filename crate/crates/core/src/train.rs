//! AdamW with a separate offset-predictor group, cosine schedule, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::checkpoint;
use crate::data::Dataset;
use crate::dtm::OFFSET_SEGMENT;
use crate::error::{LitError, Result};
use crate::model::{LitModel, ModelConfig};
use crate::nn::apply_buffer_updates;
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::{Real, Tensor};

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub offset_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, offset_lr: 1e-5, weight_decay: 5e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub params: Vec<String>,
}

/// Moments and step count for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub groups: Vec<ParamGroup>,
    pub m: IndexMap<String, Vec<F>>,
    pub v: IndexMap<String, Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    /// Group `default` holds every trainable parameter except those whose name contains
    /// `.offset.`, which form group `offset`.
    pub fn new(store: &ParamStore<F>, config: AdamWConfig) -> Self {
        let mut default = Vec::new();
        let mut offset = Vec::new();
        let mut m = IndexMap::new();
        for (name, t) in store.iter().filter(|(_, t)| t.requires_grad) {
            if name.contains(OFFSET_SEGMENT) {
                offset.push(name.to_string());
            } else {
                default.push(name.to_string());
            }
            m.insert(name.to_string(), vec![F::ZERO; t.numel()]);
        }
        let v = m.clone();
        OptimizerState {
            config,
            step: 0,
            groups: vec![
                ParamGroup {
                    name: "default".into(),
                    lr: config.lr,
                    weight_decay: config.weight_decay,
                    params: default,
                },
                ParamGroup {
                    name: "offset".into(),
                    lr: config.offset_lr,
                    weight_decay: config.weight_decay,
                    params: offset,
                },
            ],
            m,
            v,
        }
    }

    /// One AdamW update. Each group's learning rate is its base rate times `lr_factor`.
    /// Parameters without an entry in `grads` are treated as having zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &IndexMap<String, Vec<F>>, lr_factor: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let eps = F::from_f64(c.eps);
        for g in &self.groups {
            let lr = g.lr * lr_factor;
            let decay = F::from_f64(1.0 - lr * g.weight_decay);
            let step_size = F::from_f64(lr / bc1);
            let inv_bc2_sqrt = F::from_f64(1.0 / bc2.sqrt());
            for name in &g.params {
                let p = store.get_mut(name)?;
                let grad = grads.get(name);
                let m = self.m.get_mut(name).expect("moment per parameter");
                let v = self.v.get_mut(name).expect("moment per parameter");
                let mut next = p.data().to_vec();
                for i in 0..next.len() {
                    let gi = grad.map_or(F::ZERO, |g| g[i]);
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                    next[i] = next[i] * decay - step_size * m[i] / denom;
                }
                if !next.iter().all(|x| x.is_finite()) {
                    return Err(LitError::NonFinite { op: "adamw" });
                }
                p.data_mut().copy_from_slice(&next);
            }
        }
        Ok(())
    }

    /// Named tensors for checkpointing (`optim.step`, `optim.m.*`, `optim.v.*`).
    pub fn to_tensors(&self, store: &ParamStore<F>) -> Result<Vec<(String, Tensor<F>)>> {
        let mut out = vec![("optim.step".to_string(), Tensor::scalar(F::from_f64(self.step as f64)))];
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, vals) in moments {
                let shape = store.get(name)?.shape().to_vec();
                out.push((format!("optim.{kind}.{name}"), Tensor::new(&shape, vals.clone())?));
            }
        }
        Ok(out)
    }

    pub fn load_tensors(&mut self, tensors: &IndexMap<String, Tensor<F>>) -> Result<()> {
        let step = tensors.get("optim.step").ok_or_else(|| LitError::Format("checkpoint lacks optim.step".into()))?;
        self.step = step.data()[0].to_f64() as u64;
        for (kind, moments) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, vals) in moments.iter_mut() {
                let key = format!("optim.{kind}.{name}");
                let t = tensors.get(&key).ok_or_else(|| LitError::Format(format!("checkpoint lacks {key}")))?;
                if t.numel() != vals.len() {
                    return Err(LitError::Format(format!("{key}: {} values, expected {}", t.numel(), vals.len())));
                }
                vals.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Number of rows whose arg-max logit equals the label.
pub fn count_correct<F: Real>(logits: &[F], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if v.to_f64() > row[b].to_f64() { i } else { b });
            best == l
        })
        .count()
}

/// Forward in training mode, cross-entropy, backward, AdamW update and batch-norm statistic
/// update.
pub fn step<F: Real>(
    model: &mut LitModel<F>,
    images: &Tensor<F>,
    labels: &[usize],
    state: &mut OptimizerState<F>,
    lr_factor: f64,
) -> Result<StepOutcome> {
    let (loss, correct, grads, updates) = {
        let mut ctx = Forward::new(&model.params, Mode::Train, true);
        let x = ctx.input(images);
        let (logits, _) = model.forward_on(&mut ctx, x)?;
        let loss = ctx.tape.cross_entropy(logits, labels)?;
        ctx.backward(loss)?;
        let correct = count_correct(ctx.tape.value(logits), model.config.num_classes, labels);
        let loss = ctx.tape.value(loss)[0].to_f64();
        (loss, correct, ctx.param_grads(), std::mem::take(&mut ctx.buffer_updates))
    };
    state.apply(&mut model.params, &grads, lr_factor)?;
    apply_buffer_updates(&mut model.params, &updates)?;
    Ok(StepOutcome { loss, correct })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, batch_size: 32, optimizer: AdamWConfig::default(), warmup_frac: 0.05, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global optimizer steps completed.
    pub step: u64,
    /// Default-group learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss,train_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.9e},{:.9e},{:.6}", self.epoch, self.step, self.lr, self.loss, self.train_acc)
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Means of consecutive non-overlapping `window`-epoch blocks must never increase.
pub fn windowed_trend_non_increasing(losses: &[f64], window: usize) -> (bool, Vec<f64>) {
    let means: Vec<f64> =
        losses.chunks(window).filter(|c| c.len() == window).map(|c| c.iter().sum::<f64>() / window as f64).collect();
    (means.windows(2).all(|w| w[1] <= w[0]), means)
}

/// Deterministic training run over an in-memory dataset.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: LitModel<F>,
    pub optimizer: OptimizerState<F>,
    pub config: TrainConfig,
    pub data: Dataset,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: LitModel<F>, data: Dataset, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 || data.is_empty() {
            return Err(LitError::config("batch size and dataset must be non-empty"));
        }
        let o = &config.optimizer;
        let hyper = [
            ("lr", o.lr),
            ("offset_lr", o.offset_lr),
            ("weight_decay", o.weight_decay),
            ("warmup_frac", config.warmup_frac),
        ];
        if let Some((name, v)) = hyper.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(LitError::config(format!("{name} must be finite and non-negative, got {v}")));
        }
        if config.warmup_frac > 1.0 {
            return Err(LitError::config("warmup_frac must not exceed 1"));
        }
        if data.resolution != model.config.resolution {
            return Err(LitError::config(format!(
                "dataset resolution {} vs model resolution {}",
                data.resolution, model.config.resolution
            )));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.config.num_classes) {
            return Err(LitError::config(format!("label {bad} exceeds {} classes", model.config.num_classes)));
        }
        let optimizer = OptimizerState::new(&model.params, config.optimizer);
        Ok(Trainer { model, optimizer, config, data, epoch: 0, log: Vec::new() })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn warmup_steps(&self) -> usize {
        (self.config.warmup_frac * self.total_steps() as f64).round() as usize
    }

    /// Schedule multiplier for optimizer step `t` (1-based).
    fn lr_factor(&self, t: usize) -> f64 {
        cosine_lr(t, self.total_steps(), 1.0, self.warmup_steps())
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let order = self.data.epoch_order(self.config.seed, self.epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut factor = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let (images, labels) = self.data.batch::<F>(idx)?;
            factor = self.lr_factor(self.optimizer.step as usize + 1);
            let out = step(&mut self.model, &images, &labels, &mut self.optimizer, factor)?;
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
            seen += idx.len();
        }
        self.epoch += 1;
        let row = EpochLog {
            epoch: self.epoch,
            step: self.optimizer.step,
            lr: factor * self.config.optimizer.lr,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Eval-mode accuracy on the whole training set.
    pub fn evaluate(&self) -> Result<f64> {
        let mut correct = 0;
        let all: Vec<usize> = (0..self.data.len()).collect();
        for idx in all.chunks(64) {
            let (images, labels) = self.data.batch::<F>(idx)?;
            let logits = self.model.predict(&images)?;
            correct += count_correct(logits.data(), self.model.config.num_classes, &labels);
        }
        Ok(correct as f64 / self.data.len() as f64)
    }

    /// Model parameters, buffers, optimizer state and the epoch counter.
    pub fn checkpoint_tensors(&self) -> Result<Vec<(String, Tensor<F>)>> {
        let mut out: Vec<(String, Tensor<F>)> =
            self.model.params.iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
        out.extend(self.optimizer.to_tensors(&self.model.params)?);
        out.push(("train.epoch".into(), Tensor::scalar(F::from_f64(self.epoch as f64))));
        Ok(out)
    }

    /// Write atomically: a failed or interrupted save leaves the previous file intact.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.checkpoint_tensors()?;
        let tmp = path.with_extension("tmp");
        checkpoint::save(&tmp, tensors.iter().map(|(k, t)| (k.as_str(), t)))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuild from `(config, seed)` and restore parameters, optimizer state and epoch.
    pub fn resume(model_config: &ModelConfig, data: Dataset, config: TrainConfig, path: &Path) -> Result<Self> {
        let model = LitModel::build(model_config, config.seed)?;
        let mut trainer = Trainer::new(model, data, config)?;
        let tensors: IndexMap<String, Tensor<F>> = checkpoint::load(path)?.into_iter().collect();
        restore_params(&mut trainer.model.params, &tensors)?;
        trainer.optimizer.load_tensors(&tensors)?;
        trainer.epoch = tensors
            .get("train.epoch")
            .map(|t| t.data()[0].to_f64() as usize)
            .ok_or_else(|| LitError::Format("checkpoint lacks train.epoch".into()))?;
        Ok(trainer)
    }
}

/// Copy every model tensor from `tensors`; each one must be present with matching shape.
pub fn restore_params<F: Real>(store: &mut ParamStore<F>, tensors: &IndexMap<String, Tensor<F>>) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut values = Vec::with_capacity(names.len());
    for name in names {
        let t = tensors.get(&name).ok_or_else(|| LitError::Format(format!("checkpoint lacks {name}")))?;
        values.push((name, t.clone()));
    }
    store.load_values(values)
}
