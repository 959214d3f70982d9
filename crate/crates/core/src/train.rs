//! Stochastic training and evaluation of [`MinnModel`]s over random channel
//! realizations.

use crate::channel::{noise_power, ChannelRealization, ChannelSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::minn::{block_power, ChannelBatch, Link, MinnModel, Noise, PowerMode};
use crate::par::{self, Execution};
use crate::tensor::{Data, Tape, Tensor, Var};
use crate::wave::argmax;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub snr_db: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the transmit-power penalty (soft power mode).
    pub gamma: f64,
    /// Epochs over which the penalty weight ramps linearly up from zero;
    /// 0 applies the full `gamma` from the first step.
    pub gamma_warmup: usize,
    /// SNR stages trained in order; empty means one stage at the channel's SNR.
    pub snr_schedule: Vec<Stage>,
    /// Learning-rate factor applied at each new stage.
    pub stage_decay: f64,
    /// Reuse a single channel realization for every sample.
    pub static_fading: bool,
    pub seed: u64,
    pub loss: LossKind,
    /// Independent gradient shards per batch, evaluated in parallel and
    /// summed in order.
    pub grad_shards: usize,
    /// Channel draws per test sample during evaluation.
    pub eval_realizations: usize,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-2,
            momentum: 0.9,
            gamma: 0.0,
            gamma_warmup: 0,
            snr_schedule: vec![],
            stage_decay: 0.5,
            static_fading: false,
            seed: 0,
            loss: LossKind::CrossEntropy,
            grad_shards: 1,
            eval_realizations: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_shards == 0 || self.eval_realizations == 0 {
            return Err(Error::Config("epochs, batch_size, grad_shards and eval_realizations must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.gamma >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate and gamma must be ≥ 0, momentum in [0, 1)".into()));
        }
        if self.snr_schedule.iter().any(|s| s.epochs == 0 || s.snr_db.is_nan()) {
            return Err(Error::Config("schedule stages need ≥ 1 epoch and a valid SNR".into()));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub tx_power: f64,
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        let mut buf = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        buf.flush()?;
        String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Independent generator for sub-task `k` of a seeded computation.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Mean cross-entropy over class indices, or mean squared error against
/// one-hot targets.
pub fn task_loss(tape: &mut Tape, logits: Var, targets: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.cross_entropy(logits, targets),
        LossKind::Mse => {
            let shape = tape.shape(logits).to_vec();
            let [b, c] = shape[..] else {
                return Err(Error::shape("task_loss", &shape, &[targets.len()]));
            };
            if targets.len() != b {
                return Err(Error::shape("task_loss", &shape, &[targets.len()]));
            }
            let mut y = vec![0.0; b * c];
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(Error::Range(format!("class index {t} outside 0..{c}")));
                }
                y[i * c + t] = 1.0;
            }
            tape.mse(logits, &Tensor::real(&[b, c], y)?)
        }
    }
}

/// `gamma · mean_b ‖s_b‖²` over a `[batch, ...]` signal.
pub fn power_penalty(tape: &mut Tape, s: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let b = tape.shape(s).first().copied().unwrap_or(1).max(1);
    let p = tape.abs2(s)?;
    let total = tape.sum(p)?;
    tape.scale(total, gamma / b as f64)
}

/// Channel state shared by training and evaluation: the sampler, the pinned
/// realization under static fading, and the calibrated reference power.
#[derive(Clone, Debug)]
pub struct ChannelContext {
    pub sampler: ChannelSampler,
    pub pinned: Option<ChannelRealization>,
    pub ref_power: f64,
    pub snr_db: f64,
}

impl ChannelContext {
    /// Builds the sampler, pins a realization when `static_fading`, and
    /// calibrates the noise level at the channel's configured SNR.
    pub fn new(model: &MinnModel, static_fading: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sampler = model.sampler()?;
        let pinned = if static_fading && model.cfg.link != Link::Bypass {
            Some(model.draw(&mut sampler, rng)?)
        } else {
            None
        };
        let ref_power = model.calibrate_noise(&mut sampler, pinned.as_ref(), rng)?;
        let mut ctx = ChannelContext {
            sampler,
            pinned,
            ref_power,
            snr_db: model.channel.snr_db,
        };
        ctx.set_snr(model.channel.snr_db);
        Ok(ctx)
    }

    pub fn set_snr(&mut self, snr_db: f64) {
        let sigma2 = if self.ref_power > 0.0 { noise_power(self.ref_power, snr_db) } else { 0.0 };
        self.snr_db = snr_db;
        self.sampler.set_noise_sigma2(sigma2);
        if let Some(p) = &mut self.pinned {
            p.noise_sigma2 = sigma2;
        }
    }

    /// Channel for `n` samples: the pinned realization, or `n` fresh draws.
    pub fn batch(&mut self, model: &MinnModel, n: usize, rng: &mut ChaCha8Rng) -> Result<Option<ChannelBatch>> {
        if model.cfg.link == Link::Bypass {
            return Ok(None);
        }
        if let Some(p) = &self.pinned {
            return Ok(Some(ChannelBatch::shared(p)));
        }
        let rs = (0..n).map(|_| model.draw(&mut self.sampler, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Some(ChannelBatch::stacked(&rs)?))
    }
}

struct ShardResult {
    loss: f64,
    grads: Vec<Tensor>,
    power: f64,
}

fn shard_pass(
    model: &MinnModel,
    x: &Tensor,
    y: &[usize],
    ch: Option<&ChannelBatch>,
    weight: f64,
    gamma: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ShardResult> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let f = model.forward(&mut tape, &vars, x, ch, Noise::Sample(rng))?;
    let mut loss = task_loss(&mut tape, f.logits, y, cfg.loss)?;
    if model.cfg.power == PowerMode::SoftPenalty && gamma > 0.0 {
        let pen = power_penalty(&mut tape, f.signal, gamma)?;
        loss = tape.add(loss, pen)?;
    }
    let total = tape.value(loss).item()?;
    let power = block_power(tape.value(f.signal)).iter().sum();
    let loss_w = tape.scale(loss, weight)?;
    let mut g = tape.backward(loss_w)?;
    let grads = vars
        .iter()
        .zip(model.params.values())
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| zeros_like(p)))
        .collect();
    Ok(ShardResult { loss: total * weight, grads, power })
}

fn zeros_like(t: &Tensor) -> Tensor {
    if t.is_real() { Tensor::zeros(t.shape()) } else { Tensor::zeros_complex(t.shape()) }
}

fn axpy(acc: &mut Tensor, g: &Tensor) {
    match (acc.as_real_mut(), g.data()) {
        (Some(a), Data::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        _ => {
            let b = g.to_complex_vec();
            let a = acc.as_complex_mut().expect("complex accumulator");
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Momentum SGD state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    velocity: Vec<Tensor>,
    pub lr: f64,
    step: usize,
    epoch: usize,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &MinnModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            velocity: model.params.values().iter().map(zeros_like).collect(),
            lr: cfg.learning_rate,
            cfg,
            step: 0,
            epoch: 0,
            exec: Execution::available(),
        })
    }

    /// Penalty weight in force during 1-based epoch `epoch`.
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        let w = self.cfg.gamma_warmup;
        if w == 0 {
            self.cfg.gamma
        } else {
            self.cfg.gamma * ((epoch.saturating_sub(1)) as f64 / w as f64).min(1.0)
        }
    }

    fn apply(&mut self, model: &mut MinnModel, grads: &[Tensor]) {
        let (lr, mu) = (self.lr, self.cfg.momentum);
        for ((p, v), g) in model.params.values_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            match (p.as_real_mut(), v.as_real_mut(), g.as_real()) {
                (Some(p), Some(v), Some(g)) => {
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
                _ => {
                    let gz = g.to_complex_vec();
                    let v = v.as_complex_mut().expect("complex velocity");
                    let p = p.as_complex_mut().expect("complex parameter");
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(gz) {
                        *v = *v * mu + g;
                        *p -= *v * lr;
                    }
                }
            }
        }
    }

    /// One pass over `data` in shuffled mini-batches. Returns the mean loss
    /// and mean transmit power over the epoch.
    pub fn train_epoch(&mut self, model: &mut MinnModel, data: &Dataset, ctx: &mut ChannelContext, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        self.epoch += 1;
        let gamma = self.gamma_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let (mut loss_sum, mut power_sum) = (0.0, 0.0);
        for idx in order.chunks(self.cfg.batch_size) {
            self.step += 1;
            let shards = self.cfg.grad_shards.min(idx.len());
            let per = idx.len().div_ceil(shards);
            let parts: Vec<&[usize]> = idx.chunks(per).collect();
            let mut inputs = Vec::with_capacity(parts.len());
            for p in &parts {
                let (x, y) = data.batch(p);
                let ch = ctx.batch(model, p.len(), rng)?;
                inputs.push((x, y, ch));
            }
            let noise_seed: u64 = rng.random();
            let n = idx.len() as f64;
            let model_ref = &*model;
            let cfg = &self.cfg;
            let results = par::try_map_indexed(parts.len(), self.exec, |k| {
                let (x, y, ch) = &inputs[k];
                let mut r = stream(noise_seed, k as u64);
                shard_pass(model_ref, x, y, ch.as_ref(), y.len() as f64 / n, gamma, cfg, &mut r)
            })?;
            let mut grads: Vec<Tensor> = model.params.values().iter().map(zeros_like).collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                power_sum += r.power;
                for (a, g) in grads.iter_mut().zip(&r.grads) {
                    axpy(a, g);
                }
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss or gradient at epoch {}, step {}",
                    self.epoch, self.step
                )));
            }
            loss_sum += batch_loss * n;
            self.apply(model, &grads);
        }
        model.sync_stack()?;
        let total = data.len() as f64;
        Ok((loss_sum / total, power_sum / total))
    }

    /// Trains for `epochs` at the context's current SNR, evaluating on
    /// `test` per `eval_every`.
    pub fn run_stage(
        &mut self,
        model: &mut MinnModel,
        train: &Dataset,
        test: &Dataset,
        ctx: &mut ChannelContext,
        epochs: usize,
        rng: &mut ChaCha8Rng,
        metrics: &mut Metrics,
    ) -> Result<()> {
        for e in 0..epochs {
            let (loss, power) = self.train_epoch(model, train, ctx, rng)?;
            let last = e + 1 == epochs;
            let (accuracy, tx_power) = if last || (e + 1) % self.cfg.eval_every.max(1) == 0 {
                let seed: u64 = rng.random();
                let mut ectx = ctx.clone();
                let snr = ectx.snr_db;
                let ev = evaluate(model, test, &mut ectx, snr, self.cfg.eval_realizations, seed, self.exec)?;
                (ev.accuracy, ev.tx_power)
            } else {
                (f64::NAN, power)
            };
            metrics.rows.push(EpochMetrics {
                epoch: metrics.rows.len() + 1,
                loss,
                accuracy,
                tx_power,
                snr_db: ctx.snr_db,
                seed: self.cfg.seed,
            });
            log::debug!("epoch {} loss {loss:.4} acc {accuracy:.4} power {tx_power:.4}", metrics.rows.len());
        }
        Ok(())
    }
}

/// Accuracy and transmit power on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub tx_power: f64,
}

/// Accuracy over `data × n_realizations` with live noise at `snr_db`, and the
/// mean per-sample transmit energy. Batches run in parallel on `exec`; the
/// result depends only on `seed`.
pub fn evaluate(
    model: &MinnModel,
    data: &Dataset,
    ctx: &mut ChannelContext,
    snr_db: f64,
    n_realizations: usize,
    seed: u64,
    exec: Execution,
) -> Result<Evaluation> {
    if n_realizations == 0 {
        return Err(Error::Config("n_realizations must be ≥ 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    ctx.set_snr(snr_db);
    let mut rng = stream(seed, u64::MAX);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut jobs = Vec::new();
    for _ in 0..n_realizations {
        for chunk in idx.chunks(256) {
            let ch = ctx.batch(model, chunk.len(), &mut rng)?;
            jobs.push((chunk, ch));
        }
    }
    let results = par::try_map_indexed(jobs.len(), exec, |k| {
        let (chunk, ch) = &jobs[k];
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let mut r = stream(seed, k as u64);
        let f = model.forward(&mut tape, &vars, &x, ch.as_ref(), Noise::Sample(&mut r))?;
        let logits = tape.value(f.logits).real_values("evaluate")?;
        let c = model.classes();
        let correct = y.iter().enumerate().filter(|(i, &t)| argmax(&logits[i * c..][..c]) == t).count();
        let power: f64 = block_power(tape.value(f.signal)).iter().sum();
        Ok::<_, Error>((correct, power))
    })?;
    let total = (data.len() * n_realizations) as f64;
    let correct: usize = results.iter().map(|r| r.0).sum();
    let power: f64 = results.iter().map(|r| r.1).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / total,
        tx_power: power / total,
    })
}

/// Trains through each SNR stage in order, carrying parameters forward and
/// scaling the learning rate by `stage_decay` at every new stage.
pub fn transfer_finetune(
    model: &mut MinnModel,
    train: &Dataset,
    test: &Dataset,
    schedule: &[Stage],
    trainer: &mut Trainer,
    ctx: &mut ChannelContext,
    rng: &mut ChaCha8Rng,
) -> Result<Metrics> {
    if schedule.is_empty() {
        return Err(Error::Config("empty SNR schedule".into()));
    }
    let mut metrics = Metrics::default();
    let base = trainer.cfg.learning_rate;
    for (k, stage) in schedule.iter().enumerate() {
        trainer.lr = base * trainer.cfg.stage_decay.powi(k as i32);
        ctx.set_snr(stage.snr_db);
        trainer.run_stage(model, train, test, ctx, stage.epochs, rng, &mut metrics)?;
    }
    Ok(metrics)
}

/// Full training run from `cfg.seed`: context setup, then either the SNR
/// schedule or `cfg.epochs` at the channel's SNR.
pub fn fit(model: &mut MinnModel, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<(Metrics, ChannelContext)> {
    fit_with(model, train, test, cfg, Execution::available())
}

pub fn fit_with(
    model: &mut MinnModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(Metrics, ChannelContext)> {
    let mut rng = stream(cfg.seed, 1);
    let mut ctx = ChannelContext::new(model, cfg.static_fading, &mut rng)?;
    let mut trainer = Trainer::new(cfg.clone(), model)?;
    trainer.exec = exec;
    let schedule = if cfg.snr_schedule.is_empty() {
        vec![Stage { snr_db: model.channel.snr_db, epochs: cfg.epochs }]
    } else {
        cfg.snr_schedule.clone()
    };
    let metrics = transfer_finetune(model, train, test, &schedule, &mut trainer, &mut ctx, &mut rng)?;
    Ok((metrics, ctx))
}
