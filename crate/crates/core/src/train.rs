//! Training loop: schedule, AdamW, batch sampling, evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Optimizer, schedule and run-length settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: usize,
    /// Validation windows per evaluation.
    pub eval_windows: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            batch_size: 16,
            block_size: 256,
            lr_max: 6e-4,
            lr_min: 6e-5,
            warmup_iters: 200,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 100,
            eval_windows: 32,
            seed: 1337,
            dataset: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.max_iters == 0 || self.batch_size == 0 || self.block_size == 0 {
            return fail("max_iters, batch_size and block_size must be positive".into());
        }
        if self.warmup_iters >= self.max_iters {
            return fail(format!("warmup_iters {} >= max_iters {}", self.warmup_iters, self.max_iters));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.eval_interval == 0 || self.eval_windows == 0 {
            return fail("eval_interval and eval_windows must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at `step`: `lr_max·(s+1)/warmup` during warmup, cosine
/// decay to `lr_min` at `max_iters`, `lr_min` afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr_max * (step + 1) as f64 / cfg.warmup_iters as f64;
    }
    if step >= cfg.max_iters {
        return cfg.lr_min;
    }
    let progress = (step - cfg.warmup_iters) as f64 / (cfg.max_iters - cfg.warmup_iters) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr_min + cosine * (cfg.lr_max - cfg.lr_min)
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping; a non-finite norm is returned untouched.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && max_norm > 0.0 && norm > max_norm {
        let c = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = *g * c;
        }
    }
    norm
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected AdamW step with decoupled weight decay on the
/// parameters whose role decays.
pub fn adamw_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if let Some((p, _)) = params.iter().zip(grads).find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence {
            step: state.step as usize,
            detail: format!("non-finite gradient in {}", p.name),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.role.decays() { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            *w = T::of(w.as_f64() * decay - lr * update);
        }
    }
    Ok(())
}

/// Draws `batch` random windows of `block + 1` tokens; returns flattened
/// inputs and next-token targets.
pub fn sample_batch(tokens: &[u16], batch: usize, block: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if tokens.len() <= block {
        return Err(Error::Data(format!("{} tokens cannot fill a window of {}", tokens.len(), block + 1)));
    }
    let span = (tokens.len() - block) as u64;
    let mut x = Vec::with_capacity(batch * block);
    let mut y = Vec::with_capacity(batch * block);
    for _ in 0..batch {
        let o = rng.below(span) as usize;
        x.extend(tokens[o..o + block].iter().map(|&t| t as usize));
        y.extend(tokens[o + 1..o + block + 1].iter().map(|&t| t as usize));
    }
    Ok((x, y))
}

const EVAL_GROUP: usize = 8;

/// Mean next-token NLL over up to `n_windows` consecutive, non-overlapping
/// windows of `block` tokens taken from the start of `tokens`.
pub fn eval_loss<T: Scalar>(model: &Model<T>, tokens: &[u16], block: usize, n_windows: usize) -> Result<f64> {
    if block == 0 || tokens.len() < block + 1 {
        return Err(Error::Data(format!("{} tokens cannot fill one window of {}", tokens.len(), block + 1)));
    }
    let available = (tokens.len() - 1) / block;
    let windows = available.min(n_windows.max(1));
    let mut total = 0.0;
    let mut w = 0;
    while w < windows {
        let g = EVAL_GROUP.min(windows - w);
        let mut x = Vec::with_capacity(g * block);
        let mut y = Vec::with_capacity(g * block);
        for k in w..w + g {
            let o = k * block;
            x.extend(tokens[o..o + block].iter().map(|&t| t as usize));
            y.extend(tokens[o + 1..o + block + 1].iter().map(|&t| t as usize));
        }
        total += model.loss(&x, &y, g)?.as_f64() * g as f64;
        w += g;
    }
    Ok(total / windows as f64)
}

pub fn perplexity(nll: f64) -> f64 {
    nll.exp()
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// `train` (batch loss) or `val`.
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "step,split,loss,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.step, r.split, r.loss, r.lr, r.seconds);
        }
        s
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &LogRecord> + '_ {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Mean training loss over steps in `lo..=hi`.
    pub fn mean_train_loss(&self, lo: usize, hi: usize) -> Option<f64> {
        let xs: Vec<f64> = self.split("train").filter(|r| (lo..=hi).contains(&r.step)).map(|r| r.loss).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Outcome of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: TrainingLog,
    pub final_val_loss: f64,
}

/// Trains `model` in place following `run.train`.
///
/// When `out` is given, `ckpt.bin` is rewritten at every evaluation and at
/// the end, and `loss.csv` is written on exit (including on divergence, in
/// which case the last good checkpoint is left on disk). `on_log` sees every
/// record as it is produced.
pub fn train_run(
    model: &mut Model<f32>,
    run: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<RunOutput> {
    let cfg = &run.train;
    cfg.validate()?;
    if cfg.block_size > model.config().block_size {
        return Err(Error::Config(format!(
            "train block_size {} exceeds model block_size {}",
            cfg.block_size,
            model.config().block_size
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = Instant::now();
    let mut rng = Rng::derive(cfg.seed, 0x6261_7463_68);
    let mut state = AdamState::new(model.params());
    let mut log = TrainingLog::default();
    let mut final_val = f64::NAN;

    let result = (|| -> Result<()> {
        for step in 0..=cfg.max_iters {
            let lr = lr_at(step, cfg);
            if step % cfg.eval_interval == 0 || step == cfg.max_iters {
                let val = eval_loss(model, &data.val, cfg.block_size, cfg.eval_windows)?;
                if !val.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("validation loss {val}"),
                    });
                }
                final_val = val;
                let rec = LogRecord {
                    step,
                    split: "val".into(),
                    loss: val,
                    lr,
                    seconds: started.elapsed().as_secs_f64(),
                };
                on_log(&rec);
                log.records.push(rec);
                if let Some(dir) = out {
                    checkpoint::save(&dir.join("ckpt.bin"), model, run, step)?;
                }
            }
            if step == cfg.max_iters {
                break;
            }
            let (x, y) = sample_batch(&data.train, cfg.batch_size, cfg.block_size, &mut rng)?;
            let (loss, mut grads) = model.loss_and_grads(&x, &y, cfg.batch_size)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("training loss {loss}"),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adamw_step(model.params_mut(), &grads, &mut state, lr, cfg).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step, detail },
                other => other,
            })?;
            let rec = LogRecord {
                step,
                split: "train".into(),
                loss,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_log(&rec);
            log.records.push(rec);
        }
        Ok(())
    })();

    if let Some(dir) = out {
        let p = dir.join("loss.csv");
        fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    result?;
    Ok(RunOutput {
        log,
        final_val_loss: final_val,
    })
}
