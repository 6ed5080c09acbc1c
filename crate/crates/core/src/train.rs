//! Training loop: Adam on fresh batches every iteration, with periodic
//! held-out evaluation under each configured shift.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ActivationSource, ActivationStats};
use crate::rulegen::{sample_batch, sample_batch_weighted, Family, Mode, Shift, TaskSpec};
use crate::seed;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::zoo::{Level, Model};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Samples per evaluation forward pass.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; only allowed for RNN runs.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub mode: Mode,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Shifts evaluated at every checkpoint; the first is reported as in-distribution.
    pub shifts: Vec<Shift>,
}

impl TrainConfig {
    /// Desk-scale defaults for a family.
    pub fn for_family(family: Family, mode: Mode) -> Self {
        TrainConfig {
            iterations: if family == Family::Mlp { 20_000 } else { 50_000 },
            batch_size: 256,
            learning_rate: 1e-4,
            clip_norm: (family == Family::Rnn).then_some(1.0),
            mode,
            eval_every: 1000,
            eval_samples: 10_000,
            shifts: Shift::standard_set(family),
        }
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return bad("iterations, eval_every and eval_samples must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be a non-negative number, got {}", self.learning_rate));
        }
        match self.clip_norm {
            Some(c) if family != Family::Rnn => return bad(format!("gradient clipping ({c}) is only used for RNN runs")),
            Some(c) if c.is_nan() || c <= 0.0 => return bad(format!("clip_norm must be positive, got {c}")),
            _ => {}
        }
        if self.shifts.is_empty() {
            return bad("at least one evaluation shift is required".into());
        }
        for s in &self.shifts {
            s.validate(family).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Mean binary cross-entropy on logits, or mean absolute error.
pub fn loss(tape: &mut Tape, mode: Mode, predictions: Var, labels: &[f64]) -> Result<Var> {
    let shape = tape.shape(predictions).to_vec();
    if shape != [labels.len()] {
        return Err(Error::shape("loss", format!("predictions {shape:?} vs {} labels", labels.len())));
    }
    if !tape.value(predictions).all_finite() {
        return Err(Error::domain("loss", "non-finite prediction"));
    }
    let y = tape.constant(Tensor::vector(labels.to_vec()));
    match mode {
        Mode::Classification => {
            // softplus(z) - y z == -[y log s(z) + (1 - y) log(1 - s(z))]
            let sp = tape.softplus(predictions);
            let yz = tape.mul(y, predictions)?;
            let per = tape.sub(sp, yz)?;
            Ok(tape.mean(per))
        }
        Mode::Regression => {
            let d = tape.sub(predictions, y)?;
            let a = tape.abs(d);
            Ok(tape.mean(a))
        }
    }
}

/// Plain-value version of [`loss`].
pub fn loss_value(mode: Mode, predictions: &[f64], labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(predictions.to_vec()));
    let l = loss(&mut tape, mode, p, labels)?;
    Ok(tape.value(l).data()[0])
}

/// One bias-corrected Adam step on every parameter, in place.
pub fn adam_step(store: &mut ParamStore, learning_rate: f64) {
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            p.first_moment[i] = ADAM_BETA1 * p.first_moment[i] + (1.0 - ADAM_BETA1) * g;
            p.second_moment[i] = ADAM_BETA2 * p.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = p.first_moment[i] / c1;
            let v_hat = p.second_moment[i] / c2;
            values[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied factor (1 when no clipping happened).
pub fn clip_gradient_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = store.gradient_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    Ok(scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCheckpoint {
    pub iter: usize,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: f64,
    /// Performance per shift name.
    pub evals: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss at every completed iteration.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<EvalCheckpoint>,
    pub diverged: Option<Divergence>,
}

impl TrainLog {
    pub fn final_checkpoint(&self) -> Option<&EvalCheckpoint> {
        self.checkpoints.last()
    }

    /// One checkpoint per line: `{iter, train_loss, evals}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for c in &self.checkpoints {
            writeln!(out, "{}", serde_json::to_string(c)?)?;
        }
        Ok(())
    }
}

/// Seed of the held-out evaluation set for `shift` of a task.
pub fn eval_seed(task_seed: u64, shift: Shift) -> u64 {
    seed::derive(task_seed, &[seed::DOMAIN_EVAL, seed::hash_str(&shift.name())])
}

fn check_family(model: &Model, task: &TaskSpec) -> Result<()> {
    if model.config.family != task.family() || model.config.rules != task.rules {
        return Err(Error::invalid(format!(
            "model is {} with R={}, task is {} with R={}",
            model.config.family,
            model.config.rules,
            task.family(),
            task.rules
        )));
    }
    Ok(())
}

/// Trains `model` in place. The batch at iteration `i` is drawn from
/// `data_seed(task.seed, i)`; the model's own seed fixes the initialization
/// and any gate randomness, so the trajectory is a pure function of both.
///
/// Divergence stops training early and is reported in the log, not as an error.
pub fn train(model: &mut Model, task: &TaskSpec, config: &TrainConfig) -> Result<TrainLog> {
    check_family(model, task)?;
    config.validate(task.family())?;
    let mut log = TrainLog { losses: Vec::with_capacity(config.iterations), ..TrainLog::default() };
    let mut window = 0.0;
    let mut window_len = 0usize;
    for iter in 0..config.iterations {
        let batch = sample_batch(task, config.batch_size, config.mode, Shift::InDistribution, seed::data_seed(task.seed, iter as u64))?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch)?;
        let l = match loss(&mut tape, config.mode, out.prediction, &batch.labels) {
            Ok(l) => l,
            Err(Error::Domain { detail, .. }) => {
                log.diverged = Some(Divergence { iteration: iter, detail });
                break;
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(l).data()[0];
        if !value.is_finite() {
            log.diverged = Some(Divergence { iteration: iter, detail: format!("loss is {value}") });
            break;
        }
        model.store.zero_gradients();
        tape.backward_into(l, &mut model.store)?;
        if let Some(c) = config.clip_norm {
            clip_gradient_norm(&mut model.store, c)?;
        }
        adam_step(&mut model.store, config.learning_rate);
        log.losses.push(value);
        window += value;
        window_len += 1;

        let done = iter + 1;
        if done % config.eval_every == 0 || done == config.iterations {
            let mut evals = BTreeMap::new();
            for &shift in &config.shifts {
                let (perf, _) = evaluate(model, task, config.mode, shift, config.eval_samples, eval_seed(task.seed, shift))?;
                evals.insert(shift.name(), perf);
            }
            log.checkpoints.push(EvalCheckpoint { iter: done, train_loss: window / window_len as f64, evals });
            log::debug!("iter {done}: train loss {:.5}", window / window_len as f64);
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(log)
}

/// Error rate (classification, logit > 0) or mean absolute error
/// (regression) over `n_samples` held-out samples, plus their activation
/// statistics. Never touches parameters.
pub fn evaluate(
    model: &Model,
    task: &TaskSpec,
    mode: Mode,
    shift: Shift,
    n_samples: usize,
    eval_seed: u64,
) -> Result<(f64, ActivationStats)> {
    check_family(model, task)?;
    if n_samples == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut stats = ActivationStats::new(task.rules);
    let mut total = 0.0;
    let mut points = 0usize;
    let mut done = 0;
    let mut chunk = 0u64;
    while done < n_samples {
        let size = EVAL_CHUNK.min(n_samples - done);
        let batch = sample_batch(task, size, mode, shift, seed::derive(eval_seed, &[chunk]))?;
        let (pred, acts) = model.predict(&batch)?;
        for (p, (&y, &label)) in pred.iter().zip(batch.targets.iter().zip(&batch.labels)) {
            total += match mode {
                Mode::Classification => f64::from((*p > 0.0) != (label > 0.5)),
                Mode::Regression => (p - y).abs(),
            };
        }
        points += pred.len();
        stats.accumulate(&batch.rule_ids, &acts)?;
        done += size;
        chunk += 1;
    }
    Ok((total / points as f64, stats))
}

/// Feeds a trained model batches whose rule ids follow a requested distribution.
pub struct ModelActivations<'a> {
    pub model: &'a Model,
    pub task: &'a TaskSpec,
    pub mode: Mode,
    pub shift: Shift,
}

impl<'a> ModelActivations<'a> {
    pub fn new(model: &'a Model, task: &'a TaskSpec, mode: Mode) -> Result<Self> {
        if model.level() == Level::Monolithic {
            return Err(Error::invalid("adaptation is undefined for monolithic models"));
        }
        check_family(model, task)?;
        Ok(ModelActivations { model, task, mode, shift: Shift::InDistribution })
    }
}

impl ActivationSource for ModelActivations<'_> {
    fn rules(&self) -> usize {
        self.task.rules
    }

    fn activations(&mut self, rule_probs: &[f64], samples: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut ids = Vec::new();
        let mut acts = Vec::new();
        let mut done = 0;
        let mut chunk = 0u64;
        while done < samples {
            let size = EVAL_CHUNK.min(samples - done);
            let batch = sample_batch_weighted(self.task, size, self.mode, self.shift, seed::derive(seed, &[chunk]), Some(rule_probs))?;
            let (_, a) = self.model.predict(&batch)?;
            ids.extend_from_slice(&batch.rule_ids);
            acts.extend(a);
            done += size;
            chunk += 1;
        }
        Ok((ids, acts))
    }
}
