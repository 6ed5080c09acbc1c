//! The model hierarchy: Monolithic, Modular, Modular-op and GT-Modular, over
//! MLP, MHA and RNN cells, plus a random-gate baseline.
//!
//! All levels share the same encoder and decoder layout. Modular levels
//! instantiate exactly `R` modules and mix their outputs as
//! `y = sum_m p_m y_m`; they differ only in where `p` comes from.

mod checkpoint;
mod layers;
mod reduce;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ManifestEntry};
pub use layers::{Attention, ContextGate, Dense, Encoder, Module};
pub use reduce::{reduce_level, REDUCTION_LOGIT_GAP};

use crate::error::{Error, Result};
use crate::rulegen::{Batch, Family, TaskSpec};
use crate::seed::{self, Rng};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use layers::{relu_stack, self_mask, ModuleOutput};

/// Position in the modularity hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    GtModular,
    ModularOp,
    Modular,
    Monolithic,
    /// Modular model whose gate draws activations uniformly from the simplex.
    RandomGate,
}

impl Level {
    /// The four hierarchy levels, in vote tie-break order.
    pub const HIERARCHY: [Level; 4] = [Level::GtModular, Level::ModularOp, Level::Modular, Level::Monolithic];

    pub fn name(self) -> &'static str {
        match self {
            Level::GtModular => "gt_modular",
            Level::ModularOp => "modular_op",
            Level::Modular => "modular",
            Level::Monolithic => "monolithic",
            Level::RandomGate => "random_gate",
        }
    }

    pub fn is_modular(self) -> bool {
        self != Level::Monolithic
    }

    pub(crate) fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gt_modular" | "gt" => Ok(Level::GtModular),
            "modular_op" | "op" => Ok(Level::ModularOp),
            "modular" => Ok(Level::Modular),
            "monolithic" => Ok(Level::Monolithic),
            "random_gate" | "random" => Ok(Level::RandomGate),
            other => Err(Error::invalid(format!("unknown model level '{other}'"))),
        }
    }
}

/// Fixed layer sizes shared by every level of one family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder_width: usize,
    /// Module output width (MLP/MHA) or carried state width (RNN).
    pub output_width: usize,
    pub head_dim: usize,
    /// Hidden width of the context gate `g`; defaults to `R`.
    #[serde(default)]
    pub gate_hidden: Option<usize>,
}

impl Architecture {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Mlp => Architecture { encoder_width: 8, output_width: 8, head_dim: 4, gate_hidden: None },
            Family::Mha => Architecture { encoder_width: 16, output_width: 16, head_dim: 4, gate_hidden: None },
            Family::Rnn => Architecture { encoder_width: 16, output_width: 32, head_dim: 4, gate_hidden: None },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level: Level,
    pub family: Family,
    pub rules: usize,
    /// Target number of trainable scalars.
    pub capacity: usize,
    /// Input width of one decision point.
    pub features: usize,
    pub arch: Architecture,
    /// Builds a Monolithic network internally as a score-gated mixture of
    /// this many sub-networks. Produced only by level reduction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_mixture: Option<usize>,
}

impl ModelConfig {
    pub fn for_task(level: Level, task: &TaskSpec, capacity: usize) -> Self {
        let family = task.family();
        ModelConfig {
            level,
            family,
            rules: task.rules,
            capacity,
            features: task.features(),
            arch: Architecture::for_family(family),
            internal_mixture: None,
        }
    }

    pub fn module_count(&self) -> usize {
        match (self.level, self.internal_mixture) {
            (Level::Monolithic, Some(k)) => k,
            (Level::Monolithic, None) => 1,
            _ => self.rules,
        }
    }

    fn scored(&self) -> bool {
        self.level == Level::Modular || (self.level == Level::Monolithic && self.internal_mixture.is_some())
    }

    /// Attention heads per module: 2 for modular levels, `2R` for monolithic.
    pub fn heads(&self) -> usize {
        if self.level == Level::Monolithic && self.internal_mixture.is_none() {
            2 * self.rules
        } else {
            2
        }
    }

    pub fn gate_hidden(&self) -> usize {
        self.arch.gate_hidden.unwrap_or(self.rules)
    }

    /// Width of the encoded decision point, including the raw one-hot context.
    pub fn encoded_width(&self) -> usize {
        match self.family {
            Family::Mlp => 3 * self.arch.encoder_width + self.rules,
            _ => self.arch.encoder_width + self.rules,
        }
    }
}

/// Where the activation vector `p` comes from.
#[derive(Clone, Debug)]
pub enum Gate {
    /// A single network; no mixing.
    Single,
    /// `p = softmax(score_m)`, each score emitted by its module's trunk.
    Scores,
    /// `p = softmax(g(c))`.
    Context(ContextGate),
    /// `p = onehot(c)`.
    GroundTruth,
    /// `p ~ Dirichlet(1)` per decision point.
    Random,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Resolved trunk width.
    pub width: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub modules: Vec<Module>,
    pub gate: Gate,
    pub decoder: Dense,
    pub gate_seed: u64,
}

/// Predictions and per-decision-point activations of one forward pass.
pub struct ForwardOutput {
    /// `[decision_points]`, sample-major.
    pub prediction: Var,
    /// `decision_points x R` activation probabilities, sample-major.
    pub activations: Vec<f64>,
    pub rule_ids: Vec<usize>,
    /// False for Monolithic, whose `activations` are a uniform placeholder.
    pub exposes_activations: bool,
}

fn one_hot(ids: &[usize], rules: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), rules]);
    let d = t.data_mut();
    for (i, &c) in ids.iter().enumerate() {
        d[i * rules + c] = 1.0;
    }
    t
}

fn mix(tape: &mut Tape, outputs: &[Var], p: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (m, &out) in outputs.iter().enumerate() {
        let pm = tape.slice_cols(p, m, m + 1)?;
        let term = tape.scale_rows(out, pm)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::invalid("no modules to mix"))
}

/// Smallest trunk width tried by [`resolve_width`].
pub const MIN_WIDTH: usize = 4;

impl Model {
    /// Builds a model at the width resolved from `config.capacity`.
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Model> {
        let width = resolve_width(config)?;
        Self::build_with_width(config, width, init_seed)
    }

    pub fn build_with_width(config: &ModelConfig, width: usize, init_seed: u64) -> Result<Model> {
        let mut rng = seed::rng(seed::derive(init_seed, &[seed::DOMAIN_INIT]));
        let mut model = Self::assemble(config, width, Some(&mut rng))?;
        model.gate_seed = seed::derive(init_seed, &[seed::DOMAIN_GATE]);
        Ok(model)
    }

    pub(crate) fn assemble(config: &ModelConfig, width: usize, mut rng: Option<&mut Rng>) -> Result<Model> {
        if config.rules < 1 {
            return Err(Error::invalid("model needs at least one rule"));
        }
        if width < 1 {
            return Err(Error::invalid("trunk width must be positive"));
        }
        let arch = &config.arch;
        let (he, r) = (arch.encoder_width, config.rules);
        let mut store = ParamStore::new();
        let mut dense = |store: &mut ParamStore, name: &str, i: usize, o: usize| Dense::new(store, name, i, o, rng.as_deref_mut());

        let encoder = match config.family {
            Family::Mlp => Encoder::Mlp {
                digit: vec![dense(&mut store, "encoder.digit.0", 1, he), dense(&mut store, "encoder.digit.1", he, he)],
                context: vec![dense(&mut store, "encoder.context.0", r, he), dense(&mut store, "encoder.context.1", he, he)],
            },
            _ => Encoder::Token {
                layers: vec![
                    dense(&mut store, "encoder.token.0", config.features + r, he),
                    dense(&mut store, "encoder.token.1", he, he),
                ],
            },
        };

        let d_h = config.encoded_width();
        let out_w = arch.output_width;
        let scored = config.scored();
        let mut modules = Vec::with_capacity(config.module_count());
        for m in 0..config.module_count() {
            let p = format!("module{m}");
            let (attention, trunk) = match config.family {
                Family::Mlp => (
                    None,
                    vec![dense(&mut store, &format!("{p}.trunk.0"), d_h, width), dense(&mut store, &format!("{p}.trunk.1"), width, width)],
                ),
                Family::Mha => {
                    let heads = config.heads();
                    let hw = heads * arch.head_dim;
                    let att = Attention {
                        query: dense(&mut store, &format!("{p}.attn.query"), d_h, hw),
                        key: dense(&mut store, &format!("{p}.attn.key"), d_h, hw),
                        value: dense(&mut store, &format!("{p}.attn.value"), d_h, hw),
                        heads,
                        head_dim: arch.head_dim,
                    };
                    (Some(att), vec![dense(&mut store, &format!("{p}.trunk.0"), hw + d_h, width)])
                }
                Family::Rnn => (None, vec![dense(&mut store, &format!("{p}.trunk.0"), out_w + d_h, width)]),
            };
            let output = dense(&mut store, &format!("{p}.output"), width, out_w);
            let score = scored.then(|| dense(&mut store, &format!("{p}.score"), width, 1));
            modules.push(Module { attention, trunk, output, score });
        }

        let gate = match config.level {
            Level::Monolithic if scored => Gate::Scores,
            Level::Monolithic => Gate::Single,
            Level::Modular => Gate::Scores,
            Level::ModularOp => {
                let gh = config.gate_hidden();
                Gate::Context(ContextGate {
                    hidden: dense(&mut store, "gate.hidden", r, gh),
                    output: dense(&mut store, "gate.output", gh, r),
                })
            }
            Level::GtModular => Gate::GroundTruth,
            Level::RandomGate => Gate::Random,
        };
        let decoder = dense(&mut store, "decoder", out_w, 1);

        Ok(Model { config: config.clone(), width, store, encoder, modules, gate, decoder, gate_seed: 0 })
    }

    pub fn level(&self) -> Level {
        self.config.level
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Parameters owned by module `m` (excludes shared encoder, gate and decoder).
    pub fn module_param_count(&self, m: usize) -> usize {
        self.modules[m].layers().iter().map(|d| d.param_count()).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        if batch.family != c.family {
            return Err(Error::invalid(format!("model family {} cannot consume a {} batch", c.family, batch.family)));
        }
        if batch.rules != c.rules || batch.features != c.features {
            return Err(Error::invalid(format!(
                "batch has R={} and {} features, model expects R={} and {}",
                batch.rules, batch.features, c.rules, c.features
            )));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, batch: &Batch, context: Var) -> Result<Var> {
        let points = batch.decision_points();
        let x = tape.constant(Tensor::matrix(points, batch.features, batch.inputs.clone())?);
        let store = &self.store;
        match &self.encoder {
            Encoder::Mlp { digit, context: ctx } => {
                let x1 = tape.slice_cols(x, 0, 1)?;
                let x2 = tape.slice_cols(x, 1, 2)?;
                let e1 = relu_stack(digit, tape, store, x1)?;
                let e2 = relu_stack(digit, tape, store, x2)?;
                let ec = relu_stack(ctx, tape, store, context)?;
                tape.concat_cols(&[e1, e2, ec, context])
            }
            Encoder::Token { layers } => {
                let xc = tape.concat_cols(&[x, context])?;
                let e = relu_stack(layers, tape, store, xc)?;
                tape.concat_cols(&[e, context])
            }
        }
    }

    fn random_activations(&self, batch: &Batch) -> Tensor {
        let r = self.config.rules;
        let mut rng = seed::rng(seed::derive(self.gate_seed, &[seed::DOMAIN_GATE, batch.seed]));
        let mut data = Vec::with_capacity(batch.decision_points() * r);
        for _ in 0..batch.decision_points() {
            let draws: Vec<f64> = (0..r).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let total: f64 = draws.iter().sum();
            data.extend(draws.iter().map(|e| e / total));
        }
        Tensor::matrix(batch.decision_points(), r, data).expect("activation shape")
    }

    /// Activations that do not depend on module outputs (sample-major).
    fn fixed_activations(&self, tape: &mut Tape, batch: &Batch, context: Var) -> Result<Option<Var>> {
        Ok(match &self.gate {
            Gate::Single | Gate::Scores => None,
            Gate::Context(g) => {
                let logits = g.forward(tape, &self.store, context)?;
                Some(tape.softmax(logits))
            }
            Gate::GroundTruth => Some(context),
            Gate::Random => Some(tape.constant(self.random_activations(batch))),
        })
    }

    fn combine(&self, tape: &mut Tape, outs: Vec<ModuleOutput>, fixed: Option<Var>) -> Result<(Var, Option<Var>)> {
        match &self.gate {
            Gate::Single => Ok((outs[0].output, None)),
            Gate::Scores => {
                let scores: Vec<Var> = outs
                    .iter()
                    .map(|o| o.score.ok_or_else(|| Error::invalid("module lacks a score head")))
                    .collect::<Result<_>>()?;
                let logits = tape.concat_cols(&scores)?;
                let p = tape.softmax(logits);
                let outputs: Vec<Var> = outs.iter().map(|o| o.output).collect();
                Ok((mix(tape, &outputs, p)?, Some(p)))
            }
            _ => {
                let p = fixed.ok_or_else(|| Error::invalid("gate produced no activations"))?;
                let outputs: Vec<Var> = outs.iter().map(|o| o.output).collect();
                Ok((mix(tape, &outputs, p)?, Some(p)))
            }
        }
    }

    /// Runs each row only through the module of its rule; equals one-hot mixing.
    fn routed(&self, tape: &mut Tape, input: Var, rule_ids: &[usize]) -> Result<Var> {
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rule_ids.len());
        for (m, module) in self.modules.iter().enumerate() {
            let rows: Vec<usize> = (0..rule_ids.len()).filter(|&i| rule_ids[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(input, &rows)?;
            parts.push(module.heads(tape, &self.store, sub)?.output);
            order.extend(rows);
        }
        let stacked = tape.concat_rows(&parts)?;
        let mut inverse = vec![0; order.len()];
        for (k, &row) in order.iter().enumerate() {
            inverse[row] = k;
        }
        tape.gather_rows(stacked, &inverse)
    }

    /// Forward pass for any level.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let r = self.config.rules;
        let points = batch.decision_points();
        let context = tape.constant(one_hot(&batch.rule_ids, r));
        let h = self.encode(tape, batch, context)?;
        let fixed = self.fixed_activations(tape, batch, context)?;

        let (mixed, p) = match self.config.family {
            Family::Mlp => {
                if matches!(self.gate, Gate::GroundTruth) {
                    (self.routed(tape, h, &batch.rule_ids)?, fixed)
                } else {
                    let outs = self
                        .modules
                        .iter()
                        .map(|m| m.heads(tape, &self.store, h))
                        .collect::<Result<Vec<_>>>()?;
                    self.combine(tape, outs, fixed)?
                }
            }
            Family::Mha => {
                let mask = tape.constant(self_mask(batch.batch_size, batch.seq_len));
                let mut outs = Vec::with_capacity(self.modules.len());
                for module in &self.modules {
                    let att = module.attention.as_ref().ok_or_else(|| Error::invalid("MHA module without attention"))?;
                    let a = att.forward(tape, &self.store, h, batch.batch_size, batch.seq_len, mask)?;
                    let u = tape.concat_cols(&[a, h])?;
                    outs.push(module.heads(tape, &self.store, u)?);
                }
                self.combine(tape, outs, fixed)?
            }
            Family::Rnn => return self.forward_recurrent(tape, batch, h, fixed),
        };

        let pred = self.decoder.forward(tape, &self.store, mixed)?;
        let prediction = tape.reshape(pred, &[points])?;
        let activations = self.activation_values(tape, p, points);
        Ok(ForwardOutput {
            prediction,
            activations,
            rule_ids: batch.rule_ids.clone(),
            exposes_activations: self.config.level.is_modular(),
        })
    }

    fn activation_values(&self, tape: &Tape, p: Option<Var>, points: usize) -> Vec<f64> {
        let r = self.config.rules;
        match (self.config.level, p) {
            (Level::Monolithic, _) | (_, None) => vec![1.0 / r as f64; points * r],
            (_, Some(p)) => tape.value(p).data().to_vec(),
        }
    }

    fn forward_recurrent(&self, tape: &mut Tape, batch: &Batch, h: Var, fixed: Option<Var>) -> Result<ForwardOutput> {
        let (b, n, r) = (batch.batch_size, batch.seq_len, self.config.rules);
        let points = b * n;
        // time-major row t*b + s holds sample-major row s*n + t
        let perm: Vec<usize> = (0..n).flat_map(|t| (0..b).map(move |s| s * n + t)).collect();
        let h_tm = tape.gather_rows(h, &perm)?;
        let fixed_tm = match fixed {
            Some(p) => Some(tape.gather_rows(p, &perm)?),
            None => None,
        };
        let rules_tm: Vec<usize> = perm.iter().map(|&i| batch.rule_ids[i]).collect();
        let ground_truth = matches!(self.gate, Gate::GroundTruth);

        let mut state = tape.constant(Tensor::zeros(&[b, self.config.arch.output_width]));
        let mut ys = Vec::with_capacity(n);
        let mut p_tm: Vec<f64> = Vec::with_capacity(points * r);
        for t in 0..n {
            let h_t = tape.slice_rows(h_tm, t * b, (t + 1) * b)?;
            let u = tape.concat_cols(&[state, h_t])?;
            let step_rules = &rules_tm[t * b..(t + 1) * b];
            let p_t = if ground_truth {
                state = self.routed(tape, u, step_rules)?;
                None
            } else {
                let outs = self
                    .modules
                    .iter()
                    .map(|m| m.heads(tape, &self.store, u))
                    .collect::<Result<Vec<_>>>()?;
                let fixed_t = match fixed_tm {
                    Some(p) => Some(tape.slice_rows(p, t * b, (t + 1) * b)?),
                    None => None,
                };
                let (next, p_t) = self.combine(tape, outs, fixed_t)?;
                state = next;
                p_t
            };
            match (ground_truth, p_t) {
                (true, _) => p_tm.extend(one_hot(step_rules, r).data()),
                (false, p_t) => p_tm.extend(self.activation_values(tape, p_t, b)),
            }
            ys.push(self.decoder.forward(tape, &self.store, state)?);
        }
        let y_tm = tape.concat_rows(&ys)?;
        let mut inverse = vec![0; points];
        for (k, &row) in perm.iter().enumerate() {
            inverse[row] = k;
        }
        let y = tape.gather_rows(y_tm, &inverse)?;
        let prediction = tape.reshape(y, &[points])?;
        let mut activations = vec![0.0; points * r];
        for (k, &row) in perm.iter().enumerate() {
            activations[row * r..(row + 1) * r].copy_from_slice(&p_tm[k * r..(k + 1) * r]);
        }
        if self.config.level == Level::Monolithic {
            activations.fill(1.0 / r as f64);
        }
        Ok(ForwardOutput {
            prediction,
            activations,
            rule_ids: batch.rule_ids.clone(),
            exposes_activations: self.config.level.is_modular(),
        })
    }

    fn forward_at(&self, level: Level, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        if self.config.level != level {
            return Err(Error::invalid(format!("expected a {level} model, got {}", self.config.level)));
        }
        self.forward(tape, batch)
    }

    /// `y = f(x, c)`; activations are reported as a uniform placeholder.
    pub fn forward_monolithic(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_at(Level::Monolithic, tape, batch)
    }

    /// `y_m, s_m = f_m(x, c)`, `p = softmax(s)`, `y = sum_m p_m y_m`.
    pub fn forward_modular(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_at(Level::Modular, tape, batch)
    }

    /// `p = softmax(g(c))`, independent of `x`.
    pub fn forward_modular_op(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_at(Level::ModularOp, tape, batch)
    }

    /// `p = onehot(c)`.
    pub fn forward_gt_modular(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_at(Level::GtModular, tape, batch)
    }

    /// Predictions as plain values, without keeping the tape.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        Ok((tape.value(out.prediction).data().to_vec(), out.activations))
    }
}

/// Parameter count of `config` built at `width`, without initializing weights.
pub fn param_count_at(config: &ModelConfig, width: usize) -> Result<usize> {
    Ok(Model::assemble(config, width, None)?.param_count())
}

/// Largest trunk width whose total parameter count fits in `config.capacity`.
pub fn resolve_width(config: &ModelConfig) -> Result<usize> {
    let fits = |w: usize| param_count_at(config, w).map(|n| n <= config.capacity);
    if !fits(MIN_WIDTH)? {
        return Err(Error::invalid(format!(
            "capacity {} too small for {} {} with R={} (needs {} at width {MIN_WIDTH})",
            config.capacity,
            config.level,
            config.family,
            config.rules,
            param_count_at(config, MIN_WIDTH)?
        )));
    }
    let (mut lo, mut hi) = (MIN_WIDTH, MIN_WIDTH * 2);
    while fits(hi)? {
        lo = hi;
        hi *= 2;
    }
    // invariant: fits(lo) && !fits(hi)
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
