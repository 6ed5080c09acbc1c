//! Rule-based data generators for the MLP, MHA and RNN task families.
//!
//! A task is a frozen set of `R` rules sampled from a seed. Batches are drawn
//! fresh from a data seed, so training streams are reproducible without ever
//! storing a dataset. Rule ids are 0-based.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// State and input width of the RNN family.
pub const RNN_DIM: usize = 32;
/// Training sequence length for the MHA and RNN families.
pub const DEFAULT_SEQ_LEN: usize = 10;
/// Sequence lengths accepted by the length shifts.
pub const SHIFT_SEQ_LENS: [usize; 5] = [3, 5, 10, 20, 30];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Mha,
    Rnn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Mlp, Family::Mha, Family::Rnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Mha => "mha",
            Family::Rnn => "rnn",
        }
    }

    pub fn is_sequential(self) -> bool {
        !matches!(self, Family::Mlp)
    }

    pub(crate) fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Family::Mlp),
            "mha" => Ok(Family::Mha),
            "rnn" => Ok(Family::Rnn),
            other => Err(Error::Unsupported(format!("task family '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Regression,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Classification => "classification",
            Mode::Regression => "regression",
        }
    }

    pub(crate) fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(Mode::Classification),
            "regression" => Ok(Mode::Regression),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Notion of search used by MHA rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchVersion {
    /// Scalar queries, `d(a, b) = |a - b|`.
    #[serde(rename = "v1")]
    Distance,
    /// Unit-sphere queries in 2-d, `d(a, b) = a . b`.
    #[serde(rename = "v2")]
    Dot,
}

impl SearchVersion {
    pub fn from_number(v: u8) -> Result<Self> {
        match v {
            1 => Ok(SearchVersion::Distance),
            2 => Ok(SearchVersion::Dot),
            _ => Err(Error::invalid(format!("search version must be 1 or 2, got {v}"))),
        }
    }

    pub fn query_dim(self) -> usize {
        match self {
            SearchVersion::Distance => 1,
            SearchVersion::Dot => 2,
        }
    }
}

/// Knobs for task sampling that only matter to some families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    pub search_version: SearchVersion,
    /// Search-v2 only: take the most aligned token (argmax of the dot
    /// product) instead of minimizing the dot product as written.
    pub dot_argmax: bool,
}

impl Default for TaskOptions {
    fn default() -> Self {
        TaskOptions { search_version: SearchVersion::Distance, dot_argmax: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpTask {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaTask {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub search_version: SearchVersion,
    pub dot_argmax: bool,
}

impl MhaTask {
    pub fn query_dim(&self) -> usize {
        self.search_version.query_dim()
    }

    /// Per-rule block width inside a token: `q, q', v, v'`.
    pub fn rule_stride(&self) -> usize {
        2 * self.query_dim() + 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnTask {
    /// `R` row-major `RNN_DIM x RNN_DIM` transition matrices.
    pub a: Vec<Vec<f64>>,
    /// `R` row-major `RNN_DIM x RNN_DIM` input matrices.
    pub b: Vec<Vec<f64>>,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskParams {
    Mlp(MlpTask),
    Mha(MhaTask),
    Rnn(RnnTask),
}

/// The frozen parameters of one sampled rule set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub seed: u64,
    pub rules: usize,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        match self.params {
            TaskParams::Mlp(_) => Family::Mlp,
            TaskParams::Mha(_) => Family::Mha,
            TaskParams::Rnn(_) => Family::Rnn,
        }
    }

    /// Input width of one decision point (sample for MLP, token otherwise).
    pub fn features(&self) -> usize {
        match &self.params {
            TaskParams::Mlp(_) => 2,
            TaskParams::Mha(t) => self.rules * t.rule_stride(),
            TaskParams::Rnn(_) => RNN_DIM,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}

/// Samples a task for `family` with `rules` rules, deterministically from `task_seed`.
pub fn sample_task(family: Family, rules: usize, task_seed: u64, options: &TaskOptions) -> Result<TaskSpec> {
    if rules < 1 {
        return Err(Error::invalid("rule count must be at least 1"));
    }
    let mut rng = seed::rng(seed::derive(task_seed, &[seed::DOMAIN_TASK, family.code()]));
    let params = match family {
        Family::Mlp => TaskParams::Mlp(MlpTask {
            alpha: normals(&mut rng, rules, 1.0),
            beta: normals(&mut rng, rules, 1.0),
        }),
        Family::Mha => TaskParams::Mha(MhaTask {
            alpha: normals(&mut rng, rules, 1.0),
            beta: normals(&mut rng, rules, 1.0),
            search_version: options.search_version,
            dot_argmax: options.dot_argmax,
        }),
        Family::Rnn => {
            // N(0, (1/sqrt(32)) I) is a variance, so the entry std is 32^(-1/4).
            let std = (RNN_DIM as f64).powf(-0.25);
            let n = RNN_DIM * RNN_DIM;
            let a = (0..rules).map(|_| normals(&mut rng, n, std)).collect();
            let b = (0..rules).map(|_| normals(&mut rng, n, std)).collect();
            let w = normals(&mut rng, RNN_DIM, 1.0);
            TaskParams::Rnn(RnnTask { a, b, w })
        }
    };
    Ok(TaskSpec { seed: task_seed, rules, params })
}

pub fn mlp_label(task: &MlpTask, x1: f64, x2: f64, rule: usize) -> f64 {
    task.alpha[rule] * x1 + task.beta[rule] * x2
}

fn search(task: &MhaTask, tokens: &[f64], stride: usize, n: usize, rule: usize, offset: usize) -> usize {
    let qd = task.query_dim();
    let at = |i: usize| {
        let start = i * stride + rule * task.rule_stride() + offset;
        &tokens[start..start + qd]
    };
    let query = at(n);
    let seq_len = tokens.len() / stride;
    let score = |i: usize| -> f64 {
        let key = at(i);
        match task.search_version {
            SearchVersion::Distance => (query[0] - key[0]).abs(),
            SearchVersion::Dot => {
                let d: f64 = query.iter().zip(key).map(|(a, b)| a * b).sum();
                if task.dot_argmax {
                    -d
                } else {
                    d
                }
            }
        }
    };
    let mut best = usize::MAX;
    let mut best_score = f64::INFINITY;
    for i in (0..seq_len).filter(|&i| i != n) {
        let s = score(i);
        // Strict comparison keeps the smallest index on ties.
        if best == usize::MAX || s < best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Indices `(s_n, s'_n)` retrieved by token `n` under its rule.
pub fn mha_search(task: &MhaTask, tokens: &[f64], features: usize, n: usize, rule: usize) -> (usize, usize) {
    let qd = task.query_dim();
    (search(task, tokens, features, n, rule, 0), search(task, tokens, features, n, rule, qd))
}

/// Labels for one MHA sequence. `tokens` is `N x features` row-major.
pub fn mha_label(task: &MhaTask, tokens: &[f64], rule_ids: &[usize]) -> Result<Vec<f64>> {
    let n_tokens = rule_ids.len();
    if n_tokens < 2 {
        return Err(Error::invalid(format!("MHA sequences need at least 2 tokens, got {n_tokens}")));
    }
    if !tokens.len().is_multiple_of(n_tokens) {
        return Err(Error::shape("mha_label", format!("{} values for {n_tokens} tokens", tokens.len())));
    }
    let features = tokens.len() / n_tokens;
    let qd = task.query_dim();
    let stride = task.rule_stride();
    Ok((0..n_tokens)
        .map(|n| {
            let c = rule_ids[n];
            let (s, s2) = mha_search(task, tokens, features, n, c);
            let v = tokens[s * features + c * stride + 2 * qd];
            let v2 = tokens[s2 * features + c * stride + 2 * qd + 1];
            task.alpha[c] * v + task.beta[c] * v2
        })
        .collect())
}

/// Labels for one RNN sequence: `s_n = A s_{n-1} + B x_n`, `y_n = w . s_n`, `s_0 = 0`.
pub fn rnn_label(task: &RnnTask, x: &[f64], rule_ids: &[usize]) -> Vec<f64> {
    let d = RNN_DIM;
    let mut state = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut out = Vec::with_capacity(rule_ids.len());
    for (n, &c) in rule_ids.iter().enumerate() {
        let xn = &x[n * d..(n + 1) * d];
        let (a, b) = (&task.a[c], &task.b[c]);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += a[i * d + j] * state[j];
            }
            for j in 0..d {
                acc += b[i * d + j] * xn[j];
            }
            next[i] = acc;
        }
        std::mem::swap(&mut state, &mut next);
        out.push(task.w.iter().zip(&state).map(|(w, s)| w * s).sum());
    }
    out
}

/// Evaluation-time change to the input law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shift {
    InDistribution,
    VarianceDoubled,
    SeqLen(usize),
    VarianceDoubledSeqLen(usize),
}

impl Shift {
    pub fn name(&self) -> String {
        match self {
            Shift::InDistribution => "id".into(),
            Shift::VarianceDoubled => "var2".into(),
            Shift::SeqLen(l) => format!("len{l}"),
            Shift::VarianceDoubledSeqLen(l) => format!("var2_len{l}"),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Shift::VarianceDoubled | Shift::VarianceDoubledSeqLen(_) => 2.0,
            _ => 1.0,
        }
    }

    pub fn seq_len(&self) -> Option<usize> {
        match self {
            Shift::SeqLen(l) | Shift::VarianceDoubledSeqLen(l) => Some(*l),
            _ => None,
        }
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        if let Some(l) = self.seq_len() {
            if !family.is_sequential() {
                return Err(Error::invalid(format!("shift {} needs a sequence family, got {family}", self.name())));
            }
            if !SHIFT_SEQ_LENS.contains(&l) {
                return Err(Error::invalid(format!("shift length {l} not in {SHIFT_SEQ_LENS:?}")));
            }
        }
        Ok(())
    }

    /// The evaluation shifts used for a family, in-distribution first.
    ///
    /// Length variants at the training length duplicate `id`/`var2` and are left out.
    pub fn standard_set(family: Family) -> Vec<Shift> {
        let mut out = vec![Shift::InDistribution, Shift::VarianceDoubled];
        if family.is_sequential() {
            for l in SHIFT_SEQ_LENS.into_iter().filter(|&l| l != DEFAULT_SEQ_LEN) {
                out.push(Shift::SeqLen(l));
            }
            for l in SHIFT_SEQ_LENS.into_iter().filter(|&l| l != DEFAULT_SEQ_LEN) {
                out.push(Shift::VarianceDoubledSeqLen(l));
            }
        }
        out
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown shift '{s}'"));
        let len = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match s {
            "id" => Ok(Shift::InDistribution),
            "var2" => Ok(Shift::VarianceDoubled),
            _ => {
                if let Some(l) = s.strip_prefix("var2_len") {
                    Ok(Shift::VarianceDoubledSeqLen(len(l)?))
                } else if let Some(l) = s.strip_prefix("len") {
                    Ok(Shift::SeqLen(len(l)?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl Serialize for Shift {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Shift {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of labeled samples.
///
/// Decision points are samples for MLP and tokens for MHA/RNN, laid out
/// sample-major (`sample * seq_len + token`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub family: Family,
    pub mode: Mode,
    pub rules: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub features: usize,
    /// `decision_points x features` row-major.
    pub inputs: Vec<f64>,
    pub rule_ids: Vec<usize>,
    /// Real-valued labels `y`.
    pub targets: Vec<f64>,
    /// Training labels: `targets` for regression, `[y > 0]` for classification.
    pub labels: Vec<f64>,
    /// Data seed the batch was drawn from.
    pub seed: u64,
}

impl Batch {
    pub fn decision_points(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

/// Class label of a real target; exact zero maps to class 0.
pub fn class_of(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn draw_rule(rng: &mut Rng, rules: usize, probs: Option<&[f64]>) -> usize {
    match probs {
        None => rng.random_range(0..rules),
        Some(p) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            // Rounding can leave `acc` a hair under 1.
            p.iter().rposition(|&pi| pi > 0.0).unwrap_or(rules - 1)
        }
    }
}

/// Draws a batch with equiprobable rules.
pub fn sample_batch(task: &TaskSpec, batch_size: usize, mode: Mode, shift: Shift, data_seed: u64) -> Result<Batch> {
    sample_batch_weighted(task, batch_size, mode, shift, data_seed, None)
}

/// Draws a batch whose rule ids follow `rule_probs` (equiprobable when `None`).
pub fn sample_batch_weighted(
    task: &TaskSpec,
    batch_size: usize,
    mode: Mode,
    shift: Shift,
    data_seed: u64,
    rule_probs: Option<&[f64]>,
) -> Result<Batch> {
    let family = task.family();
    shift.validate(family)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(p) = rule_probs {
        let total: f64 = p.iter().sum();
        if p.len() != task.rules || p.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rule distribution must be a probability vector of length R"));
        }
    }
    let rules = task.rules;
    let std = shift.variance().sqrt();
    let seq_len = if family.is_sequential() { shift.seq_len().unwrap_or(DEFAULT_SEQ_LEN) } else { 1 };
    let features = task.features();
    let points = batch_size * seq_len;
    let mut rng = seed::rng(data_seed);
    let mut inputs = Vec::with_capacity(points * features);
    let mut rule_ids = Vec::with_capacity(points);
    let mut targets = Vec::with_capacity(points);

    match &task.params {
        TaskParams::Mlp(t) => {
            for _ in 0..batch_size {
                let c = draw_rule(&mut rng, rules, rule_probs);
                let x1 = std * normal(&mut rng);
                let x2 = std * normal(&mut rng);
                inputs.extend_from_slice(&[x1, x2]);
                rule_ids.push(c);
                targets.push(mlp_label(t, x1, x2, c));
            }
        }
        TaskParams::Mha(t) => {
            let qd = t.query_dim();
            // Under the variance shift the sphere radius doubles.
            let radius = shift.variance();
            for _ in 0..batch_size {
                let start = rule_ids.len();
                for _ in 0..seq_len {
                    rule_ids.push(draw_rule(&mut rng, rules, rule_probs));
                }
                let tok_start = inputs.len();
                for _ in 0..seq_len {
                    for _ in 0..rules {
                        for _ in 0..2 {
                            match t.search_version {
                                SearchVersion::Distance => inputs.push(std * normal(&mut rng)),
                                SearchVersion::Dot => {
                                    let v: Vec<f64> = (0..qd).map(|_| normal(&mut rng)).collect();
                                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                                    inputs.extend(v.iter().map(|x| radius * x / norm));
                                }
                            }
                        }
                        inputs.push(std * normal(&mut rng));
                        inputs.push(std * normal(&mut rng));
                    }
                }
                targets.extend(mha_label(t, &inputs[tok_start..], &rule_ids[start..])?);
            }
        }
        TaskParams::Rnn(t) => {
            for _ in 0..batch_size {
                let start = rule_ids.len();
                for _ in 0..seq_len {
                    rule_ids.push(draw_rule(&mut rng, rules, rule_probs));
                }
                let tok_start = inputs.len();
                for _ in 0..seq_len * RNN_DIM {
                    inputs.push(std * normal(&mut rng));
                }
                targets.extend(rnn_label(t, &inputs[tok_start..], &rule_ids[start..]));
            }
        }
    }

    let labels = match mode {
        Mode::Regression => targets.clone(),
        Mode::Classification => targets.iter().map(|&y| class_of(y)).collect(),
    };
    Ok(Batch { family, mode, rules, batch_size, seq_len, features, inputs, rule_ids, targets, labels, seed: data_seed })
}

#[derive(Serialize)]
struct DumpLine<'a> {
    family: Family,
    mode: Mode,
    inputs: Vec<&'a [f64]>,
    rule_ids: &'a [usize],
    label: &'a [f64],
}

/// Writes one JSON object per sample: `{family, mode, inputs, rule_ids, label}`.
///
/// `inputs` holds one array per decision point; `rule_ids` and `label` hold
/// one entry per decision point.
pub fn dump_batch(batch: &Batch, mut out: impl Write) -> Result<()> {
    let (f, n) = (batch.features, batch.seq_len);
    for s in 0..batch.batch_size {
        let line = DumpLine {
            family: batch.family,
            mode: batch.mode,
            inputs: (0..n).map(|t| &batch.inputs[(s * n + t) * f..(s * n + t + 1) * f]).collect(),
            rule_ids: &batch.rule_ids[s * n..(s + 1) * n],
            label: &batch.labels[s * n..(s + 1) * n],
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(alpha: f64, beta: f64) -> MlpTask {
        MlpTask { alpha: vec![alpha], beta: vec![beta] }
    }

    #[test]
    fn mlp_labels() {
        assert_eq!(mlp_label(&mlp(1.0, 1.0), 1.0, 2.0, 0), 3.0);
        assert_eq!(mlp_label(&mlp(0.0, 0.0), 4.2, -7.0, 0), 0.0);
        assert_eq!(mlp_label(&mlp(2.0, -1.0), 0.5, 0.25, 0), 0.75);
    }

    #[test]
    fn task_sampling_is_deterministic() {
        let opts = TaskOptions::default();
        let a = sample_task(Family::Mlp, 2, 17, &opts).unwrap();
        let b = sample_task(Family::Mlp, 2, 17, &opts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_task(Family::Mlp, 2, 18, &opts).unwrap());
        assert!(sample_task(Family::Mlp, 0, 1, &opts).is_err());
        assert!("cnn".parse::<Family>().is_err());
    }

    #[test]
    fn two_token_search_is_forced() {
        let t = MhaTask { alpha: vec![1.0], beta: vec![0.0], search_version: SearchVersion::Distance, dot_argmax: false };
        // token layout for R=1: q, q', v, v'
        let tokens = [0.0, 0.0, 10.0, 0.0, 5.0, 5.0, 20.0, 0.0];
        assert_eq!(mha_search(&t, &tokens, 4, 0, 0), (1, 1));
        assert_eq!(mha_search(&t, &tokens, 4, 1, 0), (0, 0));
        assert_eq!(mha_label(&t, &tokens, &[0, 0]).unwrap(), vec![20.0, 10.0]);
        assert!(mha_label(&t, &tokens[..4], &[0]).is_err());
    }

    #[test]
    fn search_ties_take_the_lowest_index() {
        let t = MhaTask { alpha: vec![1.0], beta: vec![1.0], search_version: SearchVersion::Distance, dot_argmax: false };
        // tokens 1 and 2 carry identical queries
        let tokens = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0];
        assert_eq!(mha_search(&t, &tokens, 4, 0, 0), (1, 1));
    }

    #[test]
    fn three_token_labels_match_enumeration() {
        let t = MhaTask { alpha: vec![0.7], beta: vec![-1.3], search_version: SearchVersion::Distance, dot_argmax: false };
        // queries 0.0, 0.3, 1.0 ; keys q' 2.0, -1.0, 0.5 ; values distinct
        let q = [0.0, 0.3, 1.0];
        let qp = [2.0, -1.0, 0.5];
        let v = [1.0, 2.0, 3.0];
        let vp = [10.0, 20.0, 30.0];
        let mut tokens = Vec::new();
        for n in 0..3 {
            tokens.extend_from_slice(&[q[n], qp[n], v[n], vp[n]]);
        }
        // enumerate every (n, i) pair
        let argmin = |keys: &[f64; 3], n: usize| {
            let mut best = None::<(usize, f64)>;
            for i in 0..3 {
                if i == n {
                    continue;
                }
                let d = (keys[n] - keys[i]).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.unwrap().0
        };
        let want: Vec<f64> = (0..3).map(|n| 0.7 * v[argmin(&q, n)] - 1.3 * vp[argmin(&qp, n)]).collect();
        assert_eq!(mha_label(&t, &tokens, &[0, 0, 0]).unwrap(), want);
        // n=0: q -> token 1, q' -> token 2 ; hand check
        assert_eq!(want[0], 0.7 * 2.0 - 1.3 * 30.0);
    }

    #[test]
    fn dot_search_minimizes_unless_flagged() {
        let mut t = MhaTask { alpha: vec![1.0], beta: vec![0.0], search_version: SearchVersion::Dot, dot_argmax: false };
        // stride 6: q(2), q'(2), v, v'
        let tokens = [
            1.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, 5.0, 0.0, //
            -1.0, 0.0, -1.0, 0.0, 7.0, 0.0,
        ];
        assert_eq!(mha_search(&t, &tokens, 6, 0, 0).0, 2);
        t.dot_argmax = true;
        assert_eq!(mha_search(&t, &tokens, 6, 0, 0).0, 1);
    }

    fn rnn_task(a: Vec<f64>, b: Vec<f64>, w: Vec<f64>) -> RnnTask {
        RnnTask { a: vec![a], b: vec![b], w }
    }

    fn eye() -> Vec<f64> {
        let mut m = vec![0.0; RNN_DIM * RNN_DIM];
        for i in 0..RNN_DIM {
            m[i * RNN_DIM + i] = 1.0;
        }
        m
    }

    #[test]
    fn rnn_with_zero_transition_reads_input() {
        let w: Vec<f64> = (0..RNN_DIM).map(|i| i as f64 * 0.1 - 1.0).collect();
        let t = rnn_task(vec![0.0; RNN_DIM * RNN_DIM], eye(), w.clone());
        let x: Vec<f64> = (0..3 * RNN_DIM).map(|i| (i as f64).sin()).collect();
        let y = rnn_label(&t, &x, &[0, 0, 0]);
        for n in 0..3 {
            let want: f64 = w.iter().zip(&x[n * RNN_DIM..(n + 1) * RNN_DIM]).map(|(a, b)| a * b).sum();
            assert!((y[n] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rnn_with_identity_transition_accumulates() {
        let w: Vec<f64> = (0..RNN_DIM).map(|i| (i as f64).cos()).collect();
        let t = rnn_task(eye(), eye(), w.clone());
        let x: Vec<f64> = (0..4 * RNN_DIM).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = rnn_label(&t, &x, &[0; 4]);
        let mut running = vec![0.0; RNN_DIM];
        for n in 0..4 {
            running.iter_mut().zip(&x[n * RNN_DIM..]).for_each(|(r, v)| *r += v);
            let want: f64 = w.iter().zip(&running).map(|(a, b)| a * b).sum();
            assert!((y[n] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shifts_validate_against_family() {
        assert!(Shift::SeqLen(5).validate(Family::Mlp).is_err());
        assert!(Shift::SeqLen(7).validate(Family::Rnn).is_err());
        assert!(Shift::VarianceDoubledSeqLen(30).validate(Family::Mha).is_ok());
        for s in Shift::standard_set(Family::Rnn) {
            assert_eq!(s.name().parse::<Shift>().unwrap(), s);
        }
        let task = sample_task(Family::Mlp, 2, 1, &TaskOptions::default()).unwrap();
        assert!(sample_batch(&task, 4, Mode::Regression, Shift::SeqLen(5), 0).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_labelled_by_sign() {
        let task = sample_task(Family::Mha, 3, 5, &TaskOptions::default()).unwrap();
        let a = sample_batch(&task, 8, Mode::Classification, Shift::InDistribution, 42).unwrap();
        let b = sample_batch(&task, 8, Mode::Classification, Shift::InDistribution, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.decision_points(), 80);
        for (y, l) in a.targets.iter().zip(&a.labels) {
            assert_eq!(*l, if *y > 0.0 { 1.0 } else { 0.0 });
        }
        assert_eq!(class_of(0.0), 0.0);
    }

    #[test]
    fn dump_writes_one_line_per_sample() {
        let task = sample_task(Family::Rnn, 2, 5, &TaskOptions::default()).unwrap();
        let b = sample_batch(&task, 3, Mode::Regression, Shift::SeqLen(3), 9).unwrap();
        let mut buf = Vec::new();
        dump_batch(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["family"], "rnn");
        assert_eq!(v["inputs"].as_array().unwrap().len(), 3);
        assert_eq!(v["inputs"][0].as_array().unwrap().len(), RNN_DIM);
        assert_eq!(v["label"].as_array().unwrap().len(), 3);
    }
}
