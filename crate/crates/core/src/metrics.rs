//! Collapse and specialization metrics over (rule, module) activation records,
//! and the ranking-vote aggregation used to compare model levels.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::zoo::Level;

/// How per-decision-point activations enter the joint counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// Add the activation probabilities themselves.
    #[default]
    Soft,
    /// Add a one-hot at the most active module (lowest index on ties).
    Argmax,
}

/// Accumulated `sum p(module | point)` per true rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub rules: usize,
    /// `R x R`, row = rule, column = module.
    pub joint: Vec<f64>,
    pub rule_counts: Vec<u64>,
    pub accumulation: Accumulation,
}

impl ActivationStats {
    pub fn new(rules: usize) -> Self {
        Self::with_accumulation(rules, Accumulation::Soft)
    }

    pub fn with_accumulation(rules: usize, accumulation: Accumulation) -> Self {
        ActivationStats { rules, joint: vec![0.0; rules * rules], rule_counts: vec![0; rules], accumulation }
    }

    /// Adds one record per rule id; `activations` is `len(rule_ids) x R`.
    pub fn accumulate(&mut self, rule_ids: &[usize], activations: &[f64]) -> Result<()> {
        let r = self.rules;
        if activations.len() != rule_ids.len() * r {
            return Err(Error::shape(
                "accumulate",
                format!("{} activations for {} records of width {r}", activations.len(), rule_ids.len()),
            ));
        }
        for (&c, row) in rule_ids.iter().zip(activations.chunks(r)) {
            if c >= r {
                return Err(Error::invalid(format!("rule id {c} out of range for R={r}")));
            }
            let dst = &mut self.joint[c * r..(c + 1) * r];
            match self.accumulation {
                Accumulation::Soft => dst.iter_mut().zip(row).for_each(|(d, p)| *d += p),
                Accumulation::Argmax => {
                    let best = (0..r).fold(0, |b, m| if row[m] > row[b] { m } else { b });
                    dst[best] += 1.0;
                }
            }
            self.rule_counts[c] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ActivationStats) -> Result<()> {
        if other.rules != self.rules {
            return Err(Error::invalid("cannot merge stats with different rule counts"));
        }
        self.joint.iter_mut().zip(&other.joint).for_each(|(a, b)| *a += b);
        self.rule_counts.iter_mut().zip(&other.rule_counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.rule_counts.iter().sum()
    }

    /// `p(m, r)` laid out like `joint`; sums to 1.
    pub fn joint_distribution(&self) -> Result<Vec<f64>> {
        let mass: f64 = self.joint.iter().sum();
        if self.total() == 0 || mass <= 0.0 {
            return Err(Error::invalid("activation stats are empty"));
        }
        Ok(self.joint.iter().map(|v| v / mass).collect())
    }

    /// Row-normalized activation matrix `A[r][m] = p(m | r)`.
    ///
    /// Rules never observed get a uniform row.
    pub fn activation_matrix(&self) -> Result<Vec<f64>> {
        let r = self.rules;
        if self.total() == 0 {
            return Err(Error::invalid("activation stats are empty"));
        }
        let mut a = vec![1.0 / r as f64; r * r];
        for c in 0..r {
            let row = &self.joint[c * r..(c + 1) * r];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                a[c * r..(c + 1) * r].iter_mut().zip(row).for_each(|(d, v)| *d = v / s);
            }
        }
        Ok(a)
    }

    /// Writes the activation matrix as CSV (rows = rules, columns = modules).
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let r = self.rules;
        let header: Vec<String> = std::iter::once("rule".to_string()).chain((0..r).map(|m| format!("module{m}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        let a = self.activation_matrix()?;
        for c in 0..r {
            let cells: Vec<String> = a[c * r..(c + 1) * r].iter().map(|v| v.to_string()).collect();
            writeln!(out, "{c},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Module marginal `p(m) = sum_r p(m, r)`.
pub fn marginal(stats: &ActivationStats) -> Result<Vec<f64>> {
    let r = stats.rules;
    let joint = stats.joint_distribution()?;
    Ok((0..r).map(|m| (0..r).map(|c| joint[c * r + m]).sum()).collect())
}

/// Rejects rows that are not probability vectors.
fn check_rows(op: &'static str, values: &[f64], width: usize) -> Result<()> {
    for (i, row) in values.chunks(width.max(1)).enumerate() {
        if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(op, format!("row {i} has entry {v}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(op, format!("row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// `C_A = R/(R-1) * sum_m max(0, 1/R - p_m)`.
pub fn collapse_avg(p: &[f64]) -> Result<f64> {
    let r = p.len();
    if r < 2 {
        return Err(Error::invalid("collapse-avg needs R >= 2"));
    }
    check_rows("collapse_avg", p, r)?;
    let rf = r as f64;
    Ok(rf / (rf - 1.0) * p.iter().map(|&pm| (1.0 / rf - pm).max(0.0)).sum::<f64>())
}

/// `C_W = 1 - R * min_m p_m`.
pub fn collapse_worst(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("collapse-worst needs R >= 1"));
    }
    check_rows("collapse_worst", p, p.len())?;
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(1.0 - p.len() as f64 * min)
}

/// Minimum-cost assignment of rows to columns of a square `n x n` cost
/// matrix; `result[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape("hungarian", format!("{} entries is not {n}x{n}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("hungarian: costs must be finite"));
    }
    // Shortest augmenting paths with row/column potentials; 1-based with a
    // virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[owner[j] - 1] = j - 1;
    }
    Ok(result)
}

/// Normalized L1 distance `sum |A - P| / (2R)` to the permutation matrix of `perm`.
pub fn permutation_distance(a: &[f64], perm: &[usize]) -> f64 {
    let r = perm.len();
    let mut total = 0.0;
    for (row, &col) in perm.iter().enumerate() {
        for m in 0..r {
            let target = if m == col { 1.0 } else { 0.0 };
            total += (a[row * r + m] - target).abs();
        }
    }
    total / (2.0 * r as f64)
}

/// Hungarian solver signature, injectable for verification.
pub type AssignmentSolver = fn(&[f64], usize) -> Result<Vec<usize>>;

/// `s_d = min_P d(A, P)` for a row-stochastic `R x R` matrix.
pub fn alignment(a: &[f64], rules: usize) -> Result<f64> {
    alignment_with(a, rules, hungarian)
}

pub fn alignment_with(a: &[f64], rules: usize, solver: AssignmentSolver) -> Result<f64> {
    if a.len() != rules * rules || rules == 0 {
        return Err(Error::shape("alignment", format!("{} entries is not a square {rules}x{rules} matrix", a.len())));
    }
    check_rows("alignment", a, rules)?;
    // Minimizing the L1 distance is maximizing the matched mass.
    let cost: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
    let perm = solver(&cost, rules)?;
    Ok(permutation_distance(a, &perm))
}

/// Alignment by exhaustive search over all `R!` permutations.
pub fn alignment_brute_force(a: &[f64], rules: usize) -> f64 {
    let mut perm: Vec<usize> = (0..rules).collect();
    let mut best = permutation_distance(a, &perm);
    // Heap's algorithm.
    let mut c = vec![0; rules];
    let mut i = 1;
    while i < rules {
        if c[i] < i {
            let k = if i % 2 == 0 { 0 } else { c[i] };
            perm.swap(k, i);
            best = best.min(permutation_distance(a, &perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn joint_marginals(joint: &[f64], rules: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if rules < 2 {
        return Err(Error::invalid("inverse mutual information needs R >= 2"));
    }
    if joint.len() != rules * rules {
        return Err(Error::shape("inverse_mutual_information", format!("{} entries for R={rules}", joint.len())));
    }
    check_rows("inverse_mutual_information", joint, joint.len())?;
    let p_rule = (0..rules).map(|c| joint[c * rules..(c + 1) * rules].iter().sum()).collect();
    let p_module = (0..rules).map(|m| (0..rules).map(|c| joint[c * rules + m]).sum()).collect();
    Ok((p_rule, p_module))
}

/// `S_IMI = 1 - MI(m; r) / ln R` for a joint laid out rule-major.
pub fn inverse_mutual_information(joint: &[f64], rules: usize) -> Result<f64> {
    let (p_rule, p_module) = joint_marginals(joint, rules)?;
    let mut mi = 0.0;
    for c in 0..rules {
        for m in 0..rules {
            let p = joint[c * rules + m];
            if p > 0.0 {
                mi += p * (p / (p_rule[c] * p_module[m])).ln();
            }
        }
    }
    Ok(1.0 - mi / (rules as f64).ln())
}

/// The same quantity via `MI = H(m) + H(r) - H(m, r)`.
pub fn inverse_mutual_information_entropy(joint: &[f64], rules: usize) -> Result<f64> {
    let (p_rule, p_module) = joint_marginals(joint, rules)?;
    let h = |p: &[f64]| -p.iter().map(|&x| xlnx(x)).sum::<f64>();
    let mi = h(&p_module) + h(&p_rule) - h(joint);
    Ok(1.0 - mi / (rules as f64).ln())
}

/// Anything that emits module activations for points whose rules follow a
/// given distribution.
pub trait ActivationSource {
    fn rules(&self) -> usize;

    /// Returns `(rule_ids, activations)` for `samples` samples drawn with
    /// rule probabilities `rule_probs`; activations are `points x R`.
    fn activations(&mut self, rule_probs: &[f64], samples: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub draws: usize,
    pub samples: usize,
    pub alpha: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { draws: 100, samples: 10_000, alpha: 1.0 }
    }
}

/// Draws from a symmetric Dirichlet over `k` outcomes.
pub fn sample_dirichlet(rng: &mut seed::Rng, k: usize, alpha: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("dirichlet concentration {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Sorted-marginal mismatch `sum_i |sort(p)_i - sort(q)_i|` for one draw.
pub fn sorted_l1(p: &[f64], q: &[f64]) -> f64 {
    let mut p = p.to_vec();
    let mut q = q.to_vec();
    p.sort_by(f64::total_cmp);
    q.sort_by(f64::total_cmp);
    p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum()
}

/// `S_A`: average sorted-marginal mismatch over Dirichlet-drawn rule distributions.
pub fn adaptation(source: &mut dyn ActivationSource, config: &AdaptationConfig, seed: u64) -> Result<f64> {
    if config.draws == 0 || config.samples == 0 {
        return Err(Error::invalid("adaptation needs at least one draw and one sample"));
    }
    let r = source.rules();
    let mut rng = seed::rng(seed::derive(seed, &[seed::DOMAIN_ADAPT]));
    let mut total = 0.0;
    for d in 0..config.draws {
        let p = sample_dirichlet(&mut rng, r, config.alpha)?;
        let (ids, acts) = source.activations(&p, config.samples, seed::derive(seed, &[seed::DOMAIN_ADAPT, d as u64]))?;
        if ids.is_empty() || acts.len() != ids.len() * r {
            return Err(Error::shape("adaptation", "activation source returned a malformed record set"));
        }
        let mut q = vec![0.0; r];
        for row in acts.chunks(r) {
            q.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let n = ids.len() as f64;
        q.iter_mut().for_each(|v| *v /= n);
        total += sorted_l1(&p, &q);
    }
    Ok(total / config.draws as f64)
}

/// Source with a fixed gating rule, independent of inputs.
pub struct SyntheticGate<F: FnMut(usize, &mut seed::Rng) -> Vec<f64>> {
    pub rules: usize,
    pub gate: F,
}

impl<F: FnMut(usize, &mut seed::Rng) -> Vec<f64>> ActivationSource for SyntheticGate<F> {
    fn rules(&self) -> usize {
        self.rules
    }

    fn activations(&mut self, rule_probs: &[f64], samples: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut rng = seed::rng(seed);
        let mut ids = Vec::with_capacity(samples);
        let mut acts = Vec::with_capacity(samples * self.rules);
        for _ in 0..samples {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = self.rules - 1;
            for (i, &p) in rule_probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    c = i;
                    break;
                }
            }
            ids.push(c);
            acts.extend((self.gate)(c, &mut rng));
        }
        Ok((ids, acts))
    }
}

/// The metric suite for one evaluated model. Adaptation is optional because
/// it needs a live model rather than accumulated stats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub collapse_avg: f64,
    pub collapse_worst: f64,
    pub alignment: f64,
    pub inverse_mutual_information: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<f64>,
}

impl MetricReport {
    pub fn from_stats(stats: &ActivationStats) -> Result<Self> {
        let p = marginal(stats)?;
        Ok(MetricReport {
            collapse_avg: collapse_avg(&p)?,
            collapse_worst: collapse_worst(&p)?,
            alignment: alignment(&stats.activation_matrix()?, stats.rules)?,
            inverse_mutual_information: inverse_mutual_information(&stats.joint_distribution()?, stats.rules)?,
            adaptation: None,
        })
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("collapse_avg", self.collapse_avg),
            ("collapse_worst", self.collapse_worst),
            ("alignment", self.alignment),
            ("inverse_mutual_information", self.inverse_mutual_information),
        ];
        if let Some(a) = self.adaptation {
            out.push(("adaptation", a));
        }
        out
    }
}

/// Seed-level performances of each level within one comparison group.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteGroup {
    pub key: String,
    pub performances: BTreeMap<Level, Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteTable {
    pub levels: Vec<Level>,
    pub votes: BTreeMap<Level, usize>,
    /// Votes won on a tied average, broken by level order.
    pub tie_votes: BTreeMap<Level, usize>,
    pub groups: usize,
    pub skipped: Vec<String>,
}

impl VoteTable {
    pub fn total(&self) -> usize {
        self.votes.values().sum()
    }
}

/// One vote per complete group to the level with the lowest seed-averaged
/// performance. `levels` is the comparison set in tie-break order.
pub fn ranking_votes(groups: &[VoteGroup], levels: &[Level]) -> VoteTable {
    let mut table = VoteTable {
        levels: levels.to_vec(),
        votes: levels.iter().map(|&l| (l, 0)).collect(),
        tie_votes: levels.iter().map(|&l| (l, 0)).collect(),
        ..VoteTable::default()
    };
    for group in groups {
        let runs: Vec<Option<&Vec<f64>>> = levels.iter().map(|l| group.performances.get(l)).collect();
        let complete = runs.iter().all(|r| r.is_some_and(|v| !v.is_empty()));
        let seeds = runs.first().copied().flatten().map(|v| v.len());
        if !complete || runs.iter().any(|r| r.map(|v| v.len()) != seeds) {
            log::warn!("skipping incomplete vote group {}", group.key);
            table.skipped.push(group.key.clone());
            continue;
        }
        let means: Vec<f64> = runs.iter().map(|r| {
            let v = r.expect("complete group");
            v.iter().sum::<f64>() / v.len() as f64
        }).collect();
        let best = (0..means.len()).fold(0, |b, i| if means[i] < means[b] { i } else { b });
        let tied = means.iter().enumerate().any(|(i, &m)| i != best && m == means[best]);
        *table.votes.get_mut(&levels[best]).expect("level present") += 1;
        if tied {
            *table.tie_votes.get_mut(&levels[best]).expect("level present") += 1;
        }
        table.groups += 1;
    }
    table
}
