use rand::Rng as _;

use crate::error::Result;
use crate::metrics::{
    alignment, alignment_brute_force, alignment_with, collapse_avg, collapse_worst, hungarian, inverse_mutual_information,
    inverse_mutual_information_entropy, marginal, AssignmentSolver, MetricReport,
};
use crate::rulegen::{sample_batch, sample_task, Family, Mode, SearchVersion, Shift, TaskOptions, TaskParams};
use crate::seed;
use crate::tensor::check::random_graph_check;
use crate::train::{evaluate, ModelActivations};
use crate::zoo::{reduce_level, Level, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub solver: AssignmentSolver,
    pub gradient_graphs: usize,
    pub matrices_per_size: usize,
    pub eval_samples: usize,
    pub reduction_samples: usize,
    pub moment_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            solver: hungarian,
            gradient_graphs: 200,
            matrices_per_size: 100,
            eval_samples: 10_000,
            reduction_samples: 1000,
            moment_samples: 100_000,
        }
    }
}

fn check(name: &str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name: name.into(), passed, detail },
        Err(e) => CheckResult { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

/// Random row-stochastic `r x r` matrix.
pub fn random_stochastic(rng: &mut seed::Rng, r: usize) -> Vec<f64> {
    let mut a: Vec<f64> = (0..r * r).map(|_| rng.random::<f64>()).collect();
    for row in a.chunks_mut(r) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

fn gradients(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for s in 0..opts.gradient_graphs {
        worst = worst.max(random_graph_check(seed::derive(0x9a7d, &[s as u64]), 5, 16)?.max_relative_error);
    }
    Ok((worst < 1e-4, format!("{} random graphs, max relative error {worst:.2e}", opts.gradient_graphs)))
}

fn assignment(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = seed::rng(0xa55e);
    let mut mismatches = 0;
    for r in 2..=6 {
        for _ in 0..opts.matrices_per_size {
            let a = random_stochastic(&mut rng, r);
            if alignment_with(&a, r, opts.solver)? != alignment_brute_force(&a, r) {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches against exhaustive search, R in 2..=6")))
}

fn imi_identity(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = seed::rng(0x1b1);
    let mut worst = 0.0f64;
    for r in 2..=6 {
        for _ in 0..opts.matrices_per_size {
            let mut joint: Vec<f64> = (0..r * r).map(|_| rng.random::<f64>()).collect();
            let s: f64 = joint.iter().sum();
            joint.iter_mut().for_each(|v| *v /= s);
            let d = (inverse_mutual_information(&joint, r)? - inverse_mutual_information_entropy(&joint, r)?).abs();
            worst = worst.max(d);
        }
    }
    Ok((worst < 1e-12, format!("max deviation from entropy identity {worst:.2e}")))
}

fn analytic_metrics() -> Result<(bool, String)> {
    let mut ok = true;
    for r in 2..=6 {
        let mut perm = vec![0.0; r * r];
        for c in 0..r {
            perm[c * r + (c + 2) % r] = 1.0;
        }
        let joint: Vec<f64> = perm.iter().map(|v| v / r as f64).collect();
        let p_perm: Vec<f64> = (0..r).map(|m| (0..r).map(|c| joint[c * r + m]).sum()).collect();
        ok &= alignment(&perm, r)? == 0.0;
        ok &= inverse_mutual_information(&joint, r)?.abs() < 1e-12;
        ok &= collapse_avg(&p_perm)?.abs() < 1e-12 && collapse_worst(&p_perm)?.abs() < 1e-12;
        let uniform = vec![1.0 / r as f64; r * r];
        let joint_u = vec![1.0 / (r * r) as f64; r * r];
        ok &= (alignment(&uniform, r)? - (r as f64 - 1.0) / r as f64).abs() < 1e-12;
        ok &= (inverse_mutual_information(&joint_u, r)? - 1.0).abs() < 1e-12;
        let mut dead = vec![1.0 / (r - 1) as f64; r];
        dead[r - 1] = 0.0;
        ok &= collapse_worst(&dead)? == 1.0;
    }
    Ok((ok, "permutation, uniform and dead-module cases for R in 2..=6".into()))
}

fn gt_oracle(opts: &VerifyOptions) -> Result<(bool, String)> {
    let rules = 4;
    let task = sample_task(Family::Mlp, rules, 0x6e, &TaskOptions::default())?;
    let model = Model::build(&ModelConfig::for_task(Level::GtModular, &task, 4000), 1)?;
    let (_, stats) = evaluate(&model, &task, Mode::Classification, Shift::InDistribution, opts.eval_samples, 0x6f)?;
    let mut report = MetricReport::from_stats(&stats)?;
    let mut source = ModelActivations::new(&model, &task, Mode::Classification)?;
    let adapt = crate::metrics::AdaptationConfig { draws: 20, samples: opts.eval_samples, alpha: 1.0 };
    report.adaptation = Some(crate::metrics::adaptation(&mut source, &adapt, 0x70)?);
    let worst = report.entries().iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let p = marginal(&stats)?;
    Ok((worst < 0.02, format!("R={rules}: max metric {worst:.4}, marginal {p:.3?}")))
}

fn reductions(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for family in Family::ALL {
        for rules in [2, 4] {
            let task = sample_task(family, rules, 0x7ed, &TaskOptions::default())?;
            let batch = sample_batch(&task, opts.reduction_samples.max(1), Mode::Regression, Shift::InDistribution, 0x7ee)?;
            let gt = Model::build(&ModelConfig::for_task(Level::GtModular, &task, 40_000), 3)?;
            let op = reduce_level(&gt, Level::ModularOp)?;
            let modular = reduce_level(&op, Level::Modular)?;
            let mono = reduce_level(&modular, Level::Monolithic)?;
            let chain = [&gt, &op, &modular, &mono];
            let outputs = chain.iter().map(|m| m.predict(&batch).map(|(y, _)| y)).collect::<Result<Vec<_>>>()?;
            for pair in outputs.windows(2) {
                let d = pair[0].iter().zip(&pair[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(d);
            }
        }
    }
    Ok((worst < 1e-6, format!("max |dy| over adjacent levels {worst:.2e}")))
}

/// Moment checks on generated data.
pub fn data_laws(samples: usize) -> Result<Vec<(String, bool, String)>> {
    let mut out = Vec::new();
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let rules = 4;
    let mlp = sample_task(Family::Mlp, rules, 1, &TaskOptions::default())?;
    let base = sample_batch(&mlp, samples, Mode::Regression, Shift::InDistribution, 2)?;
    let doubled = sample_batch(&mlp, samples, Mode::Regression, Shift::VarianceDoubled, 3)?;
    let ratio = var(&doubled.inputs) / var(&base.inputs);
    out.push(("variance doubling".to_string(), (ratio - 2.0).abs() < 0.04, format!("ratio {ratio:.4}")));

    let mut counts = vec![0usize; rules];
    base.rule_ids.iter().for_each(|&c| counts[c] += 1);
    let worst = counts.iter().map(|&c| (c as f64 / samples as f64 - 1.0 / rules as f64).abs()).fold(0.0, f64::max);
    out.push(("rule-id uniformity".to_string(), worst < 0.01, format!("max |freq - 1/R| {worst:.4}")));

    let options = TaskOptions { search_version: SearchVersion::Dot, dot_argmax: false };
    let mha = sample_task(Family::Mha, rules, 4, &options)?;
    let TaskParams::Mha(params) = &mha.params else { unreachable!("MHA task") };
    let (qd, stride) = (params.query_dim(), params.rule_stride());
    let mut norm_err = 0.0f64;
    for (shift, radius) in [(Shift::InDistribution, 1.0), (Shift::VarianceDoubled, 2.0)] {
        let b = sample_batch(&mha, (samples / (10 * rules)).max(1), Mode::Regression, shift, 5)?;
        for token in b.inputs.chunks(b.features) {
            for block in token.chunks(stride) {
                for q in [&block[..qd], &block[qd..2 * qd]] {
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    norm_err = norm_err.max((n - radius).abs());
                }
            }
        }
    }
    out.push(("sphere norms".to_string(), norm_err < 1e-12, format!("max |norm - radius| {norm_err:.2e}")));
    Ok(out)
}

/// Runs the oracle suite. Touches no files.
pub fn verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![
        check("gradients", gradients(opts)),
        check("alignment vs exhaustive search", assignment(opts)),
        check("imi entropy identity", imi_identity(opts)),
        check("analytic metric cases", analytic_metrics()),
        check("gt-modular oracle metrics", gt_oracle(opts)),
        check("containment reductions", reductions(opts)),
    ];
    match data_laws(opts.moment_samples) {
        Ok(laws) => out.extend(laws.into_iter().map(|(name, passed, detail)| CheckResult { name, passed, detail })),
        Err(e) => out.push(CheckResult { name: "data laws".into(), passed: false, detail: format!("error: {e}") }),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off_by_one(cost: &[f64], n: usize) -> Result<Vec<usize>> {
        Ok(hungarian(cost, n)?.into_iter().map(|c| (c + 1) % n).collect())
    }

    #[test]
    fn corrupted_solver_fails_the_assignment_check() {
        let opts = VerifyOptions { solver: off_by_one, matrices_per_size: 10, ..VerifyOptions::default() };
        assert!(!assignment(&opts).unwrap().0);
        let good = VerifyOptions { matrices_per_size: 10, ..VerifyOptions::default() };
        assert!(assignment(&good).unwrap().0);
    }
}
