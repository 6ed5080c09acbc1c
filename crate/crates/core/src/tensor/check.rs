//! Finite-difference gradient checks, including randomly generated graphs.

use rand::Rng as _;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::seed;

/// Relative error with a floor on the denominator, so gradients near zero
/// are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over
/// every scalar of every parameter in `store`.
pub fn finite_difference_check(
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    store.zero_gradients();
    tape.backward_into(l, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for (k, &g) in grads.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(g, (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphCheck {
    pub depth: usize,
    pub parameters: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Linear(usize),
    Unary(u8),
    Binary(u8),
    Concat(usize),
    TransposeMix,
    Gather,
    ScaleRows,
    LogSoftplus,
}

/// Builds a random composite graph of depth `<= max_depth` with widths
/// `<= max_width` and checks its gradients by central differences.
pub fn random_graph_check(seed_value: u64, max_depth: usize, max_width: usize) -> Result<GraphCheck> {
    let mut rng = seed::rng(seed_value);
    let rows = rng.random_range(1..=4);
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut store = ParamStore::new();
    let uniform = |rng: &mut seed::Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let mut width = rng.random_range(1..=max_width);
    let input = store.add("x", Tensor::matrix(rows, width, uniform(&mut rng, rows * width))?);
    let mut plan = Vec::with_capacity(depth);
    for i in 0..depth {
        let step = match rng.random_range(0..8) {
            0 => Step::Linear(rng.random_range(1..=max_width)),
            1 => Step::Unary(rng.random_range(0..7)),
            2 => Step::Binary(rng.random_range(0..3)),
            3 => Step::Concat(rng.random_range(1..=max_width)),
            4 => Step::TransposeMix,
            5 => Step::Gather,
            6 => Step::ScaleRows,
            _ => Step::LogSoftplus,
        };
        let mut params = Vec::new();
        match step {
            Step::Linear(out) => {
                params.push(store.add(format!("w{i}"), Tensor::matrix(width, out, uniform(&mut rng, width * out))?));
                params.push(store.add(format!("b{i}"), Tensor::vector(uniform(&mut rng, out))));
                width = out;
            }
            Step::Binary(_) => params.push(store.add(format!("y{i}"), Tensor::matrix(rows, width, uniform(&mut rng, rows * width))?)),
            Step::Concat(extra) => {
                params.push(store.add(format!("c{i}"), Tensor::matrix(rows, extra, uniform(&mut rng, rows * extra))?));
                width = (width + extra).min(max_width);
            }
            Step::TransposeMix => params.push(store.add(format!("t{i}"), Tensor::matrix(rows, rows, uniform(&mut rng, rows * rows))?)),
            Step::ScaleRows => params.push(store.add(format!("s{i}"), Tensor::matrix(rows, 1, uniform(&mut rng, rows))?)),
            _ => {}
        }
        let gather: Vec<usize> = (0..rows).map(|_| rng.random_range(0..rows)).collect();
        plan.push((step, params, gather));
    }
    let weights = uniform(&mut rng, rows * width);
    let out_width = width;

    let build = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let mut x = tape.param(store, input);
        let mut w = store.value(input).cols();
        for (step, params, gather) in &plan {
            x = match *step {
                Step::Linear(out) => {
                    let (wt, b) = (tape.param(store, params[0]), tape.param(store, params[1]));
                    w = out;
                    tape.linear(x, wt, b)?
                }
                Step::Unary(k) => match k {
                    0 => tape.tanh(x),
                    1 => tape.sigmoid(x),
                    2 => tape.softplus(x),
                    3 => tape.relu(x),
                    4 => tape.abs(x),
                    5 => {
                        let s = tape.scale(x, 0.5);
                        tape.exp(s)
                    }
                    _ => tape.softmax(x),
                },
                Step::Binary(k) => {
                    let y = tape.param(store, params[0]);
                    match k {
                        0 => tape.add(x, y)?,
                        1 => tape.sub(x, y)?,
                        _ => tape.mul(x, y)?,
                    }
                }
                Step::Concat(extra) => {
                    let c = tape.param(store, params[0]);
                    let joined = tape.concat_cols(&[x, c])?;
                    let keep = (w + extra).min(max_width);
                    w = keep;
                    tape.slice_cols(joined, 0, keep)?
                }
                Step::TransposeMix => {
                    let m = tape.param(store, params[0]);
                    let t = tape.transpose(x)?;
                    let mixed = tape.matmul(t, m)?;
                    tape.transpose(mixed)?
                }
                Step::Gather => tape.gather_rows(x, gather)?,
                Step::ScaleRows => {
                    let s = tape.param(store, params[0]);
                    tape.scale_rows(x, s)?
                }
                Step::LogSoftplus => {
                    let sp = tape.softplus(x);
                    let half = tape.constant(Tensor::vector(vec![0.5; w]));
                    let shifted = tape.add_bias(sp, half)?;
                    tape.log(shifted)?
                }
            };
        }
        let c = tape.constant(Tensor::matrix(rows, out_width, weights.clone())?);
        let prod = tape.mul(x, c)?;
        Ok(tape.sum(prod))
    };
    let max_relative_error = finite_difference_check(&mut store, &build, 1e-5)?;
    Ok(GraphCheck { depth, parameters: store.len(), max_relative_error })
}
