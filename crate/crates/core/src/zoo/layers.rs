use rand::Rng as _;

use crate::error::Result;
use crate::seed::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Affine layer `x W + b` with `W: [inputs, outputs]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Fan-in scaled uniform weights, zero bias. `rng = None` gives all zeros.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: Option<&mut Rng>) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = match rng {
            Some(rng) => (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            None => vec![0.0; inputs * outputs],
        };
        let weight = Tensor::matrix(inputs, outputs, data).expect("dense weight shape");
        Self::from_tensors(store, name, weight, Tensor::zeros(&[outputs]))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (inputs, outputs) = (weight.shape()[0], weight.shape()[1]);
        debug_assert_eq!(bias.shape(), [outputs]);
        Dense {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            inputs,
            outputs,
        }
    }

    /// Copies this layer's current values into another store.
    pub fn copy_into(&self, src: &ParamStore, dst: &mut ParamStore, name: &str) -> Dense {
        Dense::from_tensors(dst, name, src.value(self.weight).clone(), src.value(self.bias).clone())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Stack of relu layers.
pub(crate) fn relu_stack(layers: &[Dense], tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
    for layer in layers {
        let y = layer.forward(tape, store, x)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Per-decision-point input encoder shared by all modules.
#[derive(Clone, Debug)]
pub enum Encoder {
    /// Separate digit encoder applied to `x1` and `x2`, plus a rule-context encoder.
    Mlp { digit: Vec<Dense>, context: Vec<Dense> },
    /// One encoder over each token's `(x_n, c_n)`.
    Token { layers: Vec<Dense> },
}

impl Encoder {
    pub fn layers(&self) -> Vec<&Dense> {
        match self {
            Encoder::Mlp { digit, context } => digit.iter().chain(context).collect(),
            Encoder::Token { layers } => layers.iter().collect(),
        }
    }
}

/// Multi-head self-attention over the other tokens of a sequence.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    /// `x` is `[batch * seq, d]`, sample-major. Returns `[batch * seq, heads * head_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Var,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let hd = self.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, (h + 1) * hd)?;
            let qh = tape.reshape(qh, &[batch, seq, hd])?;
            let kh = tape.slice_cols(k, h * hd, (h + 1) * hd)?;
            let kh = tape.reshape(kh, &[batch, seq, hd])?;
            let vh = tape.slice_cols(v, h * hd, (h + 1) * hd)?;
            let vh = tape.reshape(vh, &[batch, seq, hd])?;
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let weights = tape.softmax(scores);
            let o = tape.batch_matmul(weights, vh, false)?;
            outs.push(tape.reshape(o, &[batch * seq, hd])?);
        }
        tape.concat_cols(&outs)
    }
}

/// Additive mask that removes each token's attention to itself.
pub(crate) fn self_mask(batch: usize, seq: usize) -> Tensor {
    const BLOCKED: f64 = -1e30;
    let mut t = Tensor::zeros(&[batch, seq, seq]);
    let d = t.data_mut();
    for b in 0..batch {
        for i in 0..seq {
            d[b * seq * seq + i * seq + i] = BLOCKED;
        }
    }
    t
}

/// One expert `f_m`: optional attention, a relu trunk, and output/score heads.
///
/// The last `R` columns of every trunk input hold the one-hot rule context.
#[derive(Clone, Debug)]
pub struct Module {
    pub attention: Option<Attention>,
    pub trunk: Vec<Dense>,
    pub output: Dense,
    pub score: Option<Dense>,
}

pub struct ModuleOutput {
    pub output: Var,
    pub score: Option<Var>,
}

impl Module {
    /// Applies trunk and heads to an already assembled trunk input.
    pub fn heads(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<ModuleOutput> {
        let z = relu_stack(&self.trunk, tape, store, input)?;
        let output = self.output.forward(tape, store, z)?;
        let score = match &self.score {
            Some(s) => Some(s.forward(tape, store, z)?),
            None => None,
        };
        Ok(ModuleOutput { output, score })
    }

    pub fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = Vec::new();
        if let Some(a) = &self.attention {
            out.extend([&a.query, &a.key, &a.value]);
        }
        out.extend(self.trunk.iter());
        out.push(&self.output);
        out.extend(self.score.iter());
        out
    }
}

/// Context-only gate `g(c)`: one relu hidden layer over the one-hot rule.
#[derive(Clone, Debug)]
pub struct ContextGate {
    pub hidden: Dense,
    pub output: Dense,
}

impl ContextGate {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, context: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, context)?;
        let h = tape.relu(h);
        self.output.forward(tape, store, h)
    }
}
