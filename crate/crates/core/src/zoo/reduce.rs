//! Explicit witnesses that each level contains the one below it.
//!
//! `reduce_level` turns a trained model into a model of the next level up
//! (GT -> Op -> Modular -> Monolithic) that computes the same function.

use super::{ContextGate, Dense, Gate, Level, Model, Module};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Logit margin used to emulate one-hot routing with a softmax gate.
pub const REDUCTION_LOGIT_GAP: f64 = 50.0;

fn copy_all(layers: &[Dense], src: &ParamStore, dst: &mut ParamStore, prefix: &str) -> Vec<Dense> {
    layers.iter().enumerate().map(|(i, d)| d.copy_into(src, dst, &format!("{prefix}.{i}"))).collect()
}

fn copy_encoder(model: &Model, dst: &mut ParamStore) -> super::Encoder {
    let src = &model.store;
    match &model.encoder {
        super::Encoder::Mlp { digit, context } => super::Encoder::Mlp {
            digit: copy_all(digit, src, dst, "encoder.digit"),
            context: copy_all(context, src, dst, "encoder.context"),
        },
        super::Encoder::Token { layers } => super::Encoder::Token { layers: copy_all(layers, src, dst, "encoder.token") },
    }
}

fn copy_attention(module: &Module, src: &ParamStore, dst: &mut ParamStore, prefix: &str) -> Option<super::Attention> {
    module.attention.as_ref().map(|a| super::Attention {
        query: a.query.copy_into(src, dst, &format!("{prefix}.attn.query")),
        key: a.key.copy_into(src, dst, &format!("{prefix}.attn.key")),
        value: a.value.copy_into(src, dst, &format!("{prefix}.attn.value")),
        heads: a.heads,
        head_dim: a.head_dim,
    })
}

/// Reduces `model` to the next level up the hierarchy.
///
/// The returned model computes the same predictions: exactly for
/// Op -> Modular and Modular -> Monolithic, and up to `exp(-50)` relative
/// error for GT -> Op.
pub fn reduce_level(model: &Model, target: Level) -> Result<Model> {
    match (model.level(), target) {
        (Level::GtModular, Level::ModularOp) => gt_to_op(model),
        (Level::ModularOp, Level::Modular) => op_to_modular(model),
        (Level::Modular, Level::Monolithic) => Ok(modular_to_monolithic(model)),
        (from, to) => Err(Error::Unsupported(format!("no reduction from {from} to {to}"))),
    }
}

fn gt_to_op(model: &Model) -> Result<Model> {
    let r = model.config.rules;
    let gh = model.config.gate_hidden();
    if gh < r {
        return Err(Error::invalid(format!("gate hidden width {gh} cannot encode {r} rules")));
    }
    let mut store = ParamStore::new();
    let encoder = copy_encoder(model, &mut store);
    let src = &model.store;
    let modules = model
        .modules
        .iter()
        .enumerate()
        .map(|(m, module)| {
            let p = format!("module{m}");
            Module {
                attention: copy_attention(module, src, &mut store, &p),
                trunk: copy_all(&module.trunk, src, &mut store, &format!("{p}.trunk")),
                output: module.output.copy_into(src, &mut store, &format!("{p}.output")),
                score: None,
            }
        })
        .collect();

    let mut hidden = Tensor::zeros(&[r, gh]);
    let mut logits = Tensor::zeros(&[gh, r]);
    for m in 0..r {
        hidden.data_mut()[m * gh + m] = 1.0;
        logits.data_mut()[m * r + m] = REDUCTION_LOGIT_GAP;
    }
    let gate = ContextGate {
        hidden: Dense::from_tensors(&mut store, "gate.hidden", hidden, Tensor::zeros(&[gh])),
        output: Dense::from_tensors(&mut store, "gate.output", logits, Tensor::zeros(&[r])),
    };
    let decoder = model.decoder.copy_into(src, &mut store, "decoder");

    let mut config = model.config.clone();
    config.level = Level::ModularOp;
    let mut out = Model { config, width: model.width, store, encoder, modules, gate: Gate::Context(gate), decoder, gate_seed: model.gate_seed };
    out.config.capacity = out.param_count();
    Ok(out)
}

/// Block-diagonal `[[W, 0], [0, I]]` with bias `[b; 0]`.
fn widen_square(layer: &Dense, src: &ParamStore, dst: &mut ParamStore, name: &str, extra: usize) -> Dense {
    let (w_in, w_out) = (layer.inputs, layer.outputs);
    let (n_in, n_out) = (w_in + extra, w_out + extra);
    let weight = src.value(layer.weight).data();
    let mut wt = Tensor::zeros(&[n_in, n_out]);
    {
        let d = wt.data_mut();
        for i in 0..w_in {
            d[i * n_out..i * n_out + w_out].copy_from_slice(&weight[i * w_out..(i + 1) * w_out]);
        }
        for j in 0..extra {
            d[(w_in + j) * n_out + w_out + j] = 1.0;
        }
    }
    let mut bias = src.value(layer.bias).data().to_vec();
    bias.resize(n_out, 0.0);
    Dense::from_tensors(dst, name, wt, Tensor::vector(bias))
}

fn op_to_modular(model: &Model) -> Result<Model> {
    let Gate::Context(g) = &model.gate else {
        return Err(Error::invalid("Modular-op model without a context gate"));
    };
    let r = model.config.rules;
    let gh = g.hidden.outputs;
    let src = &model.store;
    let g1 = src.value(g.hidden.weight).data();
    let gb1 = src.value(g.hidden.bias).data();
    let g2 = src.value(g.output.weight).data();
    let gb2 = src.value(g.output.bias).data();

    let mut store = ParamStore::new();
    let encoder = copy_encoder(model, &mut store);
    let mut modules = Vec::with_capacity(model.modules.len());
    for (m, module) in model.modules.iter().enumerate() {
        let p = format!("module{m}");
        let attention = copy_attention(module, src, &mut store, &p);

        // First trunk layer gains the gate's hidden units, which read only the
        // trailing one-hot columns of the trunk input.
        let first = &module.trunk[0];
        let (d_in, w) = (first.inputs, first.outputs);
        let n_out = w + gh;
        let weight = src.value(first.weight).data();
        let mut wt = Tensor::zeros(&[d_in, n_out]);
        {
            let d = wt.data_mut();
            for i in 0..d_in {
                d[i * n_out..i * n_out + w].copy_from_slice(&weight[i * w..(i + 1) * w]);
            }
            for c in 0..r {
                let row = d_in - r + c;
                d[row * n_out + w..(row + 1) * n_out].copy_from_slice(&g1[c * gh..(c + 1) * gh]);
            }
        }
        let mut bias = src.value(first.bias).data().to_vec();
        bias.extend_from_slice(gb1);
        let mut trunk = vec![Dense::from_tensors(&mut store, &format!("{p}.trunk.0"), wt, Tensor::vector(bias))];
        for (i, layer) in module.trunk.iter().enumerate().skip(1) {
            trunk.push(widen_square(layer, src, &mut store, &format!("{p}.trunk.{i}"), gh));
        }

        let out_w = module.output.outputs;
        let mut ow = src.value(module.output.weight).data().to_vec();
        ow.resize(n_out * out_w, 0.0);
        let output = Dense::from_tensors(
            &mut store,
            &format!("{p}.output"),
            Tensor::matrix(n_out, out_w, ow)?,
            src.value(module.output.bias).clone(),
        );

        let mut sw = vec![0.0; n_out];
        for j in 0..gh {
            sw[w + j] = g2[j * r + m];
        }
        let score = Dense::from_tensors(&mut store, &format!("{p}.score"), Tensor::matrix(n_out, 1, sw)?, Tensor::vector(vec![gb2[m]]));
        modules.push(Module { attention, trunk, output, score: Some(score) });
    }
    let decoder = model.decoder.copy_into(src, &mut store, "decoder");

    let mut config = model.config.clone();
    config.level = Level::Modular;
    let mut out = Model {
        config,
        width: model.width + gh,
        store,
        encoder,
        modules,
        gate: Gate::Scores,
        decoder,
        gate_seed: model.gate_seed,
    };
    out.config.capacity = out.param_count();
    Ok(out)
}

fn modular_to_monolithic(model: &Model) -> Model {
    let mut out = model.clone();
    out.config.level = Level::Monolithic;
    out.config.internal_mixture = Some(model.modules.len());
    out
}
