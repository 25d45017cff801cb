//! Finite-difference verification of the analytic gradients.

use std::fmt::Write;

use crate::error::Result;
use crate::ir::{Instance, Query, Turn};
use crate::model::{Ablation, Model, ModelDims, Prepared};
use crate::preprocess::{substitute_arguments, Vocab};

/// Comparison settings: central differences with step `eps`; an entry
/// passes when its relative error is at most `rel_tol`, or, when both
/// gradients are below `small`, when the absolute error is at most `abs_tol`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub eps: f64,
    pub rel_tol: f64,
    pub small: f64,
    pub abs_tol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            eps: 1e-4,
            rel_tol: 1e-3,
            small: 1e-8,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every entry of every parameter tensor of `model` on the loss of
/// `item`.
pub fn check_gradients(
    model: &Model<f64>,
    item: &Prepared,
    tol: Tolerance,
) -> Result<Vec<GroupCheck>> {
    let mut grads = model.params.zeros_like();
    model.accumulate_gradient(item, &mut grads, 1.0, None)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for id in model.params.ids() {
        let mut check = GroupCheck {
            name: model.params.name(id).to_string(),
            entries: 0,
            failures: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        let shape = model.params.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let original = model.params.get(id)[[r, c]];
                probe.params.get_mut(id)[[r, c]] = original + tol.eps;
                let up = probe.loss(item)?;
                probe.params.get_mut(id)[[r, c]] = original - tol.eps;
                let down = probe.loss(item)?;
                probe.params.get_mut(id)[[r, c]] = original;
                let numeric = (up - down) / (2.0 * tol.eps);
                let analytic = grads.get(id)[[r, c]];
                let abs = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs());
                let ok = if scale < tol.small {
                    abs <= tol.abs_tol
                } else {
                    let rel = abs / scale;
                    check.max_rel_error = check.max_rel_error.max(rel);
                    rel <= tol.rel_tol
                };
                check.max_abs_error = check.max_abs_error.max(abs);
                check.entries += 1;
                check.failures += usize::from(!ok);
            }
        }
        out.push(check);
    }
    Ok(out)
}

pub fn render(checks: &[GroupCheck]) -> String {
    let mut out = String::new();
    for c in checks {
        writeln!(
            out,
            "{:<32} entries {:>5} max_rel {:.3e} max_abs {:.3e} {}",
            c.name,
            c.entries,
            c.max_rel_error,
            c.max_abs_error,
            if c.passed() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

/// The small reference setting: d=8, L=2, H=2, one graph layer, two
/// composition steps, on a two-turn instance.
pub fn reference_case(seed: u64) -> Result<(Model<f64>, Prepared)> {
    let inst = Instance {
        id: "grad-check".into(),
        dialogue: vec![
            Turn::new("Speaker 1", "hi Emma how are you"),
            Turn::new("Speaker 2", "my sister Emma is fine"),
        ],
        query: Query {
            arguments: vec!["Speaker 1".into(), "Emma".into()],
        },
        label: 1,
    };
    let vocab = Vocab::build([&substitute_arguments(&inst)]);
    let dims = ModelDims {
        vocab_size: 0,
        num_classes: 3,
        d_model: 8,
        d_ff: 16,
        layers: 2,
        heads: 2,
        graph_layers: 1,
        gtn_steps: 2,
        k_max: 2,
        max_len: 32,
        max_speakers: 4,
    };
    let model = Model::new(dims, Ablation::default(), vocab, seed)?;
    let item = model.prepare(&inst)?;
    Ok((model, item))
}
