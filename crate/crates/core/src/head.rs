//! Linear classifier over the concatenated dialogue and argument nodes.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::scalar::Scalar;
use crate::tape::{softmax_cross_entropy, NodeId, ParamId, ParamSet, Tape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    /// `(1 + k_max)·d × C`.
    pub weight: ParamId,
    /// `1 × C`.
    pub bias: ParamId,
    pub k_max: usize,
}

impl HeadParams {
    pub fn init<T: Scalar>(set: &mut ParamSet<T>, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let rows = (1 + dims.k_max) * dims.d_model;
        HeadParams {
            weight: set.add("head.weight", glorot(rng, rows, dims.num_classes)),
            bias: set.add("head.bias", Array2::zeros((1, dims.num_classes))),
            k_max: dims.k_max,
        }
    }

    pub fn resolve<T: Scalar>(set: &ParamSet<T>, dims: &ModelDims) -> Result<Self> {
        let get = |name: &str| {
            set.find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        Ok(HeadParams {
            weight: get("head.weight")?,
            bias: get("head.bias")?,
            k_max: dims.k_max,
        })
    }
}

/// Logits from node rows `[dialogue, arg_1, …, arg_k]` (`(1 + k) × d`);
/// missing argument slots are zero.
pub fn classify<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &HeadParams,
    nodes: NodeId,
) -> Result<NodeId> {
    let w = tape.param(params.weight);
    let (rows, d) = tape.value(nodes).dim();
    let width = tape.value(w).nrows();
    if rows == 0 || rows > 1 + params.k_max || width != (1 + params.k_max) * d {
        return Err(Error::ShapeMismatch(format!(
            "{rows} node rows of width {d} for a head expecting {} rows and {width} inputs",
            1 + params.k_max
        )));
    }
    let flat = tape.flatten_pad(nodes, width);
    let b = tape.param(params.bias);
    let logits = tape.matmul(flat, w);
    Ok(tape.add_row(logits, b))
}

/// Value-level [`classify`].
pub fn classify_values<T: Scalar>(
    set: &ParamSet<T>,
    params: &HeadParams,
    dialogue: &Array1<T>,
    args: &[Array1<T>],
) -> Result<Array1<T>> {
    let d = dialogue.len();
    if args.iter().any(|a| a.len() != d) {
        return Err(Error::ShapeMismatch(
            "argument node width differs from dialogue node".into(),
        ));
    }
    let mut rows = Array2::zeros((1 + args.len(), d));
    rows.row_mut(0).assign(dialogue);
    for (i, a) in args.iter().enumerate() {
        rows.row_mut(i + 1).assign(a);
    }
    let mut tape = Tape::new(set);
    let x = tape.constant(rows);
    let out = classify(&mut tape, params, x)?;
    Ok(tape.value(out).row(0).to_owned())
}

/// `-log softmax(logits)[gold]`, computed with max subtraction.
pub fn cross_entropy<T: Scalar>(logits: &Array1<T>, gold: usize) -> T {
    softmax_cross_entropy(logits, gold).0
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &Array1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

impl Prediction {
    pub fn new<T: Scalar>(id: impl Into<String>, logits: &Array1<T>, gold: usize) -> Self {
        Prediction {
            id: id.into(),
            logits: logits.iter().map(|v| v.to_f64_lossy()).collect(),
            predicted: argmax(logits),
            gold,
        }
    }

    /// Bare gold/predicted pair, for scoring without logits.
    pub fn labels(gold: usize, predicted: usize) -> Self {
        Prediction {
            id: String::new(),
            logits: Vec::new(),
            predicted,
            gold,
        }
    }
}
