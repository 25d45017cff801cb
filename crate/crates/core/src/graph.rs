//! Heterogeneous dialogue graph and its refinement.
//!
//! Nodes: index 0 is the dialogue node, `1..=m` the turns, `m+1..=m+k` the
//! arguments. Edges live in five symmetric boolean channels. Refinement
//! mixes the degree-normalized channels with a learned softmax per
//! composition step, multiplies the mixed adjacencies together, and runs
//! graph convolutions over the result.

use std::fmt;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::preprocess::{EncodedSequence, Layout};
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Dialogue,
    Speaker,
    Entity,
    Sequence,
    Identity,
}

pub const CHANNELS: [Channel; 5] = [
    Channel::Dialogue,
    Channel::Speaker,
    Channel::Entity,
    Channel::Sequence,
    Channel::Identity,
];

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Dialogue => "dialogue",
            Channel::Speaker => "speaker",
            Channel::Entity => "entity",
            Channel::Sequence => "sequence",
            Channel::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Dialogue,
    Turn(usize),
    Argument(usize),
}

/// Node set and edge channels, independent of any features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueGraph {
    pub num_turns: usize,
    pub num_args: usize,
    pub turn_speakers: Vec<usize>,
    channels: Vec<Array2<bool>>,
}

impl DialogueGraph {
    pub fn from_sequence(seq: &EncodedSequence) -> Self {
        let m = seq.num_turns;
        let k = seq.num_args;
        let n = 1 + m + k;
        let speakers = seq.turn_speakers();
        let mut channels = vec![Array2::from_elem((n, n), false); CHANNELS.len()];
        let mut link = |c: Channel, a: usize, b: usize| {
            channels[c as usize][[a, b]] = true;
            channels[c as usize][[b, a]] = true;
        };
        for i in 0..m {
            link(Channel::Dialogue, 0, 1 + i);
            for j in i + 1..m {
                link(Channel::Sequence, 1 + i, 1 + j);
                if speakers[i] == speakers[j] {
                    link(Channel::Speaker, 1 + i, 1 + j);
                }
            }
            for a in 0..k {
                if seq.turn_mentions_arg(i, a) {
                    link(Channel::Entity, 1 + m + a, 1 + i);
                }
            }
        }
        for v in 0..n {
            link(Channel::Identity, v, v);
        }
        DialogueGraph {
            num_turns: m,
            num_args: k,
            turn_speakers: speakers,
            channels,
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.num_turns + self.num_args
    }

    pub fn node_kind(&self, v: usize) -> NodeKind {
        match v {
            0 => NodeKind::Dialogue,
            v if v <= self.num_turns => NodeKind::Turn(v - 1),
            v => NodeKind::Argument(v - 1 - self.num_turns),
        }
    }

    pub fn channel(&self, c: Channel) -> &Array2<bool> {
        &self.channels[c as usize]
    }

    /// Undirected edges `(a, b)` with `a <= b`, sorted.
    pub fn edges(&self, c: Channel) -> Vec<(usize, usize)> {
        let adj = self.channel(c);
        let n = self.node_count();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a..n {
                if adj[[a, b]] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self, c: Channel) -> usize {
        self.edges(c).len()
    }

    /// `D^{-1/2} A D^{-1/2}` for every channel; isolated nodes keep zero rows.
    pub fn normalized_channels<T: Scalar>(&self) -> Vec<Array2<T>> {
        CHANNELS
            .iter()
            .map(|&c| {
                let adj = self.channel(c);
                let n = adj.nrows();
                let deg: Vec<f64> = adj
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().filter(|&&b| b).count() as f64)
                    .collect();
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if adj[[i, j]] {
                        T::from_f64_lossy(1.0 / (deg[i] * deg[j]).sqrt())
                    } else {
                        T::zero()
                    }
                })
            })
            .collect()
    }
}

/// A graph together with its initial node features.
#[derive(Debug, Clone, PartialEq)]
pub struct HetGraph<T> {
    pub structure: DialogueGraph,
    pub node_features: Array2<T>,
}

/// `n × N` matrix whose product with the hidden states yields node features:
/// `[CLS]` for the dialogue node and either the `[T]` row or the span mean
/// for turns and arguments.
pub fn readout_matrix<T: Scalar>(seq: &EncodedSequence) -> Array2<T> {
    let n = 1 + seq.num_turns + seq.num_args;
    let mut out = Array2::zeros((n, seq.len()));
    out[[0, seq.cls_position]] = T::one();
    for (v, &(start, end)) in seq.spans.iter().enumerate() {
        match seq.layout {
            Layout::SpecialTokens => out[[v + 1, seq.tau_positions[v]]] = T::one(),
            Layout::Plain => {
                let w = T::one() / T::from_usize(end - start).unwrap();
                for p in start..end {
                    out[[v + 1, p]] = w;
                }
            }
        }
    }
    out
}

/// Node features on the tape.
pub fn readout<T: Scalar>(tape: &mut Tape<'_, T>, seq: &EncodedSequence, hidden: NodeId) -> NodeId {
    match seq.layout {
        Layout::SpecialTokens => {
            let rows: Vec<usize> = std::iter::once(seq.cls_position)
                .chain(seq.tau_positions.iter().copied())
                .collect();
            tape.select_rows(hidden, &rows)
        }
        Layout::Plain => {
            let pool = tape.constant(readout_matrix(seq));
            tape.matmul(pool, hidden)
        }
    }
}

pub fn build_graph<T: Scalar>(seq: &EncodedSequence, hidden: &Array2<T>) -> Result<HetGraph<T>> {
    if hidden.nrows() != seq.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hidden rows for {} positions",
            hidden.nrows(),
            seq.len()
        )));
    }
    Ok(HetGraph {
        structure: DialogueGraph::from_sequence(seq),
        node_features: readout_matrix::<T>(seq).dot(hidden),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphParams {
    /// One `1 × 5` logit row per composition step.
    pub channel_logits: Vec<ParamId>,
    /// `(weight d × d, bias 1 × d)` per convolution layer.
    pub gcn: Vec<(ParamId, ParamId)>,
}

impl GraphParams {
    /// Channel logits start at zero (uniform mix); convolution weights use a
    /// Glorot-uniform range.
    pub fn init<T: Scalar>(set: &mut ParamSet<T>, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.d_model;
        let channel_logits = (0..dims.gtn_steps)
            .map(|g| {
                set.add(
                    format!("graph.step{g}.channel_logits"),
                    Array2::zeros((1, CHANNELS.len())),
                )
            })
            .collect();
        let gcn = (0..dims.graph_layers)
            .map(|l| {
                let w = set.add(format!("graph.gcn{l}.weight"), glorot(rng, d, d));
                let b = set.add(format!("graph.gcn{l}.bias"), Array2::zeros((1, d)));
                (w, b)
            })
            .collect();
        GraphParams {
            channel_logits,
            gcn,
        }
    }

    pub fn resolve<T: Scalar>(set: &ParamSet<T>, dims: &ModelDims) -> Result<Self> {
        let get = |name: String| {
            set.find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        Ok(GraphParams {
            channel_logits: (0..dims.gtn_steps)
                .map(|g| get(format!("graph.step{g}.channel_logits")))
                .collect::<Result<_>>()?,
            gcn: (0..dims.graph_layers)
                .map(|l| {
                    Ok((
                        get(format!("graph.gcn{l}.weight"))?,
                        get(format!("graph.gcn{l}.bias"))?,
                    ))
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// `Q_1 · … · Q_G` with `Q_g = Σ_c softmax(logits_g)_c · Â_c`.
pub fn gtn_compose<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &GraphParams,
    graph: &DialogueGraph,
) -> NodeId {
    let mats = graph.normalized_channels::<T>();
    let all = Array2::from_elem((1, CHANNELS.len()), true);
    let mut composed: Option<NodeId> = None;
    for &logits in &params.channel_logits {
        let l = tape.param(logits);
        let w = tape.masked_softmax(l, &all);
        let q = tape.mix(w, mats.clone());
        composed = Some(match composed {
            None => q,
            Some(acc) => tape.matmul(acc, q),
        });
    }
    composed.unwrap_or_else(|| {
        let n = graph.node_count();
        tape.constant(Array2::eye(n))
    })
}

/// Per layer: `X ← ReLU(D̂⁻¹(A + I) X W + b)`, the last layer without ReLU.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &GraphParams,
    adjacency: NodeId,
    features: NodeId,
) -> NodeId {
    let with_self = tape.add_identity(adjacency);
    let propagate = tape.row_normalize(with_self);
    let mut x = features;
    for (l, &(w, b)) in params.gcn.iter().enumerate() {
        let wn = tape.param(w);
        let bn = tape.param(b);
        let agg = tape.matmul(propagate, x);
        let lin = tape.matmul(agg, wn);
        x = tape.add_row(lin, bn);
        if l + 1 < params.gcn.len() {
            x = tape.relu(x);
        }
    }
    x
}

pub fn graph_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &GraphParams,
    graph: &DialogueGraph,
    features: NodeId,
) -> NodeId {
    let adjacency = gtn_compose(tape, params, graph);
    gcn_forward(tape, params, adjacency, features)
}

pub fn gtn_compose_values<T: Scalar>(
    set: &ParamSet<T>,
    params: &GraphParams,
    graph: &DialogueGraph,
) -> Array2<T> {
    let mut tape = Tape::new(set);
    let out = gtn_compose(&mut tape, params, graph);
    tape.value(out).clone()
}

pub fn gcn_forward_values<T: Scalar>(
    set: &ParamSet<T>,
    params: &GraphParams,
    adjacency: &Array2<T>,
    features: &Array2<T>,
) -> Array2<T> {
    let mut tape = Tape::new(set);
    let a = tape.constant(adjacency.clone());
    let x = tape.constant(features.clone());
    let out = gcn_forward(&mut tape, params, a, x);
    tape.value(out).clone()
}

pub fn graph_forward_values<T: Scalar>(
    set: &ParamSet<T>,
    params: &GraphParams,
    graph: &HetGraph<T>,
) -> Array2<T> {
    let mut tape = Tape::new(set);
    let x = tape.constant(graph.node_features.clone());
    let out = graph_forward(&mut tape, params, &graph.structure, x);
    tape.value(out).clone()
}
