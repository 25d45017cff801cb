//! The full forward pipeline: preprocessing, encoder, graph, classifier.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, Dropout, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{graph_forward, readout, DialogueGraph, GraphParams};
use crate::head::{argmax, classify, HeadParams, Prediction};
use crate::ir::{Instance, MAX_ARGS};
use crate::mask::{build_turn_mask, AttentionMask};
use crate::preprocess::{build_sequence, substitute_arguments, EncodedSequence, Layout, Vocab};
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamSet, Tape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub graph_layers: usize,
    pub gtn_steps: usize,
    pub k_max: usize,
    /// Position table size (N_max).
    pub max_len: usize,
    /// Speaker table size, including the reserved "no speaker" row 0.
    pub max_speakers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("max_speakers", self.max_speakers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads={} does not divide d_model={}",
                self.heads, self.d_model
            )));
        }
        if !(1..=MAX_ARGS).contains(&self.k_max) {
            return Err(Error::Config(format!(
                "k_max must be 1 or 2, got {}",
                self.k_max
            )));
        }
        if self.max_speakers < 2 {
            return Err(Error::Config("max_speakers must be at least 2".into()));
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_turn_mask: bool,
    pub no_special_tokens: bool,
    pub intra_turn_only: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.no_special_tokens && !self.no_turn_mask {
            return Err(Error::Config(
                "no_special_tokens requires no_turn_mask".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        if self.no_special_tokens {
            Layout::Plain
        } else {
            Layout::SpecialTokens
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoMask,
    NoSpecialTokens,
    IntraOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMask,
        Variant::NoSpecialTokens,
        Variant::IntraOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no_mask",
            Variant::NoSpecialTokens => "no_special_tokens",
            Variant::IntraOnly => "intra_only",
        }
    }

    pub fn ablation(&self) -> Ablation {
        match self {
            Variant::Full => Ablation::default(),
            Variant::NoMask => Ablation {
                no_turn_mask: true,
                ..Default::default()
            },
            Variant::NoSpecialTokens => Ablation {
                no_turn_mask: true,
                no_special_tokens: true,
                ..Default::default()
            },
            Variant::IntraOnly => Ablation {
                intra_turn_only: true,
                ..Default::default()
            },
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// An instance turned into everything the forward pass needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub seq: EncodedSequence,
    pub mask: AttentionMask,
    pub graph: DialogueGraph,
    pub label: usize,
    /// Whitespace token count of the original dialogue.
    pub dialogue_len: usize,
}

#[derive(Debug)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub ablation: Ablation,
    pub vocab: Vocab,
    pub params: ParamSet<T>,
    pub encoder: EncoderParams,
    pub graph: GraphParams,
    pub head: HeadParams,
    graph_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            dims: self.dims.clone(),
            ablation: self.ablation,
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            graph: self.graph.clone(),
            head: self.head.clone(),
            graph_calls: AtomicUsize::new(self.graph_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`. `dims.vocab_size` is taken from
    /// `vocab`.
    pub fn new(mut dims: ModelDims, ablation: Ablation, vocab: Vocab, seed: u64) -> Result<Self> {
        dims.vocab_size = vocab.len();
        dims.validate()?;
        ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderParams::init(&mut params, &dims, &mut rng);
        let graph = GraphParams::init(&mut params, &dims, &mut rng);
        let head = HeadParams::init(&mut params, &dims, &mut rng);
        Ok(Model {
            dims,
            ablation,
            vocab,
            params,
            encoder,
            graph,
            head,
            graph_calls: AtomicUsize::new(0),
        })
    }

    /// Wraps an existing parameter set (e.g. from a checkpoint), checking
    /// every tensor's shape against `dims`.
    pub fn from_parts(
        dims: ModelDims,
        ablation: Ablation,
        vocab: Vocab,
        params: ParamSet<T>,
    ) -> Result<Self> {
        dims.validate()?;
        ablation.validate()?;
        if vocab.len() != dims.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocab has {} tokens, dims say {}",
                vocab.len(),
                dims.vocab_size
            )));
        }
        let encoder = EncoderParams::resolve(&params, &dims)?;
        let graph = GraphParams::resolve(&params, &dims)?;
        let head = HeadParams::resolve(&params, &dims)?;
        let reference: Model<T> = Model::new(dims.clone(), ablation, vocab.clone(), 0)?;
        for (name, tensor) in reference.params.iter() {
            let found = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.get(found).dim() != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    params.get(found).dim(),
                    tensor.dim()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Model {
            dims,
            ablation,
            vocab,
            params,
            encoder,
            graph,
            head,
            graph_calls: AtomicUsize::new(0),
        })
    }

    /// Number of graph refinements run since construction.
    pub fn graph_calls(&self) -> usize {
        self.graph_calls.load(Ordering::Relaxed)
    }

    pub fn prepare(&self, inst: &Instance) -> Result<Prepared> {
        if inst.num_args() > self.dims.k_max {
            return Err(Error::ConfigMismatch(format!(
                "instance {:?} has {} arguments, model supports {}",
                inst.id,
                inst.num_args(),
                self.dims.k_max
            )));
        }
        let substituted = substitute_arguments(inst);
        let seq = build_sequence(
            &substituted,
            &self.vocab,
            self.dims.max_len,
            self.ablation.layout(),
        )?;
        let mask = build_turn_mask(&seq, !self.ablation.no_turn_mask);
        let graph = DialogueGraph::from_sequence(&seq);
        Ok(Prepared {
            id: inst.id.clone(),
            seq,
            mask,
            graph,
            label: inst.label,
            dialogue_len: inst.dialogue_token_len(),
        })
    }

    /// Logits node (`1 × C`) for one prepared instance.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        item: &Prepared,
        dropout: Option<&mut Dropout>,
    ) -> Result<NodeId> {
        let hidden = encode(tape, &self.encoder, &item.seq, &item.mask, dropout)?;
        let mut nodes = readout(tape, &item.seq, hidden);
        if !self.ablation.intra_turn_only {
            self.graph_calls.fetch_add(1, Ordering::Relaxed);
            nodes = graph_forward(tape, &self.graph, &item.graph, nodes);
        }
        let m = item.seq.num_turns;
        let rows: Vec<usize> = std::iter::once(0)
            .chain((0..item.seq.num_args).map(|j| 1 + m + j))
            .collect();
        let selected = tape.select_rows(nodes, &rows);
        classify(tape, &self.head, selected)
    }

    pub fn logits(&self, item: &Prepared) -> Result<Array1<T>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, item, None)?;
        Ok(tape.value(out).row(0).to_owned())
    }

    pub fn predict(&self, item: &Prepared) -> Result<Prediction> {
        Ok(Prediction::new(
            item.id.clone(),
            &self.logits(item)?,
            item.label,
        ))
    }

    pub fn loss(&self, item: &Prepared) -> Result<T> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, item, None)?;
        let loss = tape.cross_entropy(logits, item.label);
        Ok(tape.value(loss)[[0, 0]])
    }

    /// Adds `scale · ∂loss/∂θ` into `grads`; returns the loss and the
    /// predicted class.
    pub fn accumulate_gradient(
        &self,
        item: &Prepared,
        grads: &mut ParamSet<T>,
        scale: T,
        dropout: Option<&mut Dropout>,
    ) -> Result<(T, usize)> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, item, dropout)?;
        let predicted = argmax(&tape.value(logits).row(0).to_owned());
        let loss = tape.cross_entropy(logits, item.label);
        let value = tape.value(loss)[[0, 0]];
        tape.backward(loss, grads, scale);
        Ok((value, predicted))
    }
}
