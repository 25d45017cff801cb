//! Transformer encoder with additive token, position and speaker embeddings
//! and masked multi-head self-attention (post-norm).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::ModelDims;
use crate::preprocess::EncodedSequence;
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};

/// Half-width of the uniform initializer for embeddings.
pub const INIT_RANGE: f64 = 0.05;

pub(crate) fn uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    range: f64,
) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::from_f64_lossy(rng.gen_range(-range..range))
    })
}

/// Glorot-uniform `rows × cols` weight matrix.
pub(crate) fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    /// Row 0 is the "no speaker" row: always zero, never updated.
    pub speaker_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub heads: usize,
}

impl EncoderParams {
    pub fn init<T: Scalar>(set: &mut ParamSet<T>, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.d_model;
        let token_emb = set.add(
            "encoder.token_emb",
            uniform(rng, dims.vocab_size, d, INIT_RANGE),
        );
        let pos_emb = set.add("encoder.pos_emb", uniform(rng, dims.max_len, d, INIT_RANGE));
        let mut speakers: Array2<T> = uniform(rng, dims.max_speakers, d, INIT_RANGE);
        speakers.row_mut(0).fill(T::zero());
        let speaker_emb = set.add("encoder.speaker_emb", speakers);
        let ones = || Array2::from_elem((1, d), T::one());
        let layers = (0..dims.layers)
            .map(|l| {
                let name = |p: &str| format!("encoder.layer{l}.{p}");
                LayerParams {
                    w_query: set.add(name("w_query"), glorot(rng, d, d)),
                    w_key: set.add(name("w_key"), glorot(rng, d, d)),
                    w_value: set.add(name("w_value"), glorot(rng, d, d)),
                    w_out: set.add(name("w_out"), glorot(rng, d, d)),
                    ln1_gain: set.add(name("ln1_gain"), ones()),
                    ln1_bias: set.add(name("ln1_bias"), Array2::zeros((1, d))),
                    ff_in: set.add(name("ff_in"), glorot(rng, d, dims.d_ff)),
                    ff_in_bias: set.add(name("ff_in_bias"), Array2::zeros((1, dims.d_ff))),
                    ff_out: set.add(name("ff_out"), glorot(rng, dims.d_ff, d)),
                    ff_out_bias: set.add(name("ff_out_bias"), Array2::zeros((1, d))),
                    ln2_gain: set.add(name("ln2_gain"), ones()),
                    ln2_bias: set.add(name("ln2_bias"), Array2::zeros((1, d))),
                }
            })
            .collect();
        EncoderParams {
            token_emb,
            pos_emb,
            speaker_emb,
            layers,
            heads: dims.heads,
        }
    }

    /// Re-resolves handles by name in a loaded parameter set.
    pub fn resolve<T: Scalar>(set: &ParamSet<T>, dims: &ModelDims) -> Result<Self> {
        let get = |name: String| {
            set.find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let layers = (0..dims.layers)
            .map(|l| {
                let name = |p: &str| format!("encoder.layer{l}.{p}");
                Ok(LayerParams {
                    w_query: get(name("w_query"))?,
                    w_key: get(name("w_key"))?,
                    w_value: get(name("w_value"))?,
                    w_out: get(name("w_out"))?,
                    ln1_gain: get(name("ln1_gain"))?,
                    ln1_bias: get(name("ln1_bias"))?,
                    ff_in: get(name("ff_in"))?,
                    ff_in_bias: get(name("ff_in_bias"))?,
                    ff_out: get(name("ff_out"))?,
                    ff_out_bias: get(name("ff_out_bias"))?,
                    ln2_gain: get(name("ln2_gain"))?,
                    ln2_bias: get(name("ln2_bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            token_emb: get("encoder.token_emb".into())?,
            pos_emb: get("encoder.pos_emb".into())?,
            speaker_emb: get("encoder.speaker_emb".into())?,
            layers,
            heads: dims.heads,
        })
    }
}

/// Inverted dropout applied during training only.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).raw_dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn(shape, || {
            if rng.gen::<f64>() < keep {
                T::from_f64_lossy(1.0 / keep)
            } else {
                T::zero()
            }
        });
        tape.mul_const(x, mask)
    }
}

/// `token_emb[id] + pos_emb[p] + speaker_emb[speaker]` per position.
pub fn embed<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &EncoderParams,
    seq: &EncodedSequence,
) -> Result<NodeId> {
    let tok = tape.param(params.token_emb);
    let pos = tape.param(params.pos_emb);
    let spk = tape.param(params.speaker_emb);
    let limits = [
        ("token", tape.value(tok).nrows(), &seq.token_ids),
        ("speaker", tape.value(spk).nrows(), &seq.speaker_ids),
    ];
    for (what, limit, ids) in limits {
        if let Some(&id) = ids.iter().find(|&&id| id >= limit) {
            return Err(Error::IdOutOfRange { what, id, limit });
        }
    }
    let n_max = tape.value(pos).nrows();
    if seq.len() > n_max {
        return Err(Error::IdOutOfRange {
            what: "position",
            id: seq.len() - 1,
            limit: n_max,
        });
    }
    let positions: Vec<usize> = (0..seq.len()).collect();
    let t = tape.gather(tok, &seq.token_ids, false);
    let p = tape.gather(pos, &positions, false);
    let s = tape.gather(spk, &seq.speaker_ids, true);
    let tp = tape.add(t, p);
    Ok(tape.add(tp, s))
}

/// Node handles produced by one attention sublayer.
pub struct AttentionTrace {
    /// Per-head attention weights (N × N).
    pub probs: Vec<NodeId>,
    /// Concatenated head outputs before the output projection.
    pub context: NodeId,
    /// Context after the output projection (pre-residual).
    pub output: NodeId,
}

/// Masked multi-head self-attention, without residual or normalization.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layer: &LayerParams,
    heads: usize,
    hidden: NodeId,
    mask: &AttentionMask,
) -> Result<AttentionTrace> {
    let (n, d) = tape.value(hidden).dim();
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask {} vs sequence {n}",
            mask.len()
        )));
    }
    if let Some(row) = (0..n).find(|&r| mask.row_sum(r) == 0) {
        return Err(Error::EmptyMaskRow { row });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{heads} heads do not divide d={d}"
        )));
    }
    let dh = d / heads;
    let wq = tape.param(layer.w_query);
    let wk = tape.param(layer.w_key);
    let wv = tape.param(layer.w_value);
    let wo = tape.param(layer.w_out);
    let q = tape.matmul(hidden, wq);
    let k = tape.matmul(hidden, wk);
    let v = tape.matmul(hidden, wv);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, a, b);
        let kh = tape.slice_cols(k, a, b);
        let vh = tape.slice_cols(v, a, b);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let p = tape.masked_softmax(scores, &mask.allow);
        probs.push(p);
        outs.push(tape.matmul(p, vh));
    }
    let context = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    let output = tape.matmul(context, wo);
    Ok(AttentionTrace {
        probs,
        context,
        output,
    })
}

/// One encoder layer: attention, residual, norm, feed-forward, residual, norm.
pub fn attention_layer<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layer: &LayerParams,
    heads: usize,
    hidden: NodeId,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let attn = self_attention(tape, layer, heads, hidden, mask)?;
    let mut attn_out = attn.output;
    if let Some(d) = dropout.as_deref_mut() {
        attn_out = d.apply(tape, attn_out);
    }
    let res1 = tape.add(hidden, attn_out);
    let g1 = tape.param(layer.ln1_gain);
    let b1 = tape.param(layer.ln1_bias);
    let h1 = tape.layer_norm(res1, g1, b1);

    let w_in = tape.param(layer.ff_in);
    let b_in = tape.param(layer.ff_in_bias);
    let w_out = tape.param(layer.ff_out);
    let b_out = tape.param(layer.ff_out_bias);
    let f = tape.matmul(h1, w_in);
    let f = tape.add_row(f, b_in);
    let f = tape.relu(f);
    let f = tape.matmul(f, w_out);
    let mut f = tape.add_row(f, b_out);
    if let Some(d) = dropout {
        f = d.apply(tape, f);
    }
    let res2 = tape.add(h1, f);
    let g2 = tape.param(layer.ln2_gain);
    let b2 = tape.param(layer.ln2_bias);
    Ok(tape.layer_norm(res2, g2, b2))
}

/// Embedding followed by every layer, all under the same mask.
pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &EncoderParams,
    seq: &EncodedSequence,
    mask: &AttentionMask,
    mut dropout: Option<&mut Dropout>,
) -> Result<NodeId> {
    let mut h = embed(tape, params, seq)?;
    for layer in &params.layers {
        h = attention_layer(tape, layer, params.heads, h, mask, dropout.as_deref_mut())?;
    }
    Ok(h)
}

/// Final hidden states (N × d) without keeping the tape.
pub fn encode_values<T: Scalar>(
    set: &ParamSet<T>,
    params: &EncoderParams,
    seq: &EncodedSequence,
    mask: &AttentionMask,
) -> Result<Array2<T>> {
    let mut tape = Tape::new(set);
    let h = encode(&mut tape, params, seq, mask, None)?;
    Ok(tape.value(h).clone())
}
