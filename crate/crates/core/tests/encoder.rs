mod common;

use hidialog::encoder::{embed, encode, encode_values, self_attention};
use hidialog::ir::Instance;
use hidialog::mask::{build_turn_mask, AttentionMask};
use hidialog::model::{Ablation, Model, ModelDims, Prepared};
use hidialog::preprocess::{substitute_arguments, Vocab};
use hidialog::tape::Tape;
use hidialog::Error;
use ndarray::{s, Array2};
use proptest::prelude::*;

fn dims(layers: usize) -> ModelDims {
    ModelDims {
        vocab_size: 0,
        num_classes: 3,
        d_model: 16,
        d_ff: 32,
        layers,
        heads: 4,
        graph_layers: 1,
        gtn_steps: 2,
        k_max: 2,
        max_len: 256,
        max_speakers: 8,
    }
}

fn setup(inst: &Instance, layers: usize, ablation: Ablation, seed: u64) -> (Model<f64>, Prepared) {
    let vocab = Vocab::build([&substitute_arguments(inst)]);
    let model = Model::new(dims(layers), ablation, vocab, seed).unwrap();
    let item = model.prepare(inst).unwrap();
    (model, item)
}

fn hidden(model: &Model<f64>, item: &Prepared, token_ids: &[usize]) -> Array2<f64> {
    let mut seq = item.seq.clone();
    seq.token_ids = token_ids.to_vec();
    encode_values(&model.params, &model.encoder, &seq, &item.mask).unwrap()
}

fn other_id(id: usize, vocab: usize) -> usize {
    if id + 1 < vocab {
        id + 1
    } else {
        id - 1
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn one_layer_tau_rows_ignore_out_of_span_tokens(seed in any::<u64>()) {
        let inst = common::random_instance(seed, 8, 2, 3);
        let (model, item) = setup(&inst, 1, Ablation::default(), seed);
        let base = hidden(&model, &item, &item.seq.token_ids);
        let vocab = model.vocab.len();
        for p in 0..item.seq.len() {
            let mut ids = item.seq.token_ids.clone();
            ids[p] = other_id(ids[p], vocab);
            let perturbed = hidden(&model, &item, &ids);
            for (v, &tau) in item.seq.tau_positions.iter().enumerate() {
                let (start, end) = item.seq.spans[v];
                let same = base.row(tau) == perturbed.row(tau);
                if (start..end).contains(&p) {
                    prop_assert!(!same, "in-span change at {p} left tau {tau} unchanged");
                } else {
                    prop_assert!(same, "out-of-span change at {p} reached tau {tau}");
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions_over_allowed_keys(seed in any::<u64>()) {
        let inst = common::random_instance(seed, 8, 2, 3);
        let (model, item) = setup(&inst, 1, Ablation::default(), seed);
        let mut tape = Tape::new(&model.params);
        let h = embed(&mut tape, &model.encoder, &item.seq).unwrap();
        let trace = self_attention(&mut tape, &model.encoder.layers[0], 4, h, &item.mask).unwrap();
        for &p in &trace.probs {
            let probs = tape.value(p);
            for (r, row) in probs.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                for (c, &w) in row.iter().enumerate() {
                    if item.mask.allow[[r, c]] {
                        prop_assert!(w > 0.0);
                    } else {
                        prop_assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn without_mask_out_of_span_tokens_reach_tau_rows() {
    let mut trials = 0;
    let mut changed = 0;
    for seed in 0..50u64 {
        let inst = common::random_instance(seed, 8, 2, 3);
        let ablation = Ablation {
            no_turn_mask: true,
            ..Default::default()
        };
        let (model, item) = setup(&inst, 1, ablation, seed);
        let base = hidden(&model, &item, &item.seq.token_ids);
        for p in 0..item.seq.len() {
            let mut ids = item.seq.token_ids.clone();
            ids[p] = other_id(ids[p], model.vocab.len());
            let perturbed = hidden(&model, &item, &ids);
            for (v, &tau) in item.seq.tau_positions.iter().enumerate() {
                let (start, end) = item.seq.spans[v];
                if !(start..end).contains(&p) {
                    trials += 1;
                    changed += usize::from(base.row(tau) != perturbed.row(tau));
                }
            }
        }
    }
    assert!(changed as f64 >= 0.95 * trials as f64, "{changed}/{trials}");
}

fn two_turns() -> Instance {
    common::random_instance(11, 2, 2, 3)
}

#[test]
fn zero_speaker_rows_leave_token_plus_position() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 1);
    let mut seq = item.seq.clone();
    seq.speaker_ids.iter_mut().for_each(|s| *s = 0);
    let mut tape = Tape::new(&model.params);
    let e = embed(&mut tape, &model.encoder, &seq).unwrap();
    let tok = model.params.get(model.encoder.token_emb);
    let pos = model.params.get(model.encoder.pos_emb);
    for (p, &id) in seq.token_ids.iter().enumerate() {
        let expected = &tok.row(id) + &pos.row(p);
        assert_eq!(tape.value(e).row(p), expected);
    }
}

#[test]
fn repeated_token_differs_by_position_embedding() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 2);
    let mut seq = item.seq.clone();
    seq.token_ids[3] = seq.token_ids[5];
    seq.speaker_ids[3] = seq.speaker_ids[5];
    let mut tape = Tape::new(&model.params);
    let e = embed(&mut tape, &model.encoder, &seq).unwrap();
    let pos = model.params.get(model.encoder.pos_emb);
    let diff = &tape.value(e).row(5) - &tape.value(e).row(3);
    let expected = &pos.row(5) - &pos.row(3);
    for (a, b) in diff.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn single_allowed_key_returns_its_value() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 3);
    let n = item.seq.len();
    let mask = AttentionMask {
        allow: Array2::from_shape_fn((n, n), |(r, c)| r == c),
    };
    let mut tape = Tape::new(&model.params);
    let h = embed(&mut tape, &model.encoder, &item.seq).unwrap();
    let trace = self_attention(&mut tape, &model.encoder.layers[0], 4, h, &mask).unwrap();
    let values = tape
        .value(h)
        .dot(model.params.get(model.encoder.layers[0].w_value));
    let context = tape.value(trace.context);
    for (a, b) in context.iter().zip(values.iter()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn identical_rows_give_identical_outputs() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 4);
    let n = item.seq.len();
    let mut tape = Tape::new(&model.params);
    let row = Array2::from_shape_fn((1, 16), |(_, c)| (c as f64 * 0.37).sin());
    let h = tape.constant(row.broadcast((n, 16)).unwrap().to_owned());
    let trace = self_attention(
        &mut tape,
        &model.encoder.layers[0],
        4,
        h,
        &AttentionMask::full(n),
    )
    .unwrap();
    let out = tape.value(trace.output);
    for r in 1..n {
        for (a, b) in out.row(r).iter().zip(out.row(0).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_layers_is_embedding() {
    let (model, item) = setup(&two_turns(), 0, Ablation::default(), 5);
    let mut tape = Tape::new(&model.params);
    let e = embed(&mut tape, &model.encoder, &item.seq).unwrap();
    let embedded = tape.value(e).clone();
    assert_eq!(
        encode_values(&model.params, &model.encoder, &item.seq, &item.mask).unwrap(),
        embedded
    );
}

#[test]
fn empty_mask_row_is_rejected() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 6);
    let mut mask = build_turn_mask(&item.seq, true);
    mask.allow.slice_mut(s![2, ..]).fill(false);
    let mut tape = Tape::new(&model.params);
    let err = encode(&mut tape, &model.encoder, &item.seq, &mask, None).unwrap_err();
    assert!(matches!(err, Error::EmptyMaskRow { row: 2 }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn out_of_range_token_is_rejected() {
    let (model, item) = setup(&two_turns(), 1, Ablation::default(), 7);
    let mut seq = item.seq.clone();
    seq.token_ids[1] = model.vocab.len();
    let mut tape = Tape::new(&model.params);
    assert!(matches!(
        embed(&mut tape, &model.encoder, &seq),
        Err(Error::IdOutOfRange { what: "token", .. })
    ));
}
