//! Input reconstruction: argument substitution, turn-level special tokens,
//! `[CLS]`/`[SEP]` assembly and speaker ids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ir::{find_token_run, Instance};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const TURN: &str = "[T]";
pub const ARG1: &str = "[S1]";
pub const ARG2: &str = "[S2]";
pub const COLON: &str = ":";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const TURN_ID: usize = 4;
pub const ARG1_ID: usize = 5;
pub const ARG2_ID: usize = 6;
/// First id of the open vocabulary.
pub const OPEN_VOCAB_START: usize = 7;

const RESERVED: [&str; 7] = [PAD, UNK, CLS, SEP, TURN, ARG1, ARG2];

/// Marker token for argument `j` (0-based).
pub fn arg_marker(j: usize) -> String {
    format!("[S{}]", j + 1)
}

/// Vocabulary id of the marker for argument `j` (0-based).
pub fn arg_marker_id(j: usize) -> usize {
    ARG1_ID + j
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Reserved tokens only.
    pub fn new() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            vocab.insert(t);
        }
        vocab
    }

    /// Reserved tokens, the `:` separator, then every whitespace token of the
    /// (substituted) instances in order of first appearance.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        let mut vocab = Vocab::new();
        vocab.insert(COLON);
        for inst in instances {
            for turn in &inst.dialogue {
                for tok in turn
                    .speaker
                    .split_whitespace()
                    .chain(turn.text.split_whitespace())
                {
                    vocab.insert(tok);
                }
            }
            for arg in &inst.query.arguments {
                for tok in arg.split_whitespace() {
                    vocab.insert(tok);
                }
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, t) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*t) {
                return Err(Error::Checkpoint(format!("vocab slot {i} must hold {t}")));
            }
        }
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in &tokens {
            if vocab.index.contains_key(t) {
                return Err(Error::Checkpoint(format!("duplicate vocab token {t:?}")));
            }
            vocab.insert(t);
        }
        Ok(vocab)
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Which input layout [`build_sequence`] emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `[T]` ahead of every turn and argument.
    #[default]
    SpecialTokens,
    /// No `[T]` tokens; spans cover the bare turn/argument tokens.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    /// Surface tokens, parallel to `token_ids`.
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    /// Positions of every `[T]`: turns first, then arguments. Empty for
    /// [`Layout::Plain`].
    pub tau_positions: Vec<usize>,
    /// Half-open span per turn then per argument.
    pub spans: Vec<(usize, usize)>,
    pub sep_positions: Vec<usize>,
    pub cls_position: usize,
    pub num_turns: usize,
    pub num_args: usize,
    pub label: usize,
    pub layout: Layout,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn turn_spans(&self) -> &[(usize, usize)] {
        &self.spans[..self.num_turns]
    }

    pub fn arg_spans(&self) -> &[(usize, usize)] {
        &self.spans[self.num_turns..]
    }

    /// Speaker id of each turn.
    pub fn turn_speakers(&self) -> Vec<usize> {
        self.turn_spans()
            .iter()
            .map(|&(s, _)| self.speaker_ids[s])
            .collect()
    }

    /// Whether argument `j` (0-based) is marked anywhere in turn `i`'s span.
    pub fn turn_mentions_arg(&self, turn: usize, arg: usize) -> bool {
        let (s, e) = self.spans[turn];
        let marker = arg_marker_id(arg);
        self.token_ids[s..e].contains(&marker)
    }
}

fn replace_runs(text: &str, pattern: &[&str], marker: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if pattern.is_empty() {
        return text.to_string();
    }
    let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if find_token_run(&tokens, pattern, i) == Some(i) {
            out.push(marker);
            i += pattern.len();
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    out.join(" ")
}

/// Replaces every whole-token mention of argument `j` (and every speaker
/// equal to it) with `[S{j+1}]`. Arguments are processed in order.
pub fn substitute_arguments(inst: &Instance) -> Instance {
    let mut out = inst.clone();
    for (j, arg) in inst.query.arguments.iter().enumerate() {
        let marker = arg_marker(j);
        let pattern: Vec<&str> = arg.split_whitespace().collect();
        for turn in &mut out.dialogue {
            if turn.speaker == *arg {
                turn.speaker = marker.clone();
            }
            turn.text = replace_runs(&turn.text, &pattern, &marker);
        }
    }
    out.query.arguments = (0..inst.query.arguments.len()).map(arg_marker).collect();
    out
}

/// Assembles `[CLS] (T speaker : text)* [SEP] (T [S_j])* [SEP]`.
///
/// `inst` must already be substituted. Speaker ids follow order of first
/// appearance starting at 1; structural and query positions carry 0.
pub fn build_sequence(
    inst: &Instance,
    vocab: &Vocab,
    max_len: usize,
    layout: Layout,
) -> Result<EncodedSequence> {
    let special = layout == Layout::SpecialTokens;
    let mut seq = EncodedSequence {
        tokens: Vec::new(),
        token_ids: Vec::new(),
        speaker_ids: Vec::new(),
        tau_positions: Vec::new(),
        spans: Vec::new(),
        sep_positions: Vec::new(),
        cls_position: 0,
        num_turns: inst.dialogue.len(),
        num_args: inst.query.arguments.len(),
        label: inst.label,
        layout,
    };
    let push = |seq: &mut EncodedSequence, tok: &str, speaker: usize| {
        seq.tokens.push(tok.to_string());
        seq.token_ids.push(vocab.id(tok));
        seq.speaker_ids.push(speaker);
    };

    push(&mut seq, CLS, 0);
    let mut speakers: Vec<&str> = Vec::new();
    for turn in &inst.dialogue {
        let speaker = match speakers.iter().position(|s| *s == turn.speaker) {
            Some(i) => i + 1,
            None => {
                speakers.push(&turn.speaker);
                speakers.len()
            }
        };
        let start = seq.len();
        if special {
            seq.tau_positions.push(start);
            push(&mut seq, TURN, speaker);
        }
        for tok in turn.speaker.split_whitespace() {
            push(&mut seq, tok, speaker);
        }
        push(&mut seq, COLON, speaker);
        for tok in turn.text.split_whitespace() {
            push(&mut seq, tok, speaker);
        }
        seq.spans.push((start, seq.len()));
    }
    seq.sep_positions.push(seq.len());
    push(&mut seq, SEP, 0);
    for arg in &inst.query.arguments {
        let start = seq.len();
        if special {
            seq.tau_positions.push(start);
            push(&mut seq, TURN, 0);
        }
        for tok in arg.split_whitespace() {
            push(&mut seq, tok, 0);
        }
        seq.spans.push((start, seq.len()));
    }
    seq.sep_positions.push(seq.len());
    push(&mut seq, SEP, 0);

    if seq.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max_len,
        });
    }
    Ok(seq)
}

/// Restricts the dialogue to its shortest prefix in which every argument is
/// mentioned (as speaker or in text).
pub fn truncate_to_prefix(inst: &Instance) -> Instance {
    let mut satisfied = vec![false; inst.query.arguments.len()];
    let mut prefix = inst.dialogue.len();
    for (i, turn) in inst.dialogue.iter().enumerate() {
        for (j, arg) in inst.query.arguments.iter().enumerate() {
            if !satisfied[j] && Instance::turn_mentions(turn, arg) {
                satisfied[j] = true;
            }
        }
        if satisfied.iter().all(|&s| s) {
            prefix = i + 1;
            break;
        }
    }
    let mut out = inst.clone();
    out.dialogue.truncate(prefix.max(1));
    out
}
