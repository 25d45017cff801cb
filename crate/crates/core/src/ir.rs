//! Corpus data model and the line-delimited record format.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"id":"d1-0","turns":[{"speaker":"Speaker 1","text":"hi Frank"}],"arguments":["Speaker 1","Frank"],"label":"per:friends"}
//! ```
//!
//! Class names live in a separate schema file:
//!
//! ```text
//! {"class_names":["per:friends","per:boss"],"neutral_class":null}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on query arguments handled by the model.
pub const MAX_ARGS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Turn {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub arguments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub dialogue: Vec<Turn>,
    pub query: Query,
    pub label: usize,
}

impl Instance {
    pub fn num_turns(&self) -> usize {
        self.dialogue.len()
    }

    pub fn num_args(&self) -> usize {
        self.query.arguments.len()
    }

    /// Whitespace token count of the dialogue (speakers and texts).
    pub fn dialogue_token_len(&self) -> usize {
        self.dialogue
            .iter()
            .map(|t| t.speaker.split_whitespace().count() + t.text.split_whitespace().count())
            .sum()
    }

    /// Whether argument `arg` is mentioned in `turn`: the speaker matches
    /// exactly, or the argument's tokens occur contiguously in the text.
    pub fn turn_mentions(turn: &Turn, arg: &str) -> bool {
        if turn.speaker == arg {
            return true;
        }
        let pattern: Vec<&str> = arg.split_whitespace().collect();
        let tokens: Vec<&str> = turn.text.split_whitespace().collect();
        find_token_run(&tokens, &pattern, 0).is_some()
    }
}

/// First index `>= from` where `pattern` occurs as a contiguous run of whole
/// tokens in `tokens`.
pub fn find_token_run(tokens: &[&str], pattern: &[&str], from: usize) -> Option<usize> {
    if pattern.is_empty() || tokens.len() < pattern.len() {
        return None;
    }
    (from..=tokens.len() - pattern.len()).find(|&i| tokens[i..i + pattern.len()] == *pattern)
}

/// Class names plus optional neutral class and relation groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub neutral_class: Option<String>,
    /// Optional class → group assignment (e.g. "asymmetric", "symmetric",
    /// "other") used for grouped evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_groups: Option<BTreeMap<String, String>>,
}

impl Schema {
    pub fn new(class_names: Vec<String>) -> Self {
        Schema {
            class_names,
            neutral_class: None,
            class_groups: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema =
            serde_json::from_str(text).map_err(|e| Error::InvalidSchema(e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    fn check(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::InvalidSchema("class_names is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        if let Some(n) = &self.neutral_class {
            if !seen.contains(n.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "neutral class {n:?} not in class_names"
                )));
            }
        }
        if let Some(groups) = &self.class_groups {
            for name in groups.keys() {
                if !seen.contains(name.as_str()) {
                    return Err(Error::InvalidSchema(format!(
                        "grouped class {name:?} not in class_names"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub class_names: Vec<String>,
    pub neutral_class: Option<usize>,
    pub class_groups: Option<BTreeMap<String, String>>,
}

impl Corpus {
    pub fn empty(schema: &Schema) -> Self {
        Corpus {
            instances: Vec::new(),
            class_names: schema.class_names.clone(),
            neutral_class: schema
                .neutral_class
                .as_deref()
                .and_then(|n| schema.class_index(n)),
            class_groups: schema.class_groups.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            class_names: self.class_names.clone(),
            neutral_class: self.neutral_class.map(|i| self.class_names[i].clone()),
            class_groups: self.class_groups.clone(),
        }
    }
}

#[derive(Deserialize, Serialize)]
struct Record {
    id: String,
    turns: Vec<Turn>,
    arguments: Vec<String>,
    label: String,
}

/// Parses a line-delimited corpus. Blank lines are skipped; line numbers in
/// errors are 1-based. Nothing is returned on error.
pub fn parse_corpus<R: BufRead>(reader: R, schema: &Schema) -> Result<Corpus> {
    schema.check()?;
    let mut corpus = Corpus::empty(schema);
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = schema
            .class_index(&record.label)
            .ok_or_else(|| Error::UnknownClass {
                line: line_no,
                name: record.label.clone(),
            })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        let inst = Instance {
            id: record.id,
            dialogue: record.turns,
            query: Query {
                arguments: record.arguments,
            },
            label,
        };
        let report = validate_instance(&inst, schema.class_names.len());
        if !report.is_empty() {
            let codes: Vec<&str> = report.iter().map(|v| v.code.as_str()).collect();
            return Err(Error::InvalidInstance {
                line: line_no,
                id: inst.id,
                codes: codes.join(","),
            });
        }
        corpus.instances.push(inst);
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path, schema: &Schema) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file), schema)
}

/// Writes `corpus` in the record format accepted by [`parse_corpus`].
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for inst in &corpus.instances {
        let record = Record {
            id: inst.id.clone(),
            turns: inst.dialogue.clone(),
            arguments: inst.query.arguments.clone(),
            label: corpus.class_names[inst.label].clone(),
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationCode {
    EmptyDialogue,
    EmptySpeaker,
    EmptyText,
    BadArgCount,
    EmptyArgument,
    ArgNotMentioned,
    LabelOutOfRange,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::EmptyDialogue => "EMPTY_DIALOGUE",
            ViolationCode::EmptySpeaker => "EMPTY_SPEAKER",
            ViolationCode::EmptyText => "EMPTY_TEXT",
            ViolationCode::BadArgCount => "BAD_ARG_COUNT",
            ViolationCode::EmptyArgument => "EMPTY_ARGUMENT",
            ViolationCode::ArgNotMentioned => "ARG_NOT_MENTIONED",
            ViolationCode::LabelOutOfRange => "LABEL_OUT_OF_RANGE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

/// Checks every instance invariant; an empty report means the instance is valid.
pub fn validate_instance(inst: &Instance, class_count: usize) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |code, detail: String| report.push(Violation { code, detail });

    if inst.dialogue.is_empty() {
        push(ViolationCode::EmptyDialogue, "dialogue has no turns".into());
    }
    for (i, turn) in inst.dialogue.iter().enumerate() {
        if turn.speaker.trim().is_empty() {
            push(ViolationCode::EmptySpeaker, format!("turn {i}"));
        }
        if turn.text.split_whitespace().next().is_none() {
            push(ViolationCode::EmptyText, format!("turn {i}"));
        }
    }
    let k = inst.query.arguments.len();
    if k == 0 || k > MAX_ARGS {
        push(ViolationCode::BadArgCount, format!("{k} arguments"));
    }
    for arg in &inst.query.arguments {
        if arg.split_whitespace().next().is_none() {
            push(ViolationCode::EmptyArgument, format!("{arg:?}"));
        } else if !inst
            .dialogue
            .iter()
            .any(|t| Instance::turn_mentions(t, arg))
        {
            push(ViolationCode::ArgNotMentioned, arg.clone());
        }
    }
    if inst.label >= class_count {
        push(
            ViolationCode::LabelOutOfRange,
            format!("label {} with {class_count} classes", inst.label),
        );
    }
    report
}
