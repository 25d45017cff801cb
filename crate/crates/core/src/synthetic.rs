//! Hermetic synthetic relation corpora with a fixed grammar.
//!
//! Every instance asks about a speaker (`Speaker n`) and a named person.
//! The label is carried by a cue word: in [`CuePlacement::Mention`] corpora
//! the cue sits in the turn that mentions the person, and other turns may
//! carry distractor cues of other classes; in [`CuePlacement::Final`]
//! corpora both arguments appear in turn 1 and the cue is always in the
//! last turn.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ir::{Corpus, Instance, Query, Schema, Turn};

/// `(class name, cue word, relation group)`.
pub const CLASSES: [(&str, &str, &str); 8] = [
    ("per:friends", "buddy", "symmetric"),
    ("per:siblings", "sister", "symmetric"),
    ("per:boss", "manager", "asymmetric"),
    ("per:subordinate", "intern", "asymmetric"),
    ("per:spouse", "wife", "symmetric"),
    ("per:age", "birthday", "other"),
    ("per:parents", "mom", "asymmetric"),
    ("per:children", "kid", "asymmetric"),
];

const SPEAKERS: [&str; 4] = ["Speaker 1", "Speaker 2", "Speaker 3", "Speaker 4"];

const NAMES: [&str; 8] = [
    "Emma", "Ross", "Joey", "Rachel", "Monica", "Phoebe", "Chandler", "Ben",
];

const FILLER: [&str; 16] = [
    "yeah", "so", "the", "we", "went", "there", "okay", "really", "i", "think", "that", "was",
    "fun", "you", "know", "well",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CuePlacement {
    /// Cue in the turn mentioning the named argument.
    #[default]
    Mention,
    /// Arguments in turn 1, cue in the final turn.
    Final,
}

impl std::str::FromStr for CuePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mention" => Ok(CuePlacement::Mention),
            "final" => Ok(CuePlacement::Final),
            other => Err(Error::Config(format!("unknown cue placement {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub instances: usize,
    pub classes: usize,
    pub seed: u64,
    pub placement: CuePlacement,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability that a non-cue turn carries a cue word of another class.
    pub distractor_rate: f64,
    /// Prefix for generated ids.
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            instances: 200,
            classes: 4,
            seed: 7,
            placement: CuePlacement::Mention,
            min_turns: 2,
            max_turns: 4,
            distractor_rate: 0.5,
            id_prefix: "syn".into(),
        }
    }
}

pub fn schema(classes: usize) -> Result<Schema> {
    if !(2..=CLASSES.len()).contains(&classes) {
        return Err(Error::Config(format!(
            "synthetic corpora support 2..={} classes",
            CLASSES.len()
        )));
    }
    let used = &CLASSES[..classes];
    Ok(Schema {
        class_names: used.iter().map(|c| c.0.to_string()).collect(),
        neutral_class: None,
        class_groups: Some(
            used.iter()
                .map(|c| (c.0.to_string(), c.2.to_string()))
                .collect::<BTreeMap<_, _>>(),
        ),
    })
}

fn sentence(rng: &mut ChaCha8Rng, extra: &[&str]) -> String {
    let n = rng.gen_range(3..=5);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).unwrap()).collect();
    for w in extra {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, w);
    }
    words.join(" ")
}

pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    let schema = schema(spec.classes)?;
    if spec.min_turns < 2 || spec.max_turns < spec.min_turns {
        return Err(Error::Config(
            "synthetic dialogues need 2 <= min_turns <= max_turns".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Corpus::empty(&schema);
    for n in 0..spec.instances {
        let label = n % spec.classes;
        let m = rng.gen_range(spec.min_turns..=spec.max_turns);
        let cast: Vec<&str> = SPEAKERS.choose_multiple(&mut rng, 3).copied().collect();
        let speakers: Vec<&str> = (0..m).map(|_| *cast.choose(&mut rng).unwrap()).collect();
        let name = *NAMES.choose(&mut rng).unwrap();
        let (anchor, cue_turn) = match spec.placement {
            CuePlacement::Mention => {
                let a = rng.gen_range(0..m);
                (a, a)
            }
            CuePlacement::Final => (0, m - 1),
        };
        let cue = CLASSES[label].1;
        let dialogue = (0..m)
            .map(|i| {
                let mut extra = Vec::new();
                if i == anchor {
                    extra.push(name);
                }
                if i == cue_turn {
                    extra.push(cue);
                } else if spec.placement == CuePlacement::Mention
                    && rng.gen::<f64>() < spec.distractor_rate
                {
                    let other = (label + rng.gen_range(1..spec.classes)) % spec.classes;
                    extra.push(CLASSES[other].1);
                }
                Turn::new(speakers[i], sentence(&mut rng, &extra))
            })
            .collect();
        corpus.instances.push(Instance {
            id: format!("{}-{n}", spec.id_prefix),
            dialogue,
            query: Query {
                arguments: vec![speakers[anchor].to_string(), name.to_string()],
            },
            label,
        });
    }
    let mut order: Vec<usize> = (0..corpus.instances.len()).collect();
    order.shuffle(&mut rng);
    corpus.instances = order
        .into_iter()
        .map(|i| corpus.instances[i].clone())
        .collect();
    Ok(corpus)
}
