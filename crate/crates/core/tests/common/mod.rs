#![allow(dead_code)]

use hidialog::ir::{Instance, Query, Turn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPEAKERS: [&str; 4] = ["Ann", "Bob", "Cy", "Dee"];
const NAMES: [&str; 4] = ["Frank", "Gina", "Mary Jane", "Hal"];
const WORDS: [&str; 10] = [
    "so", "we", "went", "out", "and", "it", "was", "fine", "ok", "then",
];

/// Random valid instance with `1..=max_turns` turns and `1..=max_args`
/// distinct, non-overlapping arguments, each mentioned at least once.
pub fn random_instance(
    seed: u64,
    max_turns: usize,
    max_args: usize,
    num_classes: usize,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=max_turns);
    let speakers: Vec<&str> = (0..m)
        .map(|_| *SPEAKERS.choose(&mut rng).unwrap())
        .collect();
    let mut texts: Vec<Vec<String>> = (0..m)
        .map(|_| {
            let n = rng.gen_range(1..=6);
            (0..n)
                .map(|_| WORDS.choose(&mut rng).unwrap().to_string())
                .collect()
        })
        .collect();
    let k = rng.gen_range(1..=max_args);
    let mut args: Vec<String> = Vec::new();
    while args.len() < k {
        let candidate = if rng.gen_bool(0.5) {
            speakers.choose(&mut rng).unwrap().to_string()
        } else {
            NAMES.choose(&mut rng).unwrap().to_string()
        };
        if args.contains(&candidate) {
            continue;
        }
        if !speakers.contains(&candidate.as_str()) || rng.gen_bool(0.3) {
            let turn = rng.gen_range(0..m);
            let at = rng.gen_range(0..=texts[turn].len());
            texts[turn].insert(at, candidate.clone());
        }
        args.push(candidate);
    }
    // occasional extra mentions in other turns
    for a in &args {
        for t in texts.iter_mut() {
            if rng.gen_bool(0.2) {
                let at = rng.gen_range(0..=t.len());
                t.insert(at, a.clone());
            }
        }
    }
    Instance {
        id: format!("r{seed}"),
        dialogue: speakers
            .iter()
            .zip(&texts)
            .map(|(s, t)| Turn::new(*s, t.join(" ")))
            .collect(),
        query: Query { arguments: args },
        label: rng.gen_range(0..num_classes),
    }
}

/// Whole-token contiguous occurrence of `arg` in `text`, by brute force.
pub fn mentions(text: &str, arg: &str) -> bool {
    let t: Vec<&str> = text.split_whitespace().collect();
    let a: Vec<&str> = arg.split_whitespace().collect();
    t.len() >= a.len() && (0..=t.len() - a.len()).any(|i| t[i..i + a.len()] == a[..])
}
