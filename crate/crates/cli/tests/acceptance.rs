//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hidialog::checkpoint::Checkpoint;
use hidialog::config::{MetricKind, RunConfig};
use hidialog::encoder::encode_values;
use hidialog::gradcheck::{check_gradients, reference_case, Tolerance};
use hidialog::graph::{Channel, DialogueGraph, CHANNELS};
use hidialog::head::Prediction;
use hidialog::ir::{Instance, Query, Turn};
use hidialog::mask::build_turn_mask;
use hidialog::metrics::f1_scores;
use hidialog::model::{Ablation, Model, ModelDims, Variant};
use hidialog::preprocess::{build_sequence, substitute_arguments, EncodedSequence, Layout, Vocab};
use hidialog::synthetic::{generate, CuePlacement, SyntheticSpec};
use hidialog::train::{
    ablate_on, evaluate, evaluate_model, load_splits, prepare_all, train, train_model,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- data

const SPEAKERS: [&str; 4] = ["Ann", "Bob", "Cy", "Dee"];
const NAMES: [&str; 4] = ["Frank", "Gina", "Mary Jane", "Hal"];
const WORDS: [&str; 10] = [
    "so", "we", "went", "out", "and", "it", "was", "fine", "ok", "then",
];

/// Random valid instance: 1..=8 turns, 1..=2 distinct arguments, each
/// mentioned at least once.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.gen_range(1..=8);
    let speakers: Vec<&str> = (0..m).map(|_| *SPEAKERS.choose(rng).unwrap()).collect();
    let mut texts: Vec<Vec<String>> = (0..m)
        .map(|_| {
            (0..rng.gen_range(1..=6))
                .map(|_| WORDS.choose(rng).unwrap().to_string())
                .collect()
        })
        .collect();
    let k = rng.gen_range(1..=2);
    let mut args: Vec<String> = Vec::new();
    while args.len() < k {
        let candidate = if rng.gen_bool(0.5) {
            speakers.choose(rng).unwrap().to_string()
        } else {
            NAMES.choose(rng).unwrap().to_string()
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
    Instance {
        id: "r".into(),
        dialogue: speakers
            .iter()
            .zip(&texts)
            .map(|(s, t)| Turn::new(*s, t.join(" ")))
            .collect(),
        query: Query { arguments: args },
        label: 0,
    }
}

fn encoded(inst: &Instance) -> EncodedSequence {
    let sub = substitute_arguments(inst);
    build_sequence(&sub, &Vocab::build([&sub]), 512, Layout::SpecialTokens).unwrap()
}

fn mentions(text: &str, arg: &str) -> bool {
    let t: Vec<&str> = text.split_whitespace().collect();
    let a: Vec<&str> = arg.split_whitespace().collect();
    t.len() >= a.len() && (0..=t.len() - a.len()).any(|i| t[i..i + a.len()] == a[..])
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hidialog"));
    c.arg("--quiet");
    c
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "hidialog {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Checkpoint text without the `checkpoint_dir` entry of its config
/// snapshot, which names where it was written.
fn checkpoint_body(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with("checkpoint_dir = "))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn field(output: &str, key: &str) -> Result<String, String> {
    output
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .map(str::to_string)
        .ok_or_else(|| format!("no {key} in output"))
}

// ---------------------------------------------------------------- criteria

fn mask_law() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = 0;
    for _ in 0..300 {
        let seq = encoded(&random_instance(&mut rng));
        let n = seq.len();
        let mask = build_turn_mask(&seq, true);
        for r in 0..n {
            rows += 1;
            match seq.tau_positions.iter().position(|&p| p == r) {
                Some(v) => {
                    let (s, e) = seq.spans[v];
                    for c in 0..n {
                        ensure(mask.allow[[r, c]] == (s..e).contains(&c), || {
                            format!("row {r} column {c}")
                        })?;
                    }
                    ensure(mask.row_sum(r) == e - s, || format!("row {r} sum"))?;
                }
                None => ensure(mask.row_sum(r) == n, || {
                    format!("non-tau row {r} not all-true")
                })?,
            }
        }
    }
    Ok(format!("300 sequences, {rows} rows"))
}

fn locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = ModelDims {
        vocab_size: 0,
        num_classes: 4,
        d_model: 32,
        d_ff: 64,
        layers: 1,
        heads: 4,
        graph_layers: 2,
        gtn_steps: 2,
        k_max: 2,
        max_len: 256,
        max_speakers: 8,
    };
    let (mut trials, mut leaked, mut changed) = (0usize, 0usize, 0usize);
    for i in 0..50u64 {
        let inst = random_instance(&mut rng);
        let vocab = Vocab::build([&substitute_arguments(&inst)]);
        let v = vocab.len();
        let model: Model<f64> =
            Model::new(dims.clone(), Ablation::default(), vocab, i).map_err(|e| e.to_string())?;
        let item = model.prepare(&inst).map_err(|e| e.to_string())?;
        let open = build_turn_mask(&item.seq, false);
        let hidden = |ids: &[usize], masked: bool| {
            let mut seq = item.seq.clone();
            seq.token_ids = ids.to_vec();
            encode_values(
                &model.params,
                &model.encoder,
                &seq,
                if masked { &item.mask } else { &open },
            )
            .unwrap()
        };
        let base = hidden(&item.seq.token_ids, true);
        let base_open = hidden(&item.seq.token_ids, false);
        for p in 0..item.seq.len() {
            let mut ids = item.seq.token_ids.clone();
            ids[p] = (ids[p] + 1 + rng.gen_range(0..v - 1)) % v;
            let masked = hidden(&ids, true);
            let unmasked = hidden(&ids, false);
            for (t, &tau) in item.seq.tau_positions.iter().enumerate() {
                let (s, e) = item.seq.spans[t];
                if (s..e).contains(&p) {
                    continue;
                }
                trials += 1;
                leaked += usize::from(masked.row(tau) != base.row(tau));
                changed += usize::from(unmasked.row(tau) != base_open.row(tau));
            }
        }
    }
    ensure(leaked == 0, || {
        format!("{leaked}/{trials} out-of-span perturbations reached a tau row")
    })?;
    let share = changed as f64 / trials as f64;
    ensure(share >= 0.95, || {
        format!("unmasked change rate {share:.4} < 0.95")
    })?;
    Ok(format!(
        "{trials} trials, masked diff 0, unmasked changed {:.2}%",
        100.0 * share
    ))
}

fn graph_combinatorics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        let inst = random_instance(&mut rng);
        let g = DialogueGraph::from_sequence(&encoded(&inst));
        let m = inst.dialogue.len();
        let mut per_speaker: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &inst.dialogue {
            *per_speaker.entry(&t.speaker).or_default() += 1;
        }
        let speaker_pairs: usize = per_speaker.values().map(|&c| c * (c - 1) / 2).sum();
        ensure(g.edge_count(Channel::Dialogue) == m, || {
            format!("instance {i}: dialogue")
        })?;
        ensure(g.edge_count(Channel::Sequence) == m * (m - 1) / 2, || {
            format!("instance {i}: sequence")
        })?;
        ensure(g.edge_count(Channel::Speaker) == speaker_pairs, || {
            format!("instance {i}: speaker")
        })?;
        let mut entity = Vec::new();
        for (j, arg) in inst.query.arguments.iter().enumerate() {
            for (t, turn) in inst.dialogue.iter().enumerate() {
                if &turn.speaker == arg || mentions(&turn.text, arg) {
                    entity.push((1 + t, 1 + m + j));
                }
            }
        }
        entity.sort();
        ensure(g.edges(Channel::Entity) == entity, || {
            format!("instance {i}: entity")
        })?;
        for c in CHANNELS {
            let a = g.channel(c);
            ensure(a == &a.t(), || format!("instance {i}: {c} not symmetric"))?;
        }
    }
    Ok("200 instances, all channel counts and symmetry hold".into())
}

fn gradient_check() -> Check {
    let (model, item) = reference_case(0).map_err(|e| e.to_string())?;
    let checks = check_gradients(&model, &item, Tolerance::default()).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("groups disagree: {failed:?}"))?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} groups, max relative error {worst:.2e}",
        checks.len()
    ))
}

fn metric_oracle() -> Check {
    fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
        if tp == 0.0 {
            return 0.0;
        }
        let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
        2.0 * p * r / (p + r)
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let c = rng.gen_range(2..7);
        let n = rng.gen_range(1..100);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(0..c), rng.gen_range(0..c)))
            .collect();
        let neutral = rng.gen_range(0..c);
        let preds: Vec<Prediction> = pairs
            .iter()
            .map(|&(g, p)| Prediction::labels(g, p))
            .collect();
        let report = f1_scores(&preds, c, Some(neutral)).map_err(|e| e.to_string())?;
        let count = |k: usize| {
            let tp = pairs.iter().filter(|&&(g, p)| g == k && p == k).count() as f64;
            let fp = pairs.iter().filter(|&&(g, p)| g != k && p == k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(g, p)| g == k && p != k).count() as f64;
            (tp, fp, fn_)
        };
        let per: Vec<_> = (0..c).map(count).collect();
        let total = |skip: Option<usize>| {
            per.iter()
                .enumerate()
                .filter(|(k, _)| Some(*k) != skip)
                .fold((0.0, 0.0, 0.0), |a, (_, x)| {
                    (a.0 + x.0, a.1 + x.1, a.2 + x.2)
                })
        };
        let (all, ex) = (total(None), total(Some(neutral)));
        let expected = [
            f1(all.0, all.1, all.2),
            per.iter().map(|x| f1(x.0, x.1, x.2)).sum::<f64>() / c as f64,
            per.iter()
                .map(|x| (x.0 + x.2) / n as f64 * f1(x.0, x.1, x.2))
                .sum(),
            f1(ex.0, ex.1, ex.2),
        ];
        let got = [
            report.micro_f1,
            report.macro_f1,
            report.weighted_f1,
            report.micro_f1_excl_neutral.unwrap(),
        ];
        for (a, b) in got.iter().zip(expected) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let preds: Vec<Prediction> = [(0, 0), (0, 1), (1, 1), (1, 1)]
        .iter()
        .map(|&(g, p)| Prediction::labels(g, p))
        .collect();
    let r = f1_scores(&preds, 2, None).map_err(|e| e.to_string())?;
    ensure((r.micro_f1 - 0.75).abs() <= 1e-9, || {
        format!("worked micro {}", r.micro_f1)
    })?;
    ensure((r.weighted_f1 - 0.73333).abs() <= 1e-5, || {
        format!("worked weighted {}", r.weighted_f1)
    })?;
    ensure((r.weighted_f1 - 11.0 / 15.0).abs() <= 1e-9, || {
        format!("worked weighted {}", r.weighted_f1)
    })?;
    Ok(format!(
        "500 sets, max deviation {worst:.1e}; worked example {} / {:.5}",
        r.micro_f1, r.weighted_f1
    ))
}

fn overfit(dir: &Path) -> Check {
    let d = dir.to_str().unwrap();
    run_cli(&[
        "gen-synthetic",
        "--out",
        d,
        "--train",
        "200",
        "--classes",
        "4",
        "--seed",
        "7",
    ])?;
    let config = dir.join("run.conf");
    let c = config.to_str().unwrap();
    let train_once = |ckpt_dir: &str| -> Result<(String, Duration), String> {
        let start = Instant::now();
        let out = run_cli(&[
            "train",
            "--config",
            c,
            "--set",
            "target_train_f1=0.99",
            "--set",
            &format!("checkpoint_dir={ckpt_dir}"),
        ])?;
        Ok((out, start.elapsed()))
    };
    let first_dir = dir.join("run").display().to_string();
    let second_dir = dir.join("rerun").display().to_string();
    let (first, elapsed) = train_once(&first_dir)?;
    let f1: f64 = field(&first, "train_micro_f1")?
        .parse()
        .map_err(|_| "bad f1")?;
    let epochs: usize = field(&first, "epochs_run")?
        .parse()
        .map_err(|_| "bad epochs")?;
    ensure(f1 >= 0.99, || {
        format!("train micro-F1 {f1} after {epochs} epochs")
    })?;
    ensure(epochs <= 500, || format!("{epochs} epochs"))?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("training took {elapsed:?}")
    })?;
    let (second, _) = train_once(&second_dir)?;
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("checkpoint = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    ensure(strip(&first) == strip(&second), || {
        "rerun metrics differ".into()
    })?;
    let a = checkpoint_body(&dir.join("run/model.ckpt"))?;
    let b = checkpoint_body(&dir.join("rerun/model.ckpt"))?;
    ensure(a == b, || "rerun checkpoints differ".into())?;
    Ok(format!(
        "train micro-F1 {f1} after {epochs} epochs in {:.1} s; rerun bitwise identical",
        elapsed.as_secs_f64()
    ))
}

fn ablation_ordering() -> Check {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let train = generate(&SyntheticSpec {
            instances: 600,
            seed: 100 + seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let dev = generate(&SyntheticSpec {
            instances: 200,
            seed: 200 + seed,
            id_prefix: "dev".into(),
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let config = RunConfig {
            seed,
            target_train_f1: Some(0.99),
            eval_every: 0,
            ..Default::default()
        };
        let report = ablate_on::<f64>(
            &config,
            &train,
            Some(&dev),
            &[Variant::Full, Variant::NoSpecialTokens],
        )
        .map_err(|e| e.to_string())?;
        let (full, plain) = (
            report.entries[0].report.micro_f1,
            report.entries[1].report.micro_f1,
        );
        wins += usize::from(full >= plain);
        rows.push(format!("{full:.3}/{plain:.3}"));
    }
    ensure(wins >= 4, || {
        format!(
            "full >= no_special_tokens on {wins}/5 seeds ({})",
            rows.join(" ")
        )
    })?;
    Ok(format!(
        "full >= no_special_tokens on {wins}/5 seeds (dev micro-F1 {})",
        rows.join(" ")
    ))
}

fn prefix_score() -> Check {
    let spec = SyntheticSpec {
        instances: 200,
        seed: 21,
        placement: CuePlacement::Final,
        ..Default::default()
    };
    let train = generate(&spec).map_err(|e| e.to_string())?;
    let dev = generate(&SyntheticSpec {
        instances: 100,
        seed: 22,
        id_prefix: "dev".into(),
        ..spec
    })
    .map_err(|e| e.to_string())?;
    let mut config = RunConfig {
        target_train_f1: Some(0.99),
        eval_every: 0,
        ..Default::default()
    };
    config.metrics.push(MetricKind::F1c);
    let run = train_model::<f64>(&config, &train, None).map_err(|e| e.to_string())?;
    let report = evaluate_model(&run.model, &dev, &config).map_err(|e| e.to_string())?;
    let f1c = report.f1c.ok_or("no F1_c in report")?;
    ensure(report.micro_f1 >= 0.9, || {
        format!("model only reached F1 {}", report.micro_f1)
    })?;
    ensure(f1c < report.micro_f1, || {
        format!("F1_c {f1c} >= F1 {}", report.micro_f1)
    })?;
    Ok(format!("dev F1 {} > F1_c {f1c}", report.micro_f1))
}

fn checkpoint_round_trip(dir: &Path) -> Check {
    let mut config = RunConfig::load(&dir.join("run.conf")).map_err(|e| e.to_string())?;
    config.target_train_f1 = Some(0.99);
    config.checkpoint_dir = Some(dir.join("in_process"));
    let summary = train(&config).map_err(|e| e.to_string())?;
    let splits = load_splits(&config).map_err(|e| e.to_string())?;
    let dev = splits.dev.ok_or("no dev split")?;
    let before =
        evaluate_model(&summary.checkpoint.model, &dev, &config).map_err(|e| e.to_string())?;
    let path = dir.join("in_process/model.ckpt");
    let loaded = Checkpoint::<f64>::load(&path).map_err(|e| e.to_string())?;
    let after = evaluate(&config, &loaded, &dev).map_err(|e| e.to_string())?;
    ensure(before == after, || "reports differ after reload".into())?;
    let saved_items = prepare_all(&summary.checkpoint.model, &dev).map_err(|e| e.to_string())?;
    for item in &saved_items {
        let a = summary
            .checkpoint
            .model
            .logits(item)
            .map_err(|e| e.to_string())?;
        let b = loaded.model.logits(item).map_err(|e| e.to_string())?;
        ensure(
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("logits differ for {}", item.id),
        )?;
    }
    let cli = run_cli(&[
        "evaluate",
        "--config",
        dir.join("run.conf").to_str().unwrap(),
        "--checkpoint",
        path.to_str().unwrap(),
    ])?;
    ensure(cli == before.render(&loaded.class_names), || {
        "CLI evaluation differs from in-memory report".into()
    })?;
    let cli_trained = checkpoint_body(&dir.join("run/model.ckpt"))?;
    let in_process = checkpoint_body(&path)?;
    ensure(cli_trained == in_process, || {
        "CLI and in-process training wrote different checkpoints".into()
    })?;
    Ok(format!(
        "{} dev instances, logits and report bitwise identical",
        dev.instances.len()
    ))
}

// ---------------------------------------------------------------- driver

fn report(index: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let elapsed = start.elapsed();
    let result = match (result, limit) {
        (Ok(_), Some(l)) if elapsed >= l => Err(format!("runtime {elapsed:?} exceeds {l:?}")),
        (r, _) => r,
    };
    let budget = limit.map_or(String::new(), |l| format!(", limit {} s", l.as_secs()));
    match &result {
        Ok(detail) => println!(
            "[PASS] {index}. {name}: {detail} ({:.2} s{budget})",
            elapsed.as_secs_f64()
        ),
        Err(detail) => println!(
            "[FAIL] {index}. {name}: {detail} ({:.2} s{budget})",
            elapsed.as_secs_f64()
        ),
    }
    result.is_ok()
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let corpus_dir: PathBuf = work.path().join("synthetic");
    let secs = Duration::from_secs;
    let results = [
        report(1, "mask law", Some(secs(5)), mask_law),
        report(2, "one-layer locality", Some(secs(30)), locality),
        report(3, "graph combinatorics", Some(secs(5)), graph_combinatorics),
        report(4, "gradient check", Some(secs(60)), gradient_check),
        report(5, "metric oracle", None, metric_oracle),
        report(6, "overfit and reproducibility", None, || {
            overfit(&corpus_dir)
        }),
        report(7, "ablation ordering", None, ablation_ordering),
        report(8, "prefix F1 below full F1", None, prefix_score),
        report(9, "checkpoint round-trip", None, || {
            checkpoint_round_trip(&corpus_dir)
        }),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
