//! Training loop, evaluation harness and ablation runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{MetricKind, RunConfig};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::ir::{load_corpus, write_corpus, Corpus, Instance, Schema};
use crate::metrics::{add_groups, f1_scores, Grouping, MetricReport};
use crate::model::{Model, Prepared, Variant};
use crate::preprocess::{substitute_arguments, truncate_to_prefix, Vocab};
use crate::scalar::Scalar;

pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_micro_f1: Option<f64>,
    pub dev_micro_f1: Option<f64>,
}

#[derive(Debug)]
pub struct TrainRun<T> {
    pub model: Model<T>,
    pub history: Vec<EpochLog>,
    pub initial_loss: f64,
}

/// Vocabulary over the substituted training instances.
pub fn build_vocab(train: &Corpus) -> Vocab {
    let substituted: Vec<Instance> = train.instances.iter().map(substitute_arguments).collect();
    Vocab::build(&substituted)
}

pub fn prepare_all<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<Vec<Prepared>> {
    corpus.instances.iter().map(|i| model.prepare(i)).collect()
}

fn mean_loss<T: Scalar>(model: &Model<T>, items: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        total += model.loss(item)?.to_f64_lossy();
    }
    Ok(total / items.len().max(1) as f64)
}

fn micro_f1<T: Scalar>(model: &Model<T>, items: &[Prepared], num_classes: usize) -> Result<f64> {
    let preds = items
        .iter()
        .map(|i| model.predict(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(f1_scores(&preds, num_classes, None)?.micro_f1)
}

/// Mini-batch SGD on the batch-mean cross-entropy. Deterministic for a
/// given config and data.
pub fn train_model<T: Scalar>(
    config: &RunConfig,
    train: &Corpus,
    dev: Option<&Corpus>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    if train.instances.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let vocab = build_vocab(train);
    let dims = config.dims(vocab.len(), train.num_classes());
    let mut model: Model<T> = Model::new(dims, config.ablation(), vocab, config.seed)?;
    let train_items = prepare_all(&model, train)?;
    let dev_items = match dev {
        Some(d) => {
            check_classes(&train.class_names, &d.class_names)?;
            Some(prepare_all(&model, d)?)
        }
        None => None,
    };
    let num_classes = train.num_classes();
    let initial_loss = mean_loss(&model, &train_items)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout = (config.dropout > 0.0).then(|| Dropout {
        rate: config.dropout,
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
    });
    let rate = T::from_f64_lossy(config.learning_rate);
    let clip = T::from_f64_lossy(config.grad_clip);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut history = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            for &i in batch {
                let item = &train_items[i];
                let (loss, predicted) =
                    model.accumulate_gradient(item, &mut grads, scale, dropout.as_mut())?;
                if !loss.is_finite() {
                    return Err(Error::NonfiniteLoss { epoch, step });
                }
                loss_sum += loss.to_f64_lossy();
                correct += usize::from(predicted == item.label);
            }
            if clip > T::zero() {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            model.params.sgd_step(&grads, rate);
            if !model.params.all_finite() {
                return Err(Error::NonfiniteLoss { epoch, step });
            }
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let running_acc = correct as f64 / train_items.len() as f64;
        let mut log = EpochLog {
            epoch,
            train_loss,
            train_micro_f1: None,
            dev_micro_f1: None,
        };
        if let Some(target) = config.target_train_f1 {
            // in-epoch accuracy trails the end-of-epoch model; only pay for a
            // full pass when it is close
            if running_acc >= target - 0.05 {
                log.train_micro_f1 = Some(micro_f1(&model, &train_items, num_classes)?);
            }
        }
        if let Some(items) = &dev_items {
            if config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs) {
                log.dev_micro_f1 = Some(micro_f1(&model, items, num_classes)?);
            }
        }
        log::info!(
            "epoch {epoch} train_loss {:.6} train_f1 {} dev_f1 {}",
            log.train_loss,
            log.train_micro_f1.map_or("-".into(), |v| format!("{v:.4}")),
            log.dev_micro_f1.map_or("-".into(), |v| format!("{v:.4}")),
        );
        let stop =
            matches!((config.target_train_f1, log.train_micro_f1), (Some(t), Some(f)) if f >= t);
        history.push(log);
        if stop {
            break;
        }
    }
    Ok(TrainRun {
        model,
        history,
        initial_loss,
    })
}

fn check_classes(expected: &[String], found: &[String]) -> Result<()> {
    if expected != found {
        return Err(Error::ConfigMismatch(format!(
            "class names {found:?} differ from {expected:?}"
        )));
    }
    Ok(())
}

/// Micro-F1 after truncating every instance to the shortest prefix that
/// mentions all of its arguments.
pub fn evaluate_f1c<T: Scalar>(
    model: &Model<T>,
    instances: &[Instance],
    num_classes: usize,
) -> Result<f64> {
    let preds = instances
        .iter()
        .map(|inst| model.predict(&model.prepare(&truncate_to_prefix(inst))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(f1_scores(&preds, num_classes, None)?.micro_f1)
}

/// Full report for `corpus`: F1 family, F1_c when requested and every
/// instance has two arguments, per-class groups when the schema defines
/// them, and length buckets.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    config: &RunConfig,
) -> Result<MetricReport> {
    let items = prepare_all(model, corpus)?;
    let preds = items
        .iter()
        .map(|i| model.predict(i))
        .collect::<Result<Vec<_>>>()?;
    let n = corpus.num_classes();
    let neutral = match (
        &config.neutral_class,
        config.wants(MetricKind::MicroExclNeutral),
    ) {
        (_, false) => None,
        (Some(name), true) => Some(
            corpus
                .class_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    Error::ConfigMismatch(format!("neutral class {name:?} is not in the schema"))
                })?,
        ),
        (None, true) => corpus.neutral_class,
    };
    let mut report = f1_scores(&preds, n, neutral)?;
    if config.wants(MetricKind::F1c) && corpus.instances.iter().all(|i| i.num_args() == 2) {
        report.f1c = Some(evaluate_f1c(model, &corpus.instances, n)?);
    }
    if let Some(groups) = &corpus.class_groups {
        let grouping = Grouping::ByClass {
            name: "symmetry",
            class_names: &corpus.class_names,
            assignment: groups,
        };
        add_groups(&mut report, &preds, n, &grouping)?;
    }
    let lengths: Vec<usize> = items.iter().map(|i| i.dialogue_len).collect();
    add_groups(
        &mut report,
        &preds,
        n,
        &Grouping::ByLength {
            bounds: &config.length_buckets,
            lengths: &lengths,
        },
    )?;
    Ok(report)
}

/// Evaluates a checkpoint on `corpus`. The checkpoint's ablation flags
/// decide the forward pass; `config` selects metrics and buckets.
pub fn evaluate<T: Scalar>(
    config: &RunConfig,
    checkpoint: &Checkpoint<T>,
    corpus: &Corpus,
) -> Result<MetricReport> {
    check_classes(&checkpoint.class_names, &corpus.class_names)?;
    evaluate_model(&checkpoint.model, corpus, config)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is required")))
}

pub fn load_schema(config: &RunConfig) -> Result<Schema> {
    let path = required(&config.schema_path, "schema_path")?;
    Schema::load(path)
}

pub struct Splits {
    pub train: Corpus,
    pub dev: Option<Corpus>,
}

pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    let schema = load_schema(config)?;
    let train = load_corpus(required(&config.train_path, "train_path")?, &schema)?;
    let dev = config
        .dev_path
        .as_deref()
        .map(|p| load_corpus(p, &schema))
        .transpose()?;
    Ok(Splits { train, dev })
}

pub fn checkpoint_path(config: &RunConfig) -> Result<PathBuf> {
    Ok(required(&config.checkpoint_dir, "checkpoint_dir")?.join(CHECKPOINT_FILE))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint<f64>,
    pub history: Vec<EpochLog>,
    pub initial_loss: f64,
    /// Micro-F1 of the final model on the training split.
    pub train_micro_f1: f64,
    pub dev_micro_f1: Option<f64>,
}

/// Loads the configured splits, trains, scores the final model on both
/// splits and writes `checkpoint_dir/model.ckpt` when a directory is set.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let splits = load_splits(config)?;
    let run = train_model::<f64>(config, &splits.train, splits.dev.as_ref())?;
    let n = splits.train.num_classes();
    let train_micro_f1 = micro_f1(&run.model, &prepare_all(&run.model, &splits.train)?, n)?;
    let dev_micro_f1 = match &splits.dev {
        Some(d) => Some(micro_f1(&run.model, &prepare_all(&run.model, d)?, n)?),
        None => None,
    };
    let checkpoint = Checkpoint {
        config: config.clone(),
        class_names: splits.train.class_names.clone(),
        neutral_class: splits.train.neutral_class,
        model: run.model,
    };
    if config.checkpoint_dir.is_some() {
        checkpoint.save(&checkpoint_path(config)?)?;
    }
    Ok(TrainSummary {
        checkpoint,
        history: run.history,
        initial_loss: run.initial_loss,
        train_micro_f1,
        dev_micro_f1,
    })
}

/// SHA-256 of a corpus in its canonical record form.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to memory");
    buf.extend_from_slice(corpus.schema().to_json().as_bytes());
    hex::encode(Sha256::digest(&buf))
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub variant: Variant,
    pub data_hash: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub class_names: Vec<String>,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20} {:>10} {:>10} {:>10}  data",
            "variant", "micro_f1", "macro_f1", "f1c"
        )
        .unwrap();
        for e in &self.entries {
            let f1c = e.report.f1c.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{:<20} {:>10.4} {:>10.4} {:>10}  {}",
                e.variant.name(),
                e.report.micro_f1,
                e.report.macro_f1,
                f1c,
                &e.data_hash[..16]
            )
            .unwrap();
        }
        for e in &self.entries {
            writeln!(
                out,
                "\n[{}] data_sha256 = {}",
                e.variant.name(),
                e.data_hash
            )
            .unwrap();
            out.push_str(&e.report.render(&self.class_names));
        }
        out
    }
}

/// Trains every variant on the same data and seed and evaluates each on the
/// dev split (or the training split when no dev split is configured).
pub fn ablate_on<T: Scalar>(
    config: &RunConfig,
    train: &Corpus,
    dev: Option<&Corpus>,
    variants: &[Variant],
) -> Result<AblationReport> {
    let eval_corpus = dev.unwrap_or(train);
    let mut entries = Vec::new();
    for &variant in variants {
        let mut cfg = config.clone();
        cfg.set_ablation(variant.ablation());
        let data_hash = {
            let mut h = corpus_hash(train);
            if let Some(d) = dev {
                h = hex::encode(Sha256::digest(format!("{h}{}", corpus_hash(d))));
            }
            h
        };
        let run = train_model::<T>(&cfg, train, dev)?;
        let report = evaluate_model(&run.model, eval_corpus, &cfg)?;
        entries.push(AblationEntry {
            variant,
            data_hash,
            report,
        });
    }
    Ok(AblationReport {
        class_names: train.class_names.clone(),
        entries,
    })
}

pub fn ablate(config: &RunConfig) -> Result<AblationReport> {
    let splits = load_splits(config)?;
    ablate_on::<f64>(config, &splits.train, splits.dev.as_ref(), &Variant::ALL)
}
