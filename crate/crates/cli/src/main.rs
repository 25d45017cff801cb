use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hidialog::checkpoint::Checkpoint;
use hidialog::config::RunConfig;
use hidialog::gradcheck::{check_gradients, reference_case, Tolerance};
use hidialog::graph::DialogueGraph;
use hidialog::inspect::{render_graph, render_mask, render_sequence};
use hidialog::ir::{load_corpus, write_corpus, Corpus, Instance, Schema};
use hidialog::mask::build_turn_mask;
use hidialog::model::Ablation;
use hidialog::preprocess::{build_sequence, substitute_arguments, EncodedSequence, Vocab};
use hidialog::synthetic::{generate, CuePlacement, SyntheticSpec};
use hidialog::train::{ablate, checkpoint_path, evaluate, load_schema, train};
use hidialog::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hidialog",
    version,
    about = "Turn-aware dialogue relation classifier"
)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            config.set(k.trim(), v.trim(), None)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct InstanceArgs {
    /// JSONL corpus holding the instance.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Zero-based record index.
    #[arg(long, default_value_t = 0, conflicts_with = "id")]
    index: usize,
    /// Select the record by id instead of index.
    #[arg(long)]
    id: Option<String>,
    /// Use this checkpoint's vocabulary, length limit and ablation flags.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Without a checkpoint the vocabulary is built from the whole corpus.
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long)]
    no_special_tokens: bool,
    #[arg(long)]
    no_turn_mask: bool,
}

struct Inspected {
    seq: EncodedSequence,
    ablation: Ablation,
}

impl InstanceArgs {
    fn pick<'a>(&self, corpus: &'a Corpus) -> Result<&'a Instance> {
        match &self.id {
            Some(id) => corpus
                .instances
                .iter()
                .find(|i| &i.id == id)
                .ok_or_else(|| Error::Config(format!("no instance with id {id:?}"))),
            None => corpus.instances.get(self.index).ok_or_else(|| {
                Error::Config(format!(
                    "index {} out of range ({} instances)",
                    self.index,
                    corpus.instances.len()
                ))
            }),
        }
    }

    fn sequence(&self) -> Result<Inspected> {
        let schema = Schema::load(&self.schema)?;
        let corpus = load_corpus(&self.corpus, &schema)?;
        let inst = self.pick(&corpus)?;
        if let Some(path) = &self.checkpoint {
            let ckpt = Checkpoint::<f64>::load(path)?;
            let prepared = ckpt.model.prepare(inst)?;
            return Ok(Inspected {
                seq: prepared.seq,
                ablation: ckpt.model.ablation,
            });
        }
        let ablation = Ablation {
            no_turn_mask: self.no_turn_mask || self.no_special_tokens,
            no_special_tokens: self.no_special_tokens,
            intra_turn_only: false,
        };
        let substituted: Vec<Instance> =
            corpus.instances.iter().map(substitute_arguments).collect();
        let vocab = Vocab::build(&substituted);
        let seq = build_sequence(
            &substitute_arguments(inst),
            &vocab,
            self.max_len,
            ablation.layout(),
        )?;
        Ok(Inspected { seq, ablation })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured splits and write a checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// train, dev or test.
        #[arg(long, default_value = "dev")]
        split: String,
        /// Defaults to the configured checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant on the same data and seed.
    Ablate(ConfigArgs),
    /// Write a synthetic corpus: schema.json, train/dev/test.jsonl, run.conf.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Seed of the train split; dev and test use the next two seeds.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// `mention` or `final`.
        #[arg(long, default_value = "mention")]
        placement: String,
        #[arg(long, default_value_t = 0.5)]
        distractor_rate: f64,
    },
    /// Token table of one encoded instance.
    InspectSequence(InstanceArgs),
    /// Attention mask of one encoded instance as a 0/1 grid.
    InspectMask(InstanceArgs),
    /// Nodes and per-channel edges of one instance's graph.
    InspectGraph(InstanceArgs),
    /// Compare analytic and finite-difference gradients on a small model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = args.load()?;
            let summary = train(&config)?;
            let last = summary.history.last();
            println!("epochs_run = {}", summary.history.len());
            println!("initial_loss = {}", summary.initial_loss);
            println!(
                "final_train_loss = {}",
                last.map_or(summary.initial_loss, |h| h.train_loss)
            );
            println!("train_micro_f1 = {}", summary.train_micro_f1);
            println!(
                "dev_micro_f1 = {}",
                summary
                    .dev_micro_f1
                    .map_or_else(|| "none".to_string(), |v| v.to_string())
            );
            if config.checkpoint_dir.is_some() {
                println!("checkpoint = {}", checkpoint_path(&config)?.display());
            }
        }
        Command::Evaluate {
            config,
            split,
            checkpoint,
        } => {
            let config = config.load()?;
            let path = match checkpoint {
                Some(p) => p,
                None => checkpoint_path(&config)?,
            };
            let ckpt = Checkpoint::<f64>::load(&path)?;
            let split_path = match split.as_str() {
                "train" => &config.train_path,
                "dev" => &config.dev_path,
                "test" => &config.test_path,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let split_path = split_path
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{split}_path is not configured")))?;
            let corpus = load_corpus(split_path, &load_schema(&config)?)?;
            let report = evaluate(&config, &ckpt, &corpus)?;
            print!("{}", report.render(&ckpt.class_names));
        }
        Command::Ablate(args) => {
            let config = args.load()?;
            print!("{}", ablate(&config)?.render());
        }
        Command::GenSynthetic {
            out,
            train,
            dev,
            test,
            classes,
            seed,
            placement,
            distractor_rate,
        } => gen_synthetic(
            &out,
            [train, dev, test],
            classes,
            seed,
            placement.parse()?,
            distractor_rate,
        )?,
        Command::InspectSequence(args) => print!("{}", render_sequence(&args.sequence()?.seq)),
        Command::InspectMask(args) => {
            let inspected = args.sequence()?;
            print!(
                "{}",
                render_mask(&build_turn_mask(
                    &inspected.seq,
                    !inspected.ablation.no_turn_mask
                ))
            );
        }
        Command::InspectGraph(args) => print!(
            "{}",
            render_graph(&DialogueGraph::from_sequence(&args.sequence()?.seq))
        ),
        Command::GradCheck { seed } => {
            let (model, item) = reference_case(seed)?;
            let checks = check_gradients(&model, &item, Tolerance::default())?;
            print!("{}", hidialog::gradcheck::render(&checks));
            let failed = checks.iter().filter(|c| !c.passed()).count();
            println!("groups {} failed {failed}", checks.len());
            if failed > 0 {
                return Err(Error::GradientMismatch { groups: failed });
            }
        }
    }
    Ok(())
}

fn gen_synthetic(
    out: &Path,
    sizes: [usize; 3],
    classes: usize,
    seed: u64,
    placement: CuePlacement,
    distractor_rate: f64,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut schema = None;
    for (i, (name, n)) in ["train", "dev", "test"].into_iter().zip(sizes).enumerate() {
        let corpus = generate(&SyntheticSpec {
            instances: n,
            classes,
            seed: seed + i as u64,
            placement,
            distractor_rate,
            id_prefix: name.into(),
            ..Default::default()
        })?;
        let file = fs::File::create(out.join(format!("{name}.jsonl")))?;
        write_corpus(&corpus, BufWriter::new(file))?;
        log::info!("wrote {n} {name} instances");
        schema = Some(corpus.schema());
    }
    if let Some(schema) = schema {
        fs::write(out.join("schema.json"), schema.to_json())?;
    }
    fs::write(
        out.join("run.conf"),
        "train_path = train.jsonl\ndev_path = dev.jsonl\ntest_path = test.jsonl\nschema_path = schema.json\ncheckpoint_dir = run\n",
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
