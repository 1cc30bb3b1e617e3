//! Command-line interface: argument parsing, config resolution and the subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{GradientFault, Real};
use crate::cache::{
    encode_corpus, score_all_pairs, write_ranked_tsv, CallCounter, RankedPair, RepCache,
};
use crate::data::{
    aspect_labels, gen_aspect_sequences, gen_aspect_task_with_val, load_sentences, load_tsv_pairs,
    split_words, tokenize, write_tsv_pairs, AspectTask, Dataset, LabelSet, Vocab, RESERVED_TOKENS,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matching::{AggFn, MatchConfig, MatchFn, Variant};
use crate::model::{hex, parse_layers, Model, ModelConfig};
use crate::trainer::{
    evaluate, gradient_check_model, train, valid_combinations, write_trace, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FINGERPRINT: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.hwmt";
pub const TRACE_FILE: &str = "trace.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CACHE_FILE: &str = "cache.hwmc";
pub const RANKED_FILE: &str = "ranked.tsv";
pub const COUNTERS_FILE: &str = "counters.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const ATTENTION_SUMMARY_FILE: &str = "attention_summary.txt";

#[derive(Parser, Debug)]
#[command(
    name = "headwise",
    version,
    about = "Head-wise Transformer matching for sequence pairs"
)]
pub struct Cli {
    /// Flat `key = value` file; command-line flags override its entries
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point width: 32 or 64
    #[arg(long, global = true)]
    pub precision: Option<String>,
    /// Directory receiving every output file
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Declares a group of string-valued flags that overlay a [`KvMap`] under the
/// given keys. Values are parsed, and rejected with the key named, at resolution.
macro_rules! flag_group {
    ($name:ident { $($(#[doc = $doc:literal])* $field:ident = $key:literal),* $(,)? }) => {
        #[derive(Args, Debug, Default, Clone)]
        pub struct $name {
            $(
                $(#[doc = $doc])*
                #[arg(long = $key)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            fn overlay(&self, kv: &mut KvMap) {
                $(
                    if let Some(v) = &self.$field {
                        kv.set($key, v);
                    }
                )*
            }
        }
    };
}

flag_group!(DataArgs {
    /// `synthetic` (aspect task) or `tsv`
    task = "task",
    /// Training pairs TSV (text_a, text_b, label)
    train_data = "train-data",
    /// Validation pairs TSV, used to pick the best epoch
    val_data = "val-data",
    /// Held-out pairs TSV
    test_data = "test-data",
    /// Vocabulary file, one token per line
    vocab = "vocab",
    /// Comma-separated class names
    labels = "labels",
    /// Class treated as positive for F1 and ranking
    positive_label = "positive-label",
    /// Synthetic task: number of aspects
    num_aspects = "num-aspects",
    /// Synthetic task: tokens per aspect
    vocab_per_aspect = "vocab-per-aspect",
    /// Synthetic task: training pairs
    n_train = "n-train",
    /// Synthetic task: validation pairs
    n_val = "n-val",
    /// Synthetic task: held-out pairs
    n_test = "n-test",
});

flag_group!(ModelArgs {
    /// Encoder layers k
    num_layers = "num-layers",
    /// Attention heads per layer I
    num_heads = "num-heads",
    /// Width of each head d
    head_dim = "head-dim",
    /// Feed-forward inner width
    ffn_dim = "ffn-dim",
    /// Maximum sequence length, CLS included
    max_seq_len = "max-seq-len",
    /// classic, single_level, multi_level or multi_level_no_hier
    variant = "variant",
    /// Match function: cosine, bilinear or element
    match_fn = "match",
    /// Aggregation: maxpool or concat
    agg = "agg",
    /// 1-based layers to match, e.g. `1,2` or `1-4`; default all
    layers = "layers",
    /// Width of match and aggregation transforms
    match_hidden = "match-hidden",
    /// Dropout rate during training
    dropout = "dropout",
});

flag_group!(TrainArgs {
    /// Learning rate
    lr = "lr",
    /// Examples per optimizer step
    batch_size = "batch-size",
    /// Passes over the training set
    epochs = "epochs",
    /// sgd or adam
    optimizer = "optimizer",
    /// Stop after this many steps
    max_steps = "max-steps",
});

flag_group!(InputArgs {
    /// Model checkpoint (default: OUT/checkpoint.hwmt)
    checkpoint = "checkpoint",
    /// Sentences file, `id<TAB>text` per line
    input = "input",
    /// A single sentence
    text = "text",
    /// Number of synthetic sequences when no input file is given
    n_seqs = "n-seqs",
});

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a model and write a checkpoint, trace and resolved config
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Report accuracy and F1 of a checkpoint on labeled pairs
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Model checkpoint (default: OUT/checkpoint.hwmt)
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Encode a corpus once and cache its representations
    Encode {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Cache file (default: OUT/cache.hwmc)
        #[arg(long)]
        cache: Option<String>,
    },
    /// Score all cached pairs, or the pairs of a TSV file, and rank them
    Match {
        /// Model checkpoint (default: OUT/checkpoint.hwmt)
        #[arg(long)]
        checkpoint: Option<String>,
        /// Cache file (default: OUT/cache.hwmc)
        #[arg(long)]
        cache: Option<String>,
        /// Pairs TSV scored by encoding each pair afresh instead of the cache
        #[arg(long)]
        pairs: Option<String>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write per-layer CSVs of CLS-row attention weights, one row per head
    DumpAttention {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Finite-difference check of every parameter gradient
    GradCheck {
        /// Variant to check (default: all)
        #[arg(long)]
        variant: Option<String>,
        /// Match function to check (default: all)
        #[arg(long = "match")]
        match_fn: Option<String>,
        /// Aggregation to check (default: all valid)
        #[arg(long)]
        agg: Option<String>,
        /// Largest accepted relative error
        #[arg(long)]
        tolerance: Option<String>,
        /// Flip the sign of one gradient rule: matmul, relu, softmax, layer_norm, multiply
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Write synthetic aspect-task pairs, sequences and vocabulary
    GenData {
        #[command(flatten)]
        data: DataArgs,
        /// Number of unpaired sequences for the encode pipeline
        #[arg(long = "n-seqs")]
        n_seqs: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Encode { .. } => "encode",
            Command::Match { .. } => "match",
            Command::DumpAttention { .. } => "dump-attention",
            Command::GradCheck { .. } => "grad-check",
            Command::GenData { .. } => "gen-data",
        }
    }

    fn overlay(&self, kv: &mut KvMap) {
        let mut set = |key: &str, v: &Option<String>| {
            if let Some(v) = v {
                kv.set(key, v);
            }
        };
        match self {
            Command::Train { data, model, train } => {
                data.overlay(kv);
                model.overlay(kv);
                train.overlay(kv);
            }
            Command::Eval { data, checkpoint } => {
                set("checkpoint", checkpoint);
                data.overlay(kv);
            }
            Command::Encode { data, input, cache } => {
                set("cache", cache);
                data.overlay(kv);
                input.overlay(kv);
            }
            Command::Match {
                checkpoint,
                cache,
                pairs,
                data,
            } => {
                set("checkpoint", checkpoint);
                set("cache", cache);
                set("pairs", pairs);
                data.overlay(kv);
            }
            Command::DumpAttention { data, input } => {
                data.overlay(kv);
                input.overlay(kv);
            }
            Command::GradCheck {
                variant,
                match_fn,
                agg,
                tolerance,
                inject_fault,
            } => {
                set("variant", variant);
                set("match", match_fn);
                set("agg", agg);
                set("tolerance", tolerance);
                set("inject_fault", inject_fault);
            }
            Command::GenData { data, n_seqs } => {
                set("n_seqs", n_seqs);
                data.overlay(kv);
            }
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "command",
    "out",
    "seed",
    "precision",
    "task",
    "train_data",
    "val_data",
    "test_data",
    "vocab",
    "labels",
    "positive_label",
    "num_aspects",
    "vocab_per_aspect",
    "n_train",
    "n_val",
    "n_test",
    "num_layers",
    "num_heads",
    "head_dim",
    "ffn_dim",
    "max_seq_len",
    "variant",
    "match",
    "agg",
    "layers",
    "match_hidden",
    "dropout",
    "lr",
    "batch_size",
    "epochs",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "max_steps",
    "stop_at_perfect_eval",
    "checkpoint",
    "cache",
    "pairs",
    "input",
    "text",
    "n_seqs",
    "tolerance",
    "inject_fault",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub num_aspects: usize,
    pub vocab_per_aspect: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SyntheticTask {
    pub fn generate(&self, seed: u64) -> Result<AspectTask> {
        gen_aspect_task_with_val(
            self.num_aspects,
            self.vocab_per_aspect,
            self.n_train,
            self.n_val,
            self.n_test,
            seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticTask),
    Tsv {
        train: Option<PathBuf>,
        val: Option<PathBuf>,
        test: Option<PathBuf>,
    },
}

/// Everything a command needs, resolved from defaults, the config file and flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub data: DataSource,
    pub labels: LabelSet,
    pub vocab: Option<PathBuf>,
    /// Model settings; `vocab_size` is filled in once the vocabulary is known.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint: PathBuf,
    pub cache: PathBuf,
    pub pairs: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub text: Option<String>,
    pub n_seqs: usize,
    /// Every key with its effective value, defaults included.
    pub resolved: KvMap,
}

/// Typed lookups that remember the effective value of every key consulted.
struct Resolver<'a> {
    kv: &'a KvMap,
    resolved: KvMap,
}

impl Resolver<'_> {
    fn get<V: std::str::FromStr + ToString>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        let v = self.kv.parse_or(key, default)?;
        self.resolved.set(key, v.to_string());
        Ok(v)
    }

    fn opt_str(&mut self, key: &str) -> Option<String> {
        let v = self.kv.get(key).map(str::to_string);
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        v
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvMap, command: &str) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::config(k, "unknown key"));
        }
        let mut r = Resolver {
            kv,
            resolved: KvMap::new(),
        };
        r.resolved.set("command", command);
        let out = PathBuf::from(r.get("out", "out".to_string())?);
        let seed = r.get("seed", 0u64)?;
        let default_precision = if command == "grad-check" { 64 } else { 32 };
        let precision = match r.get("precision", default_precision)? {
            32 => Precision::F32,
            64 => Precision::F64,
            other => {
                return Err(Error::config(
                    "precision",
                    format!("`{other}` is not 32 or 64"),
                ))
            }
        };

        let task = r.get("task", "synthetic".to_string())?;
        let (data, default_len) = match task.as_str() {
            "synthetic" => {
                let t = SyntheticTask {
                    num_aspects: r.get("num_aspects", 4)?,
                    vocab_per_aspect: r.get("vocab_per_aspect", 8)?,
                    n_train: r.get("n_train", 4000)?,
                    n_val: r.get("n_val", 400)?,
                    n_test: r.get("n_test", 1000)?,
                };
                let len = t.num_aspects + 1;
                (DataSource::Synthetic(t), len)
            }
            "tsv" => {
                let train = r.opt_str("train_data").map(PathBuf::from);
                let val = r.opt_str("val_data").map(PathBuf::from);
                let test = r.opt_str("test_data").map(PathBuf::from);
                (DataSource::Tsv { train, val, test }, 64)
            }
            other => {
                return Err(Error::config(
                    "task",
                    format!("`{other}` is not one of synthetic, tsv"),
                ))
            }
        };

        let labels = if matches!(data, DataSource::Synthetic(_)) {
            aspect_labels()
        } else {
            let names: Vec<String> = r
                .get("labels", "mismatch,match".to_string())?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let last = names.last().cloned().unwrap_or_default();
            let positive_name = r.get("positive_label", last)?;
            let positive = names
                .iter()
                .position(|n| *n == positive_name)
                .ok_or_else(|| {
                    Error::config(
                        "positive_label",
                        format!("`{positive_name}` is not among the labels"),
                    )
                })?;
            LabelSet::new(names, positive)?
        };
        let vocab = r.opt_str("vocab").map(PathBuf::from);

        let dropout = r.get("dropout", 0.0f64)?;
        let encoder = EncoderConfig {
            num_layers: r.get("num_layers", 2)?,
            num_heads: r.get("num_heads", 4)?,
            head_dim: r.get("head_dim", 16)?,
            ffn_dim: r.get("ffn_dim", 64)?,
            max_seq_len: r.get("max_seq_len", default_len)?,
            vocab_size: RESERVED_TOKENS.len() + 1,
            dropout_rate: dropout,
        };
        let layers_text = r.get("layers", "all".to_string())?;
        let matching = MatchConfig {
            variant: r.get("variant", Variant::MultiLevel)?,
            match_fn: r.get("match", MatchFn::Element)?,
            agg_fn: r.get("agg", AggFn::MaxPool)?,
            layers: parse_layers(&layers_text)?,
            match_hidden: r.get("match_hidden", 32)?,
            num_classes: labels.len(),
        };
        let model = ModelConfig {
            encoder,
            matching,
            labels: labels.clone(),
        };
        if command == "train" {
            model.validate()?;
        } else if command != "grad-check" {
            // Match settings of other commands come from the checkpoint.
            model.encoder.validate()?;
        }

        let mut train_kv = KvMap::new();
        for key in [
            "lr",
            "batch_size",
            "epochs",
            "optimizer",
            "adam_beta1",
            "adam_beta2",
            "adam_eps",
            "max_steps",
            "stop_at_perfect_eval",
        ] {
            if let Some(v) = kv.get(key) {
                train_kv.set(key, v);
            }
        }
        train_kv.set("dropout", dropout);
        train_kv.set("seed", seed);
        let train = TrainConfig::from_kv(&train_kv)?;
        if command == "train" {
            r.resolved.overlay(&train.to_kv());
        }

        let checkpoint = r
            .get(
                "checkpoint",
                out.join(CHECKPOINT_FILE).display().to_string(),
            )?
            .into();
        let cache = r
            .get("cache", out.join(CACHE_FILE).display().to_string())?
            .into();
        let pairs = r.opt_str("pairs").map(PathBuf::from);
        let input = r.opt_str("input").map(PathBuf::from);
        let text = r.opt_str("text");
        let n_seqs = r.get("n_seqs", 200)?;
        let mut resolved = r.resolved;
        if command == "grad-check" {
            // Model settings are fixed by the check; only the selection is recorded.
            let mut kept = KvMap::new();
            for key in [
                "command",
                "out",
                "seed",
                "precision",
                "variant",
                "match",
                "agg",
                "tolerance",
                "inject_fault",
            ] {
                if let Some(v) = resolved.get(key).or_else(|| kv.get(key)) {
                    kept.set(key, v);
                }
            }
            for key in ["variant", "match", "agg"] {
                if kv.get(key).is_none() {
                    kept.remove(key);
                }
            }
            resolved = kept;
        }

        Ok(RunConfig {
            command: command.to_string(),
            out,
            seed,
            precision,
            data,
            labels,
            vocab,
            model,
            train,
            checkpoint,
            cache,
            pairs,
            input,
            text,
            n_seqs,
            resolved,
        })
    }

    fn synthetic(&self) -> Option<&SyntheticTask> {
        match &self.data {
            DataSource::Synthetic(t) => Some(t),
            DataSource::Tsv { .. } => None,
        }
    }

    fn snapshot_path(&self) -> PathBuf {
        self.out.join(format!("{}.resolved.conf", self.command))
    }

    /// Vocabulary for commands that read a trained model: the explicit file, else
    /// the one written next to the checkpoint, else the synthetic vocabulary.
    fn inference_vocab(&self) -> Result<Vocab> {
        if let Some(p) = &self.vocab {
            return Vocab::load(p);
        }
        let beside = self.checkpoint.with_file_name(VOCAB_FILE);
        if beside.exists() {
            return Vocab::load(&beside);
        }
        match self.synthetic() {
            Some(t) => Ok(crate::data::aspect_vocab(t.num_aspects, t.vocab_per_aspect)),
            None => Err(Error::config(
                "vocab",
                "no vocabulary file given or found beside the checkpoint",
            )),
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Fingerprint { .. } => EXIT_FINGERPRINT,
        _ => EXIT_RUNTIME,
    }
}

pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut kv = match &cli.config {
        Some(p) => KvMap::load(p).map_err(|e| Error::config("config", e.to_string()))?,
        None => KvMap::new(),
    };
    // A snapshot records the command it came from; the one being run wins.
    kv.remove("command");
    let mut flags = KvMap::new();
    if let Some(s) = cli.seed {
        flags.set("seed", s);
    }
    if let Some(p) = &cli.precision {
        flags.set("precision", p);
    }
    if let Some(o) = &cli.out {
        flags.set("out", o.display());
    }
    cli.command.overlay(&mut flags);
    kv.overlay(&flags);
    RunConfig::from_kv(&kv, cli.command.name())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.snapshot_path(), cfg.resolved.to_text())?;
    match (&cli.command, cfg.precision) {
        (Command::GradCheck { .. }, Precision::F64) => cmd_grad_check(&cfg),
        (Command::GradCheck { .. }, Precision::F32) => Err(Error::config(
            "precision",
            "gradient checks run in 64-bit mode only",
        )),
        (Command::GenData { .. }, _) => cmd_gen_data(&cfg),
        (_, Precision::F32) => dispatch::<f32>(&cli.command, &cfg),
        (_, Precision::F64) => dispatch::<f64>(&cli.command, &cfg),
    }
}

fn dispatch<T: Real>(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Train { .. } => cmd_train::<T>(cfg),
        Command::Eval { .. } => cmd_eval::<T>(cfg),
        Command::Encode { .. } => cmd_encode::<T>(cfg),
        Command::Match { .. } => cmd_match::<T>(cfg),
        Command::DumpAttention { .. } => cmd_dump_attention::<T>(cfg),
        Command::GradCheck { .. } | Command::GenData { .. } => {
            unreachable!("handled before dispatch")
        }
    }
}

struct Prepared {
    vocab: Vocab,
    train: Dataset,
    val: Option<Dataset>,
    test: Option<Dataset>,
}

fn prepare_training_data(cfg: &RunConfig) -> Result<Prepared> {
    match &cfg.data {
        DataSource::Synthetic(t) => {
            let task = t.generate(cfg.seed)?;
            let val = (!task.val.examples.is_empty()).then_some(task.val);
            let test = (!task.test.examples.is_empty()).then_some(task.test);
            Ok(Prepared {
                vocab: task.vocab,
                train: task.train,
                val,
                test,
            })
        }
        DataSource::Tsv { train, val, test } => {
            let train_path = train
                .as_ref()
                .ok_or_else(|| Error::config("train_data", "required for task = tsv"))?;
            let vocab = match &cfg.vocab {
                Some(p) => Vocab::load(p)?,
                None => vocab_from_pairs(train_path)?,
            };
            let max_len = cfg.model.encoder.max_seq_len;
            let load = |p: &Path| load_tsv_pairs(p, &vocab, &cfg.labels, max_len);
            let train = Dataset {
                examples: load(train_path)?,
                labels: cfg.labels.clone(),
            };
            let load_opt = |p: &Option<PathBuf>| -> Result<Option<Dataset>> {
                p.as_deref()
                    .map(|p| {
                        Ok(Dataset {
                            examples: load(p)?,
                            labels: cfg.labels.clone(),
                        })
                    })
                    .transpose()
            };
            let (val, test) = (load_opt(val)?, load_opt(test)?);
            Ok(Prepared {
                vocab,
                train,
                val,
                test,
            })
        }
    }
}

/// Vocabulary of the words in the two text columns, in order of first appearance.
fn vocab_from_pairs(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let mut vocab = Vocab::new();
    for line in text.lines() {
        for col in line.split('\t').take(2) {
            for w in split_words(col) {
                vocab.add(&w);
            }
        }
    }
    Ok(vocab)
}

fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<()> {
    let data = prepare_training_data(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.encoder.vocab_size = data.vocab.len();
    let mut model = Model::<T>::init(model_cfg, cfg.seed)?;
    let started = Instant::now();
    let outcome = train(&mut model, &data.train, data.val.as_ref(), &cfg.train)?;
    model.save(&cfg.out.join(CHECKPOINT_FILE))?;
    write_trace(&cfg.out.join(TRACE_FILE), &outcome.trace)?;
    data.vocab.save(&cfg.out.join(VOCAB_FILE))?;
    println!(
        "trained {} steps in {:.1}s; kept epoch {}",
        outcome.steps,
        started.elapsed().as_secs_f64(),
        outcome.best_epoch
    );
    if let Some(test) = &data.test {
        let report = evaluate(&model, test)?;
        fs::write(cfg.out.join(EVAL_FILE), report.to_text(&cfg.labels.names))?;
        println!("accuracy={:.4} f1={:.4}", report.accuracy, report.f1);
    }
    Ok(())
}

fn cmd_eval<T: Real>(cfg: &RunConfig) -> Result<()> {
    let model = Model::<T>::load(&cfg.checkpoint)?;
    let data = match &cfg.data {
        DataSource::Synthetic(t) => t.generate(cfg.seed)?.test,
        DataSource::Tsv { test, .. } => {
            let path = test
                .as_ref()
                .ok_or_else(|| Error::config("test_data", "required for task = tsv"))?;
            let vocab = cfg.inference_vocab()?;
            let labels = model.config.labels.clone();
            let examples = load_tsv_pairs(path, &vocab, &labels, model.config.encoder.max_seq_len)?;
            Dataset { examples, labels }
        }
    };
    let report = evaluate(&model, &data)?;
    fs::write(
        cfg.out.join(EVAL_FILE),
        report.to_text(&model.config.labels.names),
    )?;
    println!(
        "accuracy={:.4} f1={:.4} examples={}",
        report.accuracy,
        report.f1,
        report.total()
    );
    Ok(())
}

/// Sequences named by `input`, `text`, or generated synthetically.
fn corpus(cfg: &RunConfig, max_len: usize) -> Result<Vec<(String, Vec<u32>)>> {
    if let Some(p) = &cfg.input {
        return load_sentences(p, &cfg.inference_vocab()?, max_len);
    }
    if let Some(t) = &cfg.text {
        return Ok(vec![(
            "text".to_string(),
            tokenize(t, &cfg.inference_vocab()?, max_len),
        )]);
    }
    match cfg.synthetic() {
        Some(t) => Ok(gen_aspect_sequences(
            t.num_aspects,
            t.vocab_per_aspect,
            cfg.n_seqs,
            cfg.seed,
        )),
        None => Err(Error::config(
            "input",
            "give an input file or text, or use task = synthetic",
        )),
    }
}

fn read_counters(path: &Path) -> Result<CallCounter> {
    if !path.exists() {
        return Ok(CallCounter::default());
    }
    let kv = KvMap::load(path)?;
    Ok(CallCounter {
        encoder_calls: kv.parse_or("encoder_calls", 0)?,
        match_evals: kv.parse_or("match_evals", 0)?,
    })
}

fn cmd_encode<T: Real>(cfg: &RunConfig) -> Result<()> {
    let model = Model::<T>::load(&cfg.checkpoint)?;
    let seqs = corpus(cfg, model.config.encoder.max_seq_len)?;
    let fingerprint = model.fingerprint();
    let mut cache = if cfg.cache.exists() {
        RepCache::load(&cfg.cache)?
    } else {
        RepCache::new(fingerprint)
    };
    let mut counter = CallCounter::default();
    let started = Instant::now();
    encode_corpus(&model, &seqs, &mut cache, &mut counter)?;
    cache.save(&cfg.cache)?;
    fs::write(cfg.out.join(COUNTERS_FILE), counter.to_text())?;
    println!(
        "encoder_calls={} cached={} fingerprint={} elapsed={:.3}s",
        counter.encoder_calls,
        cache.len(),
        hex(&fingerprint),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_match<T: Real>(cfg: &RunConfig) -> Result<()> {
    let model = Model::<T>::load(&cfg.checkpoint)?;
    let mut delta = CallCounter::default();
    let started = Instant::now();
    let ranked = match &cfg.pairs {
        Some(path) => score_pair_file::<T>(&model, path, cfg, &mut delta)?,
        None => score_all_pairs(&model, &RepCache::load(&cfg.cache)?, &mut delta)?,
    };
    let elapsed = started.elapsed().as_secs_f64();
    write_ranked_tsv(&cfg.out.join(RANKED_FILE), &ranked)?;
    let counters_path = cfg.out.join(COUNTERS_FILE);
    let mut total = if cfg.pairs.is_none() {
        read_counters(&counters_path)?
    } else {
        CallCounter::default()
    };
    total.encoder_calls += delta.encoder_calls;
    total.match_evals += delta.match_evals;
    fs::write(&counters_path, total.to_text())?;
    println!(
        "encoder_calls={} match_evals={} (this run: encoder_calls={} match_evals={}, {:.3}s)",
        total.encoder_calls, total.match_evals, delta.encoder_calls, delta.match_evals, elapsed
    );
    if let Some(top) = ranked.first() {
        println!("top pair: {} {} score={:.6}", top.id_a, top.id_b, top.score);
    }
    Ok(())
}

/// Scores `text_a<TAB>text_b[<TAB>...]` lines by encoding both sides afresh.
fn score_pair_file<T: Real>(
    model: &Model<T>,
    path: &Path,
    cfg: &RunConfig,
    counter: &mut CallCounter,
) -> Result<Vec<RankedPair>> {
    let vocab = cfg.inference_vocab()?;
    let max_len = model.config.encoder.max_seq_len;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = fs::read_to_string(path)?;
    let before = model.encoder_calls();
    let mut ranked = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected at least 2 tab-separated columns".into(),
            });
        }
        let a = tokenize(cols[0], &vocab, max_len);
        let b = tokenize(cols[1], &vocab, max_len);
        let probs = model.score_tokens(&a, &b)?;
        counter.match_evals += 1;
        ranked.push(RankedPair {
            id_a: format!("{name}:{}:a", i + 1),
            id_b: format!("{name}:{}:b", i + 1),
            score: probs[model.config.labels.positive].as_f64(),
        });
    }
    counter.encoder_calls += model.encoder_calls() - before;
    ranked.sort_by(crate::cache::rank_order);
    Ok(ranked)
}

fn cmd_dump_attention<T: Real>(cfg: &RunConfig) -> Result<()> {
    let model = Model::<T>::load(&cfg.checkpoint)?;
    let seqs = corpus(cfg, model.config.encoder.max_seq_len)?;
    let vocab = cfg.inference_vocab()?;
    let (layers, heads) = (
        model.config.encoder.num_layers,
        model.config.encoder.num_heads,
    );
    // Per (layer, head): sum over sequences of max weight relative to uniform.
    let mut sharpness = vec![vec![0.0f64; heads]; layers];
    for (s, (id, tokens)) in seqs.iter().enumerate() {
        let out = model.encode(tokens)?;
        let len = out
            .attention
            .first()
            .and_then(|l| l.first())
            .map_or(0, |a| a.cols());
        let names: Vec<&str> = tokens
            .iter()
            .take(len)
            .map(|&t| vocab.token(t).unwrap_or("[?]"))
            .collect();
        for (l, layer) in out.attention.iter().enumerate() {
            let mut csv = format!("# sequence {id}\n# tokens: {}\nhead", names.join(" "));
            for p in 0..len {
                write!(csv, ",{p}").unwrap();
            }
            csv.push('\n');
            for (h, weights) in layer.iter().enumerate() {
                let row = weights.row(0);
                write!(csv, "{h}").unwrap();
                for w in row {
                    write!(csv, ",{:.8}", w.as_f64()).unwrap();
                }
                csv.push('\n');
                let max = row.iter().map(|w| w.as_f64()).fold(0.0, f64::max);
                sharpness[l][h] += max * len as f64;
            }
            fs::write(cfg.out.join(format!("attention_s{s}_l{}.csv", l + 1)), csv)?;
        }
    }
    let n = seqs.len().max(1) as f64;
    let mut summary = String::from("layer,head,mean_max_over_uniform\n");
    let mut sharp = 0;
    for (l, row) in sharpness.iter().enumerate() {
        for (h, total) in row.iter().enumerate() {
            let ratio = total / n;
            if ratio > 2.0 {
                sharp += 1;
            }
            writeln!(summary, "{},{h},{ratio:.6}", l + 1).unwrap();
        }
    }
    fs::write(cfg.out.join(ATTENTION_SUMMARY_FILE), summary)?;
    println!(
        "wrote {} attention files; {sharp} of {} heads put more than twice the uniform weight on their top position",
        seqs.len() * layers,
        layers * heads
    );
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<()> {
    let kv = &cfg.resolved;
    let variant: Option<Variant> = kv.parse_opt("variant")?;
    let match_fn: Option<MatchFn> = kv.parse_opt("match")?;
    let agg: Option<AggFn> = kv.parse_opt("agg")?;
    let tolerance = kv.parse_or("tolerance", 1e-4)?;
    let fault: Option<GradientFault> = kv.parse_opt("inject_fault")?;
    if let (Some(m), Some(a)) = (match_fn, agg) {
        if m.is_scalar() && a == AggFn::MaxPool {
            return Err(Error::config(
                "agg",
                format!("{m} match can only be aggregated with concat"),
            ));
        }
    }
    let combos: Vec<_> = valid_combinations()
        .into_iter()
        .filter(|(v, m, a)| {
            variant.is_none_or(|x| x == *v)
                && match_fn.is_none_or(|x| x == *m)
                && agg.is_none_or(|x| x == *a)
        })
        .collect();
    let mut text = String::new();
    let mut failed = 0;
    for (v, m, a) in combos.iter().copied() {
        let report = gradient_check_model(v, m, a, tolerance, fault)?;
        let worst = report.worst().map_or("-".to_string(), |w| w.name.clone());
        let status = if report.passed() { "PASS" } else { "FAIL" };
        if !report.passed() {
            failed += 1;
        }
        let line = format!(
            "{status} variant={v} match={m} agg={a} max_rel_error={:.3e} worst={worst}",
            report.max_rel_error()
        );
        println!("{line}");
        writeln!(text, "{line}").unwrap();
        for p in &report.params {
            writeln!(text, "  {} {:.3e}", p.name, p.max_rel_error).unwrap();
        }
    }
    fs::write(cfg.out.join(GRADCHECK_FILE), text)?;
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} of {} gradient checks failed",
            combos.len()
        )));
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let t = cfg
        .synthetic()
        .ok_or_else(|| Error::config("task", "gen-data only generates the synthetic task"))?;
    let task = t.generate(cfg.seed)?;
    write_tsv_pairs(
        &cfg.out.join("train.tsv"),
        &task.train.examples,
        &task.vocab,
        &task.train.labels,
    )?;
    write_tsv_pairs(
        &cfg.out.join("val.tsv"),
        &task.val.examples,
        &task.vocab,
        &task.val.labels,
    )?;
    write_tsv_pairs(
        &cfg.out.join("test.tsv"),
        &task.test.examples,
        &task.vocab,
        &task.test.labels,
    )?;
    task.vocab.save(&cfg.out.join(VOCAB_FILE))?;
    let seqs = gen_aspect_sequences(t.num_aspects, t.vocab_per_aspect, cfg.n_seqs, cfg.seed);
    let mut text = String::new();
    for (id, tokens) in &seqs {
        writeln!(
            text,
            "{id}\t{}",
            crate::data::detokenize(tokens, &task.vocab)
        )
        .unwrap();
    }
    fs::write(cfg.out.join("sequences.tsv"), text)?;
    println!(
        "wrote {} train, {} validation, {} test pairs and {} sequences to {}",
        task.train.examples.len(),
        task.val.examples.len(),
        task.test.examples.len(),
        seqs.len(),
        cfg.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_args(args: &[&str]) -> Result<RunConfig> {
        let cli =
            Cli::try_parse_from(std::iter::once("headwise").chain(args.iter().copied())).unwrap();
        resolve(&cli)
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "seed = 3\nepochs = 7\nlayers = 1\n").unwrap();
        let cfg = resolve_args(&[
            "--config",
            p.to_str().unwrap(),
            "--seed",
            "5",
            "train",
            "--lr",
            "0.01",
        ])
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.model.matching.layers, Some(vec![0]));
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = resolve_args(&["train", "--match", "cosine", "--agg", "maxpool"]).unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "agg"),
            "{err}"
        );
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        let err = resolve_args(&["train", "--epochs", "many"]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "epochs"));
        let err = resolve_args(&["train", "--layers", "3"]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "layers"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "epochz = 3\n").unwrap();
        let err = resolve_args(&["--config", p.to_str().unwrap(), "train"]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "epochz"));
    }

    #[test]
    fn snapshot_resolves_to_the_same_config() {
        let cfg = resolve_args(&[
            "--seed",
            "9",
            "train",
            "--variant",
            "single",
            "--layers",
            "1-2",
            "--epochs",
            "3",
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap.conf");
        fs::write(&p, cfg.resolved.to_text()).unwrap();
        let again = resolve_args(&["--config", p.to_str().unwrap(), "train"]).unwrap();
        assert_eq!(again.resolved, cfg.resolved);
        assert_eq!(again.model, cfg.model);
        assert_eq!(again.train, cfg.train);
    }

    #[test]
    fn grad_check_defaults_to_64_bit() {
        assert_eq!(
            resolve_args(&["grad-check"]).unwrap().precision,
            Precision::F64
        );
        assert_eq!(resolve_args(&["train"]).unwrap().precision, Precision::F32);
    }
}
