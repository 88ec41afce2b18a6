//! Command-line surface: `dpt <subcommand> [flags]`.
//!
//! Every subcommand reads an optional strict `key = value` config file
//! (`--config`); flags such as `--seed`, `--k` and `--switches` override it.
//! Metrics go to stdout as JSON lines and, with `--out`, are appended to a
//! JSONL file.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dpt_core::harness::{
    pretrain_backbone, retrieval_accuracy, Benchmark, Dataset, Experiment, MetricsRecord,
    PromptLearner, RunConfig, Switches,
};
use dpt_core::io::synth::{self, SynthConfig, SYNTH_CLASSES};
use dpt_core::io::{
    append_metrics, decode_weights, encode_pgm, encode_weights, load_config, load_dataset,
    load_prompt_bank, load_weights, parse_config, read_pnm, save_dataset, save_prompt_bank,
    save_weights, LambdaTable,
};
use dpt_core::tensor::{ParamStore, Tensor};
use dpt_core::text::{embed_prompt_bank, ContextInit, PromptBank, PromptSpec, Tokenizer, Vocab};
use dpt_core::vision::{saliency_with, SaliencyMethod};
use dpt_core::{Error, ModelConfig, ModelParams};

/// File name of the prompt bank written next to a generated dataset.
pub const BANK_FILE: &str = "prompts.json";

#[derive(Parser, Debug)]
#[command(name = "dpt", version, about = "Dual-modality prompt tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` settings file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct Backbone {
    /// Dataset directory holding a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Backbone weights written by `pretrain`.
    #[arg(long)]
    weights: PathBuf,
    /// Prompt bank JSON; defaults to the dataset's `prompts.json`.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Tuning {
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated subset of `zsp,cpt,l1,kl`, or `all` / `none`.
    #[arg(long)]
    switches: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic quadrant-texture dataset and its prompt bank.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        /// Generate the backbone pretraining corpus instead of the benchmark.
        #[arg(long)]
        pretraining: bool,
    },
    /// Contrastive backbone pretraining; writes a weight file.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Image-caption dataset; the built-in pretraining corpus when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "backbone.dptw")]
        out: PathBuf,
    },
    /// Ensembles the prompt bank into one teacher embedding per class.
    EmbedPrompts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: Backbone,
        #[arg(long, default_value = "teacher.dptw")]
        out: PathBuf,
    },
    /// K-shot prompt tuning; writes the learned context vectors.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: Backbone,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long, default_value = "context.dptw")]
        out: PathBuf,
        /// Also append the run's metrics line to this JSONL file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Test accuracy of tuned context vectors, or of the zero-shot ensemble
    /// when no context is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: Backbone,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tunes on base classes and scores base and novel classes.
    Base2novel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: Backbone,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch saliency of one image for one class, written as a PGM heatmap.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class: usize,
        /// Backbone weights; a freshly initialised model when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Dataset directory for class names and bank; synthetic classes when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Tuned context vectors; the bank ensemble is used when omitted.
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        switches: Option<String>,
        #[arg(long, value_enum, default_value_t = Method::Ig)]
        method: Method,
        #[arg(long, default_value = "saliency.pgm")]
        out: PathBuf,
    },
    /// Few-shot runs over all 16 switch combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        backbone: Backbone,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Gradient,
    Ig,
}

/// A failed invocation and its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// The run itself failed: exit 1.
    Run(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Run(other),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Runs one command line (`argv[0]` is the program name) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("dpt: {}", f.to_string().lines().next().unwrap_or_default());
            f.exit_code()
        }
    }
}

/// Defaults, then the lambda table entry of the configured dataset, then the file.
fn run_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let Some(path) = path else {
        let mut c = RunConfig::default();
        LambdaTable::builtin().apply(&mut c);
        return Ok(c);
    };
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let first = load_config(path, RunConfig::default(), true)?;
    let mut base = RunConfig {
        dataset: first.dataset.clone(),
        ..RunConfig::default()
    };
    LambdaTable::builtin().apply(&mut base);
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(parse_config(&text, base, true)?)
}

fn apply_flags(config: &mut RunConfig, common: &Common, tuning: Option<&Tuning>) -> Outcome<()> {
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(t) = tuning {
        if let Some(k) = t.k {
            config.k_shot = k;
        }
        if let Some(s) = &t.switches {
            config.switches = s.parse()?;
        }
    }
    config.validate()?;
    Ok(())
}

fn tokenizer(config: &RunConfig) -> Tokenizer {
    Tokenizer::new(Vocab::builtin(), config.model.context_window)
}

fn model_config(config: &RunConfig, tokenizer: &Tokenizer) -> ModelConfig {
    ModelConfig {
        vocab_size: tokenizer.vocab.len(),
        ..config.model.clone()
    }
}

fn prompt_spec(config: &RunConfig) -> Outcome<PromptSpec> {
    PromptSpec::builtin_for(&config.dataset).ok_or_else(|| {
        Failure::Usage(format!("no prompt template for dataset `{}`", config.dataset))
    })
}

fn is_synthetic(names: &[String]) -> bool {
    names.iter().map(String::as_str).eq(SYNTH_CLASSES)
}

/// Explicit bank, else the one stored beside the data, else the synthetic bank.
fn prompt_bank(
    explicit: Option<&Path>,
    data: Option<&Path>,
    class_names: &[String],
    config: &RunConfig,
) -> Outcome<PromptBank> {
    let beside = data.map(|d| d.join(BANK_FILE)).filter(|p| p.is_file());
    match explicit.map(Path::to_path_buf).or(beside) {
        Some(path) => Ok(load_prompt_bank(&path, class_names, false)?),
        None if is_synthetic(class_names) => Ok(synth::default_bank(config.n_prompts)),
        None => Err(Failure::Usage("no prompt bank found; pass --bank".into())),
    }
}

fn experiment(config: RunConfig, backbone: &Backbone) -> Outcome<Experiment> {
    let tok = tokenizer(&config);
    let params = load_weights(&model_config(&config, &tok), &backbone.weights)?;
    let dataset = load_dataset(&backbone.data)?;
    let bank = prompt_bank(
        backbone.bank.as_deref(),
        Some(&backbone.data),
        &dataset.class_names,
        &config,
    )?;
    let spec = prompt_spec(&config)?;
    Ok(Experiment::new(params, tok, spec, dataset, bank, config)?)
}

fn emit(records: &[MetricsRecord], out: Option<&Path>) -> Outcome<()> {
    for r in records {
        println!("{}", r.to_json_line());
    }
    if let Some(path) = out {
        append_metrics(path, records)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome<()> {
    std::fs::write(path, bytes).map_err(|e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn single_leaf(name: &str, value: Tensor) -> Vec<u8> {
    let mut store = ParamStore::new();
    store.add(name, value, false);
    encode_weights(&store)
}

fn read_leaf(path: &Path, name: &str) -> Outcome<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_weights(&bytes)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| {
            Failure::Run(Error::Format(format!(
                "{} has no `{name}` leaf",
                path.display()
            )))
        })
}

/// A learner over `class_names` carrying the context vectors stored at `path`.
fn load_learner(
    path: &Path,
    spec: &PromptSpec,
    class_names: &[String],
    tokenizer: &Tokenizer,
    params: &ModelParams,
) -> Outcome<PromptLearner> {
    let value = read_leaf(path, "context")?;
    let mut learner = PromptLearner::new(spec, class_names, tokenizer, params, ContextInit::Random, 0)?;
    if value.shape() != learner.context.value().shape() {
        return Err(Failure::Run(Error::Format(format!(
            "context {:?} does not fit the template's {:?}",
            value.shape(),
            learner.context.value().shape()
        ))));
    }
    learner.context.param.value = value;
    Ok(learner)
}

fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::GenData {
            common,
            out,
            train_per_class,
            test_per_class,
            pretraining,
        } => {
            let config = run_config(common.config.as_deref())?;
            let mut synth = if pretraining {
                SynthConfig::pretraining()
            } else {
                SynthConfig::default()
            };
            synth.seed = common.seed.unwrap_or(synth.seed);
            synth.train_per_class = train_per_class.unwrap_or(synth.train_per_class);
            synth.test_per_class = test_per_class.unwrap_or(synth.test_per_class);
            synth.size = config.model.image_size;
            let dataset = synth::generate(&synth)?;
            save_dataset(&dataset, &out)?;
            save_prompt_bank(&synth::default_bank(config.n_prompts), &out.join(BANK_FILE))?;
            log::info!(
                "wrote {} train and {} test images to {}",
                dataset.train.len(),
                dataset.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { common, data, out } => {
            let mut config = run_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.pretrain.seed = seed;
            }
            config.validate()?;
            let dataset: Dataset = match &data {
                Some(dir) => load_dataset(dir)?,
                None => synth::generate(&SynthConfig {
                    size: config.model.image_size,
                    ..SynthConfig::pretraining()
                })?,
            };
            let tok = tokenizer(&config);
            let params = pretrain_backbone(
                &dataset.train,
                &tok,
                &model_config(&config, &tok),
                &config.pretrain,
            )?;
            save_weights(&params, &out)?;
            if !dataset.test.is_empty() {
                let acc = retrieval_accuracy(&params, &tok, &dataset.test, config.pretrain.seed)?;
                println!(
                    "{{\"dataset\":\"{}\",\"retrieval\":{acc},\"fingerprint\":\"{}\"}}",
                    dataset.name,
                    params.store.fingerprint()
                );
            }
            Ok(())
        }
        Command::EmbedPrompts {
            common,
            backbone,
            out,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            apply_flags(&mut config, &common, None)?;
            let exp = experiment(config, &backbone)?;
            let bank = exp.bank.truncated(exp.config.n_prompts);
            let gp = embed_prompt_bank(&exp.params, &exp.tokenizer, &bank, &exp.dataset.class_names)?;
            write_file(&out, &single_leaf("teacher", gp))
        }
        Command::Train {
            common,
            backbone,
            tuning,
            out,
            metrics,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            apply_flags(&mut config, &common, Some(&tuning))?;
            let (k, seed, switches) = (config.k_shot, config.seeds[0], config.switches);
            let mut exp = experiment(config, &backbone)?;
            let (record, tuned) = exp.few_shot(k, seed, switches)?;
            write_file(&out, &single_leaf("context", tuned.learner.context.value().clone()))?;
            emit(&[record], metrics.as_deref())
        }
        Command::Eval {
            common,
            backbone,
            tuning,
            context,
            out,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            apply_flags(&mut config, &common, Some(&tuning))?;
            let (k, seed, switches) = (config.k_shot, config.seeds[0], config.switches);
            let mut exp = experiment(config, &backbone)?;
            let record = match context {
                None => exp.zero_shot(exp.config.n_prompts, seed)?,
                Some(path) => {
                    let names = exp.dataset.class_names.clone();
                    let learner = load_learner(&path, &exp.spec, &names, &exp.tokenizer, &exp.params)?;
                    let all: Vec<usize> = (0..names.len()).collect();
                    let acc = exp.score(&learner, &all, switches)?;
                    MetricsRecord {
                        dataset: exp.dataset.name.clone(),
                        benchmark: Benchmark::FewShot,
                        k_shot: k,
                        seed,
                        switches: switches.to_string(),
                        accuracy: Some(acc),
                        base_acc: None,
                        novel_acc: None,
                        hm: None,
                    }
                }
            };
            emit(&[record], out.as_deref())
        }
        Command::Base2novel {
            common,
            backbone,
            tuning,
            out,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            apply_flags(&mut config, &common, Some(&tuning))?;
            let (k, seeds, switches) = (config.k_shot, config.seeds.clone(), config.switches);
            let mut exp = experiment(config, &backbone)?;
            let records = seeds
                .iter()
                .map(|&s| exp.base_to_novel(k, s, switches))
                .collect::<dpt_core::Result<Vec<_>>>()?;
            emit(&records, out.as_deref())
        }
        Command::Ablate {
            common,
            backbone,
            tuning,
            out,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            apply_flags(&mut config, &common, Some(&tuning))?;
            let (k, seeds) = (config.k_shot, config.seeds.clone());
            let mut exp = experiment(config, &backbone)?;
            let mut records = Vec::new();
            for s in seeds {
                records.extend(exp.ablation(k, s)?);
            }
            emit(&records, out.as_deref())
        }
        Command::Saliency {
            common,
            image,
            class,
            weights,
            data,
            bank,
            context,
            switches,
            method,
            out,
        } => {
            let mut config = run_config(common.config.as_deref())?;
            if let Some(s) = &switches {
                config.switches = s.parse::<Switches>()?;
            }
            let tok = tokenizer(&config);
            let model = model_config(&config, &tok);
            let params = match &weights {
                Some(path) => load_weights(&model, path)?,
                None => ModelParams::init(&model)?,
            };
            let class_names: Vec<String> = match &data {
                Some(dir) => load_dataset(dir)?.class_names,
                None => SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
            };
            let rows = match &context {
                Some(path) => {
                    let spec = PromptSpec {
                        class_position: config.class_position,
                        ..prompt_spec(&config)?
                    };
                    load_learner(path, &spec, &class_names, &tok, &params)?.class_rows(&params)?
                }
                None => {
                    let bank = prompt_bank(bank.as_deref(), data.as_deref(), &class_names, &config)?;
                    embed_prompt_bank(&params, &tok, &bank.truncated(config.n_prompts), &class_names)?
                }
            };
            let img = read_pnm(&image)?;
            let method = match method {
                Method::Gradient => SaliencyMethod::Gradient,
                Method::Ig => SaliencyMethod::default(),
            };
            let zcfg = config.zcfg(config.switches);
            let heat = saliency_with(&params, &img, &rows, class, config.weights.tau, zcfg, method)?;
            let (h, w) = (img.height(), img.width());
            write_file(&out, &encode_pgm(w, h, &heat.upsample(h, w))?)
        }
    }
}
