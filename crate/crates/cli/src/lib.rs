//! The `poly` command line. Every subcommand parses its flags, resolves
//! them against an optional JSON config file and hands off to the library.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use poly_core::corpus::{load_rolls, preprocess, Corpus};
use poly_core::generate::{conditioned_generate, interpolate, sample, sample_latents, Decoding, GenerateOptions, Generated};
use poly_core::midi::{from_pianoroll, write_smf, TrackMap};
use poly_core::model::{ChordVae, ModelConfig};
use poly_core::pca::{embedding_pca, major_triad_embeddings, pitch_embeddings, TRIAD_ROOTS};
use poly_core::pianoroll::{BASS, DRUMS, GUITAR_PIANO, STRINGS};
use poly_core::training::{split_dataset, FitOutputs, Trainer, TrainingConfig};
use poly_core::{metrics, StructureTensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Tempo written into exported MIDI files.
pub const EXPORT_BPM: f64 = 120.0;

#[derive(Debug, Parser)]
#[command(name = "poly", version, about = "Multitrack music as chord graphs: preprocess, train, generate, analyse")]
pub struct Cli {
    /// JSON config file with optional "model", "training", "seed",
    /// "threshold", "sampling", "bars" and "port" entries; flags win over it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of MIDI files into a binary corpus
    Preprocess(PreprocessArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Sample sequences from a trained model
    Generate(GenerateArgs),
    /// Decode a straight line between two latent codes
    Interpolate(InterpolateArgs),
    /// Regenerate content for a hand-edited structure
    Condition(ConditionArgs),
    /// Compute EB, UPC and DP over a set of pianorolls
    Metrics(MetricsArgs),
    /// Project chord or pitch embeddings onto their principal components
    Pca(PcaArgs),
    /// Run the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory searched recursively for .mid/.midi files
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Corpus file to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Bars per sequence [default: 2]
    #[arg(long, value_parser = ["2", "16"])]
    pub bars: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus file written by `preprocess`
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Directory for checkpoints and history.csv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of starting fresh
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Total number of updates [default: 100000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Seed for initialisation, batching and noise [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Output directory for .mid, .json and .structure files
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of sequences
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Seed of the latent code stream [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability above which a structure cell is active [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed of the first code [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the last code [default: seed + 1]
    #[arg(long)]
    pub seed_b: Option<u64>,
    /// Number of decoded points, endpoints included
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub steps: u64,
    /// Probability above which a structure cell is active [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Edited structure: nested [bar][track][step] array of 0/1
    #[arg(long, value_name = "FILE")]
    pub structure: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed of the latent code stream, as given to `generate` [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Which code of that stream to use (the number in sample_NNN)
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Directory of pianoroll JSON files, one JSON file, or a corpus file
    #[arg(long, visible_alias = "in", value_name = "PATH")]
    pub corpus: PathBuf,
    /// Also write the JSON report here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Print an aligned table instead of JSON
    #[arg(long, default_value_t = false)]
    pub table: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PcaMode {
    /// Major triads on every root from C1 to B8
    Triads,
    /// Rows of the non-drum pitch embedding table
    Pitches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackArg {
    Drums,
    Bass,
    Guitar,
    Strings,
}

impl TrackArg {
    fn index(self) -> usize {
        match self {
            TrackArg::Drums => DRUMS,
            TrackArg::Bass => BASS,
            TrackArg::Guitar => GUITAR_PIANO,
            TrackArg::Strings => STRINGS,
        }
    }
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Model checkpoint
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// CSV file to write (label, c1..ck)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// What to embed
    #[arg(long, value_enum, default_value_t = PcaMode::Triads)]
    pub mode: PcaMode,
    /// Track whose chord encoder embeds the triads
    #[arg(long, value_enum, default_value_t = TrackArg::Guitar)]
    pub track: TrackArg,
    /// Number of principal components
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub components: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model checkpoint; without one, generation endpoints answer 503
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// TCP port [default: 8080]
    #[arg(long)]
    pub port: Option<u16>,
    /// Probability above which a structure cell is active [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Failure of one invocation: bad flags (exit 1) or bad data (exit 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Data { code: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data { code, .. } => code,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data { message: m, .. } => write!(f, "ERROR:{}: {m}", self.code()),
        }
    }
}

fn data<E: fmt::Display>(code: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data { code, message: e.to_string() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data { code: "io", message: format!("{}: {e}", path.display()) }
}

/// Contents of `--config`. Unknown keys are rejected so typos surface.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Partial `ModelConfig`.
    pub model: Map<String, Value>,
    /// Partial `TrainingConfig`.
    pub training: Map<String, Value>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    /// Draw notes from their distributions instead of taking the argmax.
    pub sampling: bool,
    pub bars: Option<usize>,
    pub port: Option<u16>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data { code: "config", message: format!("{}: {e}", path.display()) })
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    fn options(&self, threshold: Option<f64>, seed: u64) -> Result<GenerateOptions, CliError> {
        let threshold = threshold.or(self.threshold).unwrap_or(0.5);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CliError::Usage(format!("threshold must be in [0, 1], got {threshold}")));
        }
        let decoding = if self.sampling { Decoding::Sample { seed } } else { Decoding::Argmax };
        Ok(GenerateOptions { threshold, decoding })
    }

    /// Model settings for sequences of `n_bars` bars with `sigma` slots.
    pub fn model_config(&self, n_bars: usize, sigma: usize) -> Result<ModelConfig, CliError> {
        let config: ModelConfig = overlay(&ModelConfig { n_bars, sigma, ..ModelConfig::default() }, &self.model)?;
        if config.n_bars != n_bars || config.sigma != sigma {
            return Err(CliError::Data {
                code: "config",
                message: format!("config asks for {} bars and sigma {}, the corpus has {n_bars} and {sigma}", config.n_bars, config.sigma),
            });
        }
        config.validate().map_err(data("config"))?;
        Ok(config)
    }

    pub fn training_config(&self, n_bars: usize) -> Result<TrainingConfig, CliError> {
        overlay(&TrainingConfig::for_bars(n_bars), &self.training)
    }
}

/// `base` with the keys of `over` replaced.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: &Map<String, Value>) -> Result<T, CliError> {
    let mut value = serde_json::to_value(base).map_err(data("config"))?;
    if let Value::Object(map) = &mut value {
        for (k, v) in over {
            if !map.contains_key(k) {
                return Err(CliError::Data { code: "config", message: format!("unknown setting `{k}`") });
            }
            map.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(data("config"))
}

fn load_model(path: &Path) -> Result<ChordVae<f64>, CliError> {
    let checkpoint = poly_core::tensor::Checkpoint::load(path).map_err(|e| CliError::Data { code: "checkpoint", message: format!("{}: {e}", path.display()) })?;
    ChordVae::from_checkpoint(&checkpoint).map_err(|e| CliError::Data { code: "checkpoint", message: format!("{}: {e}", path.display()) })
}

/// Writes `<stem>.mid`, `<stem>.json` and, for decoded structures,
/// `<stem>.structure`.
fn write_generated(dir: &Path, stem: &str, g: &Generated<f64>, with_structure: bool) -> Result<(), CliError> {
    let mid = dir.join(format!("{stem}.mid"));
    fs::write(&mid, write_smf(&from_pianoroll(&g.pianoroll, EXPORT_BPM))).map_err(io_err(&mid))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, g.pianoroll.to_json()).map_err(io_err(&json))?;
    if with_structure {
        let path = dir.join(format!("{stem}.structure"));
        let text = serde_json::to_string(&g.structure).map_err(data("io"))?;
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    if g.empty_structure {
        log::warn!("{stem}: structure has no active cells, the sequence is silent");
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn cmd_preprocess(cfg: &FileConfig, a: &PreprocessArgs) -> Result<(), CliError> {
    let bars = match &a.bars {
        Some(b) => b.parse().expect("restricted by the parser"),
        None => cfg.bars.unwrap_or(2),
    };
    if !a.input.is_dir() {
        return Err(CliError::Data { code: "io", message: format!("{} is not a directory", a.input.display()) });
    }
    let sigma = cfg.model.get("sigma").and_then(Value::as_u64).map_or(poly_core::graph::DEFAULT_SIGMA, |s| s as usize);
    // Fail on a bad config now rather than after a long preprocessing run.
    cfg.model_config(bars, sigma)?;
    let (corpus, summary) = preprocess(&a.input, bars, sigma, &TrackMap::default()).map_err(data("corpus"))?;
    if corpus.is_empty() {
        return Err(CliError::Data { code: "corpus", message: format!("no usable sequences under {}", a.input.display()) });
    }
    corpus.write(&a.out).map_err(data("io"))?;
    println!(
        "{} sequences of {bars} bars from {} of {} files ({} skipped) written to {}",
        summary.sequences,
        summary.files_used,
        summary.files_seen,
        summary.files_skipped,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &FileConfig, a: &TrainArgs) -> Result<(), CliError> {
    let corpus = Corpus::read(&a.input).map_err(data("corpus"))?;
    let (Some(n_bars), Some(sigma)) = (corpus.n_bars(), corpus.sigma()) else {
        return Err(CliError::Data { code: "corpus", message: format!("{} holds no sequences", a.input.display()) });
    };
    let mut trainer = match &a.ckpt {
        Some(path) => {
            let t = Trainer::<f64>::load(path).map_err(|e| CliError::Data { code: "checkpoint", message: format!("{}: {e}", path.display()) })?;
            let m = t.model.config();
            if m.n_bars != n_bars || m.sigma != sigma {
                return Err(CliError::Data {
                    code: "checkpoint",
                    message: format!("checkpoint expects {} bars and sigma {}, the corpus has {n_bars} and {sigma}", m.n_bars, m.sigma),
                });
            }
            t
        }
        None => {
            let mut tc = cfg.training_config(n_bars)?;
            tc.seed = a.seed.or(cfg.seed).unwrap_or(tc.seed);
            let model = ChordVae::new(cfg.model_config(n_bars, sigma)?, tc.seed).map_err(data("config"))?;
            Trainer::new(model, tc)
        }
    };
    if let Some(steps) = a.steps {
        trainer.config.max_updates = steps;
    }
    let (train, valid, _test) = split_dataset(&corpus.graphs, trainer.config.seed);
    if train.is_empty() {
        return Err(CliError::Data { code: "corpus", message: "corpus too small to split".into() });
    }
    create_dir(&a.out)?;
    let outputs = FitOutputs { checkpoint_dir: Some(a.out.clone()), history_csv: Some(a.out.join("history.csv")) };
    let report = trainer.fit(&train, &valid, &outputs).map_err(data("train"))?;
    let last = report.checkpoints.last().cloned().unwrap_or_default();
    match report.final_train {
        Some(l) => println!("{} updates (step {}), final loss {:.4}; checkpoint {}", report.updates, trainer.step(), l.total, last.display()),
        None => println!("nothing to do at step {}; checkpoint {}", trainer.step(), last.display()),
    }
    Ok(())
}

fn cmd_generate(cfg: &FileConfig, a: &GenerateArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let seed = cfg.seed(a.seed);
    let opts = cfg.options(a.threshold, seed)?;
    let out = sample(&model, a.n, seed, &opts).map_err(data("model"))?;
    create_dir(&a.out)?;
    for (i, g) in out.iter().enumerate() {
        write_generated(&a.out, &format!("sample_{i:03}"), g, true)?;
    }
    println!("{} sequences written to {}", out.len(), a.out.display());
    Ok(())
}

fn cmd_interpolate(cfg: &FileConfig, a: &InterpolateArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let seed_a = cfg.seed(a.seed);
    let seed_b = a.seed_b.unwrap_or(seed_a.wrapping_add(1));
    let opts = cfg.options(a.threshold, seed_a)?;
    let za = poly_core::generate::latent_for_seed(model.d(), seed_a);
    let zb = poly_core::generate::latent_for_seed(model.d(), seed_b);
    let path = interpolate(&model, &za, &zb, a.steps as usize, &opts).map_err(data("model"))?;
    create_dir(&a.out)?;
    for (i, g) in path.iter().enumerate() {
        write_generated(&a.out, &format!("interp_{i:03}"), g, true)?;
    }
    println!("{} sequences from seed {seed_a} to seed {seed_b} written to {}", path.len(), a.out.display());
    Ok(())
}

fn cmd_condition(cfg: &FileConfig, a: &ConditionArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let text = fs::read_to_string(&a.structure).map_err(io_err(&a.structure))?;
    let structure: StructureTensor =
        serde_json::from_str(&text).map_err(|e| CliError::Data { code: "structure", message: format!("{}: {e}", a.structure.display()) })?;
    let n_bars = model.config().n_bars;
    if structure.n_bars() != n_bars {
        return Err(CliError::Data { code: "structure", message: format!("structure has {} bars, the model expects {n_bars}", structure.n_bars()) });
    }
    let seed = cfg.seed(a.seed);
    let opts = cfg.options(None, seed)?;
    let z = sample_latents::<f64>(model.d(), a.index + 1, seed).pop().expect("at least one code");
    let g = conditioned_generate(&model, &z, &structure, &opts).map_err(data("model"))?;
    create_dir(&a.out)?;
    write_generated(&a.out, "conditioned", &g, false)?;
    println!("{} onsets written to {}", g.pianoroll.onsets().len(), a.out.display());
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    let rolls = load_rolls(&a.corpus).map_err(data("corpus"))?;
    let report = metrics::report(&rolls).map_err(data("metrics"))?;
    let json = report.to_json();
    if let Some(out) = &a.out {
        fs::write(out, &json).map_err(io_err(out))?;
    }
    if a.table {
        print!("{}", report.to_table());
    } else {
        println!("{json}");
    }
    Ok(())
}

fn cmd_pca(a: &PcaArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let (labels, rows) = match a.mode {
        PcaMode::Triads => {
            let roots: Vec<usize> = TRIAD_ROOTS.collect();
            major_triad_embeddings(&model, &roots, a.track.index()).map_err(data("model"))?
        }
        PcaMode::Pitches => pitch_embeddings(&model),
    };
    let projection = embedding_pca(labels, &rows, a.components as usize).map_err(data("pca"))?;
    if projection.degenerate {
        log::warn!("embeddings span fewer than {} dimensions; trailing components are arbitrary", a.components);
    }
    fs::write(&a.out, projection.to_csv()).map_err(io_err(&a.out))?;
    let ratios: Vec<String> = projection.explained_variance_ratio.iter().map(|r| format!("{r:.4}")).collect();
    println!("{} points, explained variance ratio [{}], written to {}", rows.len(), ratios.join(", "), a.out.display());
    Ok(())
}

fn cmd_serve(cfg: &FileConfig, a: &ServeArgs) -> Result<(), CliError> {
    let opts = cfg.options(a.threshold, cfg.seed(None))?;
    let state = match &a.ckpt {
        Some(path) => poly_service::AppState::new(load_model(path)?, Some(path.clone())).with_options(opts),
        None => {
            log::warn!("no checkpoint given; generation endpoints will answer 503");
            poly_service::AppState::without_model()
        }
    };
    let port = a.port.or(cfg.port).unwrap_or(poly_service::DEFAULT_PORT);
    let runtime = tokio::runtime::Runtime::new().map_err(data("serve"))?;
    runtime.block_on(poly_service::serve(Arc::new(state), port)).map_err(data("serve"))
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let message = rendered.trim_start_matches("error: ").trim_end();
            eprintln!("{}", CliError::Usage(message.to_string()));
            return 1;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("POLY_LOG", "info")).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Generate(a) => cmd_generate(&cfg, a),
        Command::Interpolate(a) => cmd_interpolate(&cfg, a),
        Command::Condition(a) => cmd_condition(&cfg, a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pca(a) => cmd_pca(a),
        Command::Serve(a) => cmd_serve(&cfg, a),
    }
}
