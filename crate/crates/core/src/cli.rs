//! The `pal` command-line tool.
//!
//! Exit codes: 0 success, 2 usage / input problems, 3 numeric abort,
//! 4 verification failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{
    anchor_overlap, classify_eval, dense_eval, export_heatmaps, metrics_csv, retrieval_eval, MetricRow,
    SimilarityMatrix,
};
use crate::grad::Fault;
use crate::gradcheck::{run_gradcheck_with_fault, GradcheckConfig};
use crate::io::{
    labels_to_set, read_corpus, read_labels, read_pairs, write_corpus, write_labels, write_pairs, Modality,
    PairedDataset, TokenSequence, BACKGROUND,
};
use crate::relrep::{encode_all, pool_all};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::trainer::{init_anchors, parse_kv, InitPolicy, TrainConfig, TrainState, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pal", version, about = "Align two frozen token-embedding spaces with learned anchors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run directory; every output goes here.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cap on worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// key=value file; explicit flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Directory written by `pal synth`; selects `<split>_*` files inside it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub vision: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub vision_labels: Option<PathBuf>,
    #[arg(long)]
    pub language_labels: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus with concept ground truth.
    Synth(SynthArgs),
    /// Train both anchor sets.
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Retrieval, classification or dense-labeling metrics.
    Eval(EvalArgs),
    /// Top-k anchor overlap of matched vs mismatched pairs.
    Analyze(AnalyzeArgs),
    /// Export per-anchor attention heatmaps.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub vision_dim: Option<usize>,
    #[arg(long)]
    pub language_dim: Option<usize>,
    #[arg(long)]
    pub tokens_min: Option<usize>,
    #[arg(long)]
    pub tokens_max: Option<usize>,
    #[arg(long)]
    pub concepts_min: Option<usize>,
    #[arg(long)]
    pub concepts_max: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub token_scale_spread: Option<f64>,
    #[arg(long)]
    pub background_rate: Option<f64>,
    /// Patch grid for the vision side, e.g. `4x4`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub tau_p: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// `data_tokens` or `gaussian`.
    #[arg(long)]
    pub init: Option<String>,
    /// `cap`, `mean` or `global`.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub shuffle: Option<bool>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    #[arg(long)]
    pub max_anchors: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub max_dim: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, hide = true)]
    pub break_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Retrieval,
    Classify,
    Dense,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,5,10")]
    pub ks: String,
    /// Language-side corpus with one prompt sequence per class.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// One class index per line, per vision sample (classification).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub fg_threshold: Option<f64>,
    #[arg(long)]
    pub dataset_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k_top: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated pair indices.
    #[arg(long)]
    pub samples: String,
    /// Comma-separated anchor ids.
    #[arg(long)]
    pub anchors: String,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: e.exit_code(), message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let common = cli.command.common().clone();
    let level = if common.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(common.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Analyze(a) => &a.common,
            Command::Heatmap(a) => &a.common,
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

/// Flag > config file > default.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self { file })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::usage(format!("config file: invalid value `{raw}` for `{key}`"))),
            None => Ok(default),
        }
    }
}

/// Resolved settings, input digests and timing for one invocation.
struct RunManifest {
    command: &'static str,
    started: u64,
    entries: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        Self { command, started: unix_now(), entries: Vec::new(), inputs: Vec::new() }
    }

    fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.push((name.to_string(), format!("{} sha256:{hex}", path.display())));
        Ok(())
    }

    fn write(&self, out: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "tool=pal");
        let _ = writeln!(text, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "command={}", self.command);
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        for (k, v) in &self.inputs {
            let _ = writeln!(text, "input.{k}={v}");
        }
        let _ = writeln!(text, "started_unix={}", self.started);
        let _ = writeln!(text, "finished_unix={}", unix_now());
        let path = out.join("manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::usage(format!("invalid {what} `{p}`"))))
        .collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::usage(format!("grid `{s}` must look like RxC")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::usage(format!("invalid grid `{s}`")));
    Ok((parse(r)?, parse(c)?))
}

/// Paths of the files making up one split of a synthetic run directory.
pub struct SplitFiles {
    pub vision: PathBuf,
    pub language: PathBuf,
    pub pairs: PathBuf,
    pub vision_labels: PathBuf,
    pub language_labels: PathBuf,
}

impl SplitFiles {
    pub fn new(dir: &Path, split: &str) -> Self {
        Self {
            vision: dir.join(format!("{split}_vision.palt")),
            language: dir.join(format!("{split}_language.palt")),
            pairs: dir.join(format!("{split}_pairs.tsv")),
            vision_labels: dir.join(format!("{split}_vision.labels")),
            language_labels: dir.join(format!("{split}_language.labels")),
        }
    }
}

/// Name of the concept-prompt corpus written by `pal synth`.
pub const PROMPTS_FILE: &str = "prompts_language.palt";

fn write_split(dir: &Path, split: &str, ds: &PairedDataset) -> Result<()> {
    let f = SplitFiles::new(dir, split);
    write_corpus(&f.vision, Modality::Vision, &ds.vision)?;
    write_corpus(&f.language, Modality::Language, &ds.language)?;
    write_pairs(&f.pairs, &ds.pairs)?;
    if let (Some(vl), Some(ll)) = (&ds.vision_labels, &ds.language_labels) {
        write_labels(&f.vision_labels, &labels_to_set(Modality::Vision, &ds.vision, vl))?;
        write_labels(&f.language_labels, &labels_to_set(Modality::Language, &ds.language, ll))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let d = SyntheticSpec::default();
    let grid = match a.grid.as_deref().map(str::to_owned).or_else(|| s.file.get("grid").cloned()) {
        Some(g) => Some(parse_grid(&g)?),
        None => d.vision_grid,
    };
    let spec = SyntheticSpec {
        num_concepts: s.get(a.concepts, "concepts", d.num_concepts)?,
        latent_dim: s.get(a.latent_dim, "latent_dim", d.latent_dim)?,
        vision_dim: s.get(a.vision_dim, "vision_dim", d.vision_dim)?,
        language_dim: s.get(a.language_dim, "language_dim", d.language_dim)?,
        tokens_per_sample: (
            s.get(a.tokens_min, "tokens_min", d.tokens_per_sample.0)?,
            s.get(a.tokens_max, "tokens_max", d.tokens_per_sample.1)?,
        ),
        concepts_per_sample: (
            s.get(a.concepts_min, "concepts_min", d.concepts_per_sample.0)?,
            s.get(a.concepts_max, "concepts_max", d.concepts_per_sample.1)?,
        ),
        noise_sigma: s.get(a.noise, "noise", d.noise_sigma)?,
        instance_jitter: s.get(a.jitter, "jitter", d.instance_jitter)?,
        token_scale_spread: s.get(a.token_scale_spread, "token_scale_spread", d.token_scale_spread)?,
        background_rate: s.get(a.background_rate, "background_rate", d.background_rate)?,
        vision_grid: grid,
        num_train: s.get(a.train, "train", d.num_train)?,
        num_test: s.get(a.test, "test", d.num_test)?,
        seed: s.get(a.common.seed, "seed", d.seed)?,
    };
    let data = generate_synthetic(&spec)?;
    let out = &a.common.out;
    prepare_out(out)?;
    write_split(out, "train", &data.train)?;
    write_split(out, "test", &data.test)?;
    write_corpus(out.join(PROMPTS_FILE), Modality::Language, &data.concept_prompts())?;

    let mut m = RunManifest::new("synth");
    m.set("concepts", spec.num_concepts);
    m.set("latent_dim", spec.latent_dim);
    m.set("vision_dim", spec.vision_dim);
    m.set("language_dim", spec.language_dim);
    m.set("tokens_min", spec.tokens_per_sample.0);
    m.set("tokens_max", spec.tokens_per_sample.1);
    m.set("concepts_min", spec.concepts_per_sample.0);
    m.set("concepts_max", spec.concepts_per_sample.1);
    m.set("noise", format!("{:?}", spec.noise_sigma));
    m.set("jitter", format!("{:?}", spec.instance_jitter));
    m.set("token_scale_spread", format!("{:?}", spec.token_scale_spread));
    m.set("background_rate", format!("{:?}", spec.background_rate));
    m.set("grid", spec.vision_grid.map(|(r, c)| format!("{r}x{c}")).unwrap_or_else(|| "none".into()));
    m.set("train", spec.num_train);
    m.set("test", spec.num_test);
    m.set("seed", spec.seed);
    m.write(out)?;
    println!("wrote {} train / {} test pairs to {}", spec.num_train, spec.num_test, out.display());
    Ok(())
}

struct DataPaths {
    vision: PathBuf,
    language: PathBuf,
    pairs: PathBuf,
    vision_labels: Option<PathBuf>,
    language_labels: Option<PathBuf>,
}

fn resolve_data(d: &DataArgs) -> Result<DataPaths> {
    let split = d.data.as_ref().map(|dir| SplitFiles::new(dir, &d.split));
    let pick = |explicit: &Option<PathBuf>, derived: Option<PathBuf>, name: &str| -> Result<PathBuf> {
        explicit
            .clone()
            .or(derived)
            .ok_or_else(|| Error::usage(format!("no {name} file given (use --data or --{name})")))
    };
    let vision = pick(&d.vision, split.as_ref().map(|s| s.vision.clone()), "vision")?;
    let language = pick(&d.language, split.as_ref().map(|s| s.language.clone()), "language")?;
    let pairs = pick(&d.pairs, split.as_ref().map(|s| s.pairs.clone()), "pairs")?;
    let optional = |explicit: &Option<PathBuf>, derived: Option<PathBuf>| {
        explicit.clone().or(derived.filter(|p| p.exists()))
    };
    let vision_labels = optional(&d.vision_labels, split.as_ref().map(|s| s.vision_labels.clone()));
    let language_labels = optional(&d.language_labels, split.as_ref().map(|s| s.language_labels.clone()));
    Ok(DataPaths { vision, language, pairs, vision_labels, language_labels })
}

fn load_data(d: &DataArgs, manifest: &mut RunManifest) -> Result<PairedDataset> {
    let DataPaths { vision, language, pairs, vision_labels: vl, language_labels: ll } = resolve_data(d)?;
    manifest.input("vision", &vision)?;
    manifest.input("language", &language)?;
    manifest.input("pairs", &pairs)?;
    let v = read_corpus(&vision)?;
    let l = read_corpus(&language)?;
    let p = read_pairs(&pairs)?;
    let mut ds = PairedDataset::new(v.sequences, l.sequences, p)?;
    if let (Some(vl), Some(ll)) = (vl, ll) {
        manifest.input("vision_labels", &vl)?;
        manifest.input("language_labels", &ll)?;
        let vs = read_labels(&vl)?;
        let ls = read_labels(&ll)?;
        ds = ds.with_labels(
            vs.samples.into_iter().map(|s| s.labels).collect(),
            ls.samples.into_iter().map(|s| s.labels).collect(),
        )?;
    }
    Ok(ds)
}

fn train_config(a: &TrainArgs, s: &Settings, base: TrainConfig) -> Result<TrainConfig> {
    let init = match a.init.clone().or_else(|| s.file.get("init_policy").cloned()) {
        Some(v) => InitPolicy::parse(&v)?,
        None => base.init_policy,
    };
    let pooling = match a.pooling.clone().or_else(|| s.file.get("pooling").cloned()) {
        Some(v) => crate::relrep::Pooling::parse(&v)?,
        None => base.pooling,
    };
    Ok(TrainConfig {
        anchors: s.get(a.anchors, "anchors", base.anchors)?,
        tau_p: s.get(a.tau_p, "tau_p", base.tau_p)?,
        tau: s.get(a.tau, "tau", base.tau)?,
        batch_size: s.get(a.batch_size, "batch_size", base.batch_size)?,
        epochs: s.get(a.epochs, "epochs", base.epochs)?,
        learning_rate: s.get(a.lr, "learning_rate", base.learning_rate)?,
        beta1: s.get(a.beta1, "beta1", base.beta1)?,
        beta2: s.get(a.beta2, "beta2", base.beta2)?,
        eps: s.get(a.eps, "eps", base.eps)?,
        seed: s.get(a.common.seed, "seed", base.seed)?,
        init_policy: init,
        shuffle: s.get(a.shuffle, "shuffle", base.shuffle)?,
        pooling,
    })
}

/// File names inside a training run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.palc";
pub const LAST_GOOD_FILE: &str = "last_good.palc";
pub const LOSS_FILE: &str = "loss.csv";

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::new("train");
    let ds = load_data(&a.data, &mut m)?;
    let resumed = match &a.resume {
        Some(p) => {
            m.input("resume", p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let base = resumed.as_ref().map(|st| st.config.clone()).unwrap_or_default();
    let config = train_config(&a, &s, base)?;
    config.validate()?;
    let trainer = Trainer::new(&ds, &config)?;
    let mut state = match resumed {
        Some(mut st) => {
            st.config = config.clone();
            st
        }
        None => {
            let (av, al) = init_anchors(&ds, &config)?;
            TrainState::new(config.clone(), av, al)
        }
    };
    let out = &a.common.out;
    prepare_out(out)?;
    for (k, v) in config.entries() {
        m.set(k, v);
    }

    let target = a.max_steps.unwrap_or(u64::MAX).min(trainer.total_steps(&config));
    let mut csv = String::from("epoch,step,loss\n");
    let mut epoch_means = Vec::new();
    let result = trainer.run_until(
        &mut state,
        target,
        |r| {
            let _ = writeln!(csv, "{},{},{:?}", r.epoch, r.step, r.loss);
        },
        |e, mean| epoch_means.push((e, mean)),
    );
    write_file(&out.join(LOSS_FILE), &csv)?;
    if let Err(e) = result {
        let path = out.join(LAST_GOOD_FILE);
        save_checkpoint(&state, &path)?;
        m.set("status", "numeric_abort");
        m.write(out)?;
        eprintln!("last good checkpoint: {}", path.display());
        return Err(e.into());
    }
    save_checkpoint(&state, out.join(CHECKPOINT_FILE))?;
    m.set("status", "ok");
    m.set("steps", state.step);
    m.write(out)?;
    match (epoch_means.first(), epoch_means.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps; epoch {} mean loss {:.6}, epoch {} mean loss {:.6}",
            state.step, first.0, first.1, last.0, last.1
        ),
        _ => println!("trained {} steps", state.step),
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        instances: s.get(a.instances, "instances", d.instances)?,
        max_batch: s.get(a.max_batch, "max_batch", d.max_batch)?,
        max_anchors: s.get(a.max_anchors, "max_anchors", d.max_anchors)?,
        max_tokens: s.get(a.max_tokens, "max_tokens", d.max_tokens)?,
        max_dim: s.get(a.max_dim, "max_dim", d.max_dim)?,
        step: s.get(a.step, "step", d.step)?,
        tolerance: s.get(a.tolerance, "tolerance", d.tolerance)?,
        seed: s.get(a.common.seed, "seed", d.seed)?,
        ..d
    };
    let fault = if a.break_gradient { Fault::DropDirectTerm } else { Fault::None };
    let report = run_gradcheck_with_fault(&cfg, fault)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let mut csv = String::from("instance,batch,anchors,max_tokens,vision_dim,language_dim,tau_p,tau,loss,max_rel_error,pass\n");
    for i in &report.instances {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{:?},{:?},{:?},{:?},{}",
            i.index,
            i.batch,
            i.anchors,
            i.max_tokens,
            i.vision_dim,
            i.language_dim,
            i.tau_p,
            i.tau,
            i.loss,
            i.max_rel_error,
            u8::from(i.max_rel_error < report.tolerance)
        );
    }
    write_file(&out.join("gradcheck.csv"), csv)?;
    let mut m = RunManifest::new("gradcheck");
    m.set("instances", cfg.instances);
    m.set("step", format!("{:?}", cfg.step));
    m.set("tolerance", format!("{:?}", cfg.tolerance));
    m.set("seed", cfg.seed);
    m.set("passed", report.passed());
    m.write(out)?;

    let worst = report.worst();
    if report.passed() {
        println!(
            "gradcheck passed: {} instances, worst relative error {:.3e} (instance {})",
            report.instances.len(),
            worst.max_rel_error,
            worst.index
        );
        Ok(())
    } else {
        let failed = report.instances.iter().filter(|i| i.max_rel_error >= report.tolerance).count();
        Err(CliError {
            code: EXIT_VERIFY,
            message: format!(
                "gradcheck failed on {failed}/{} instances; worst is instance {} (B={}, K={}, D_v={}, D_l={}) with relative error {:.3e}",
                report.instances.len(),
                worst.index,
                worst.batch,
                worst.anchors,
                worst.vision_dim,
                worst.language_dim,
                worst.max_rel_error
            ),
        })
    }
}

fn load_prompts(path: Option<&Path>, data: &DataArgs, m: &mut RunManifest) -> Result<Vec<TokenSequence>> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| data.data.as_ref().map(|d| d.join(PROMPTS_FILE)))
        .ok_or_else(|| Error::usage("class prompts required (--prompts)"))?;
    m.input("prompts", &path)?;
    Ok(read_corpus(&path)?.sequences)
}

/// Retrieval metrics for a checkpoint over a dataset, as the CLI computes them.
pub fn retrieval_rows(state: &TrainState, ds: &PairedDataset, ks: &[usize], name: &str) -> Result<Vec<MetricRow>> {
    let c = &state.config;
    let hv = encode_all(&ds.vision, &state.anchors_v, c.tau_p, c.pooling)?;
    let hl = encode_all(&ds.language, &state.anchors_l, c.tau_p, c.pooling)?;
    let sim = SimilarityMatrix::from_pooled(
        &hv,
        (0..hv.len() as u32).collect(),
        &hl,
        (0..hl.len() as u32).collect(),
    )?;
    let pairs: Vec<(u32, u32)> = ds.pairs.iter().map(|&(a, b)| (a as u32, b as u32)).collect();
    Ok(retrieval_eval(&sim, &pairs, ks)?.metric_rows(name))
}

fn single_concept_labels(ds: &PairedDataset) -> Result<Vec<usize>> {
    let labels = ds
        .vision_labels
        .as_ref()
        .ok_or_else(|| Error::usage("classification needs --labels or a vision label sidecar"))?;
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut fg: Vec<i32> = l.iter().copied().filter(|&c| c != BACKGROUND).collect();
            fg.sort_unstable();
            fg.dedup();
            match fg.as_slice() {
                [c] => Ok(*c as usize),
                _ => Err(Error::usage(format!("vision sample {i} does not carry exactly one concept"))),
            }
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut m = RunManifest::new("eval");
    m.input("checkpoint", &a.checkpoint)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data, &mut m)?;
    let name = a.dataset_name.clone().unwrap_or_else(|| a.data.split.clone());
    let c = &state.config;
    let rows = match a.task {
        Task::Retrieval => {
            let ks = parse_list::<usize>(&a.ks, "k")?;
            retrieval_rows(&state, &ds, &ks, &name)?
        }
        Task::Classify => {
            let prompts = load_prompts(a.prompts.as_deref(), &a.data, &mut m)?;
            let labels = match &a.labels {
                Some(p) => {
                    m.input("labels", p)?;
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    parse_list::<usize>(&text.replace('\n', ","), "label")?
                }
                None => single_concept_labels(&ds)?,
            };
            let class_h = encode_all(&prompts, &state.anchors_l, c.tau_p, c.pooling)?;
            let image_h = encode_all(&ds.vision, &state.anchors_v, c.tau_p, c.pooling)?;
            let r = classify_eval(&image_h, &class_h, &labels)?;
            vec![MetricRow { metric: "top1_accuracy".into(), dataset: name, direction: "i2c".into(), k: Some(1), value: r.accuracy }]
        }
        Task::Dense => {
            if let Some(bad) = ds.vision.iter().find(|s| s.grid().is_none()) {
                return Err(Error::usage(format!("dense evaluation needs patch grids; sample {} has none", bad.sample_id())).into());
            }
            let gt = ds
                .vision_labels
                .clone()
                .ok_or_else(|| Error::usage("dense evaluation needs a vision label sidecar"))?;
            let prompts = load_prompts(a.prompts.as_deref(), &a.data, &mut m)?;
            let class_h = encode_all(&prompts, &state.anchors_l, c.tau_p, c.pooling)?;
            let r = dense_eval(&ds.vision, &gt, &state.anchors_v, &class_h, a.fg_threshold)?;
            vec![MetricRow { metric: "miou_fg".into(), dataset: name, direction: "dense".into(), k: None, value: r.miou_fg }]
        }
    };
    let out = &a.common.out;
    prepare_out(out)?;
    write_file(&out.join("metrics.csv"), metrics_csv(&rows))?;
    m.set("task", format!("{:?}", a.task).to_lowercase());
    m.write(out)?;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| match r.k {
            Some(k) => format!("{}@{} {} {:.4}", r.metric, k, r.direction, r.value),
            None => format!("{} {:.4}", r.metric, r.value),
        })
        .collect();
    println!("{}", summary.join("; "));
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult<()> {
    let s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::new("analyze");
    m.input("checkpoint", &a.checkpoint)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data, &mut m)?;
    let seed = s.get(a.common.seed, "seed", 0)?;
    let c = &state.config;
    let pv = pool_all(&ds.vision, &state.anchors_v, c.tau_p, c.pooling)?;
    let pl = pool_all(&ds.language, &state.anchors_l, c.tau_p, c.pooling)?;
    let report = anchor_overlap(&pv, &pl, &ds.pairs, a.k_top, seed)?;
    let out = &a.common.out;
    prepare_out(out)?;
    write_file(&out.join("overlap.txt"), report.to_kv())?;
    m.set("k_top", a.k_top);
    m.set("seed", seed);
    m.write(out)?;
    println!(
        "hard overlap matched {:.4} / mismatched {:.4}; dice matched {:.4} / mismatched {:.4}",
        report.mean_hard_overlap_matched,
        report.mean_hard_overlap_mismatched,
        report.mean_dice_matched,
        report.mean_dice_mismatched
    );
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult<()> {
    let mut m = RunManifest::new("heatmap");
    m.input("checkpoint", &a.checkpoint)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data, &mut m)?;
    let samples = parse_list::<usize>(&a.samples, "sample index")?;
    let anchors = parse_list::<usize>(&a.anchors, "anchor id")?;
    let out = &a.common.out;
    prepare_out(out)?;
    let mut written = 0;
    for &i in &samples {
        if i >= ds.len() {
            return Err(Error::usage(format!("pair index {i} out of range ({} pairs)", ds.len())).into());
        }
        let (v, l) = ds.pair(i);
        written += export_heatmaps(v, &state.anchors_v, l, &state.anchors_l, &anchors, state.config.tau_p, out)?.len();
    }
    m.set("samples", &a.samples);
    m.set("anchors", &a.anchors);
    m.write(out)?;
    println!("wrote {written} heatmap files to {}", out.display());
    Ok(())
}
