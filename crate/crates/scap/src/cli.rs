//! `scap` command line.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 input/output
//! or data-format error, 3 numeric failure inside the engine.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use scap_core::inference::CombineMode;
use scap_core::pipeline::{run_stream, RetentionState, StreamReport};
use scap_core::synthetic::{generate_synthetic, SyntheticSpec};
use scap_core::{ClassCatalog, EncoderMode, Engine, ImageSample, RunConfig, RunMetrics};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::exec::Rayon;
use crate::manifest::Manifest;
use crate::results::{read_results, write_results, ResultsRecord};

#[derive(Debug, Parser)]
#[command(name = "scap", version, about = "Supportive-clique attribute prompting for test-time adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adapt over a stream of batches and report accuracy.
    Run(RunArgs),
    /// Write a synthetic benchmark as feature file, text features and manifest.
    GenSynth(GenArgs),
    /// Score a results file against manifest labels.
    Eval(EvalArgs),
    /// Average max clique size per batch across several batch sizes.
    Stats(StatsArgs),
    /// Summarize a saved retention state.
    InspectCache(InspectArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Worker threads, 0 picks automatically.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Directory for results.jsonl, metrics.json, state.json and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from a retention state written by an earlier run.
    #[arg(long)]
    pub resume_state: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::TokenEncoder)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// state.json from `run --out`.
    #[arg(long)]
    pub state: PathBuf,
    /// Print the full state instead of a summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Generate the data in memory instead of reading files.
    #[arg(long, conflicts_with_all = ["features", "manifest", "text_features"])]
    pub synthetic: bool,
    #[arg(long, requires = "manifest")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    pub manifest: Option<PathBuf>,
    /// One row per class, ids 0..classes. Defaults to name-derived embeddings.
    #[arg(long, requires = "features")]
    pub text_features: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub num_attributes: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub attribute_strength: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub domain_shift: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Defaults to the run seed.
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

impl SynthArgs {
    fn any(&self) -> bool {
        self.num_classes.is_some()
            || self.samples_per_class.is_some()
            || self.num_attributes.is_some()
            || self.attribute_strength.is_some()
            || self.domain_shift.is_some()
            || self.noise.is_some()
            || self.dim.is_some()
            || self.synth_seed.is_some()
    }

    fn apply(&self, s: &mut SyntheticSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(num_classes, samples_per_class, num_attributes, attribute_strength, domain_shift, noise, dim);
        if let Some(v) = self.synth_seed {
            s.seed = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    TokenEncoder,
    FeatureSpace,
}

impl From<ModeArg> for EncoderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TokenEncoder => EncoderMode::TokenEncoder,
            ModeArg::FeatureSpace => EncoderMode::FeatureSpace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CombineArg {
    Concat,
    Mean,
}

impl From<CombineArg> for CombineMode {
    fn from(m: CombineArg) -> Self {
        match m {
            CombineArg::Concat => CombineMode::Concat,
            CombineArg::Mean => CombineMode::Mean,
        }
    }
}

/// Flags for every `RunConfig` field. Unset flags keep the config file value.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON file in the `--dump-config` schema.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha_r: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Retention capacity per class.
    #[arg(long)]
    pub cache_size: Option<usize>,
    /// Neighbors kept per row of the retention graph.
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub temp: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub combine_mode: Option<CombineArg>,
    #[arg(long)]
    pub image_prompting: Option<bool>,
    #[arg(long)]
    pub text_prompting: Option<bool>,
    #[arg(long)]
    pub retention: Option<bool>,
    #[arg(long)]
    pub prompt_tokens: Option<usize>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub prompt_gain: Option<f64>,
    /// Switch every component off.
    #[arg(long)]
    pub zero_shot: bool,
}

impl ConfigArgs {
    fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            batch_size,
            topk,
            threshold,
            lambda,
            lr,
            steps,
            alpha_r,
            sigma,
            cache_size,
            neighbors,
            temp,
            beta,
            seed,
            image_prompting,
            text_prompting,
            retention,
            prompt_tokens,
            token_dim,
            prompt_gain
        );
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        if let Some(m) = self.combine_mode {
            c.combine_mode = m.into();
        }
        if self.zero_shot {
            *c = c.clone().zero_shot();
        }
    }
}

/// Config file schema, also what `--dump-config` prints. Exactly one data
/// source: `synthetic`, or `features` + `manifest` (+ `text_features`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_features: Option<PathBuf>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Config file, then flags on top. The result is validated.
pub fn resolve(source: &SourceArgs, args: &ConfigArgs) -> Result<FileConfig> {
    let mut fc = match &args.config {
        Some(p) => FileConfig::read(p)?,
        None => FileConfig::default(),
    };
    args.apply(&mut fc.run);

    if source.synthetic || (source.synth.any() && source.features.is_none()) {
        if source.features.is_none() && fc.features.is_some() && !source.synthetic {
            return Err(Error::Config("synthetic flags given but the config file names feature files".into()));
        }
        let mut spec = fc.synthetic.take().unwrap_or_else(|| SyntheticSpec {
            seed: fc.run.seed,
            ..SyntheticSpec::default()
        });
        source.synth.apply(&mut spec);
        fc.synthetic = Some(spec);
        fc.features = None;
        fc.manifest = None;
        fc.text_features = None;
    } else if let Some(f) = &source.features {
        if source.synth.any() {
            return Err(Error::Config("synthetic flags cannot be combined with --features".into()));
        }
        fc.features = Some(f.clone());
        fc.manifest = source.manifest.clone();
        fc.text_features = source.text_features.clone();
        fc.synthetic = None;
    }

    match (&fc.synthetic, &fc.features, &fc.manifest) {
        (Some(_), None, None) | (None, Some(_), Some(_)) => {}
        (None, None, None) => return Err(Error::Config("no data: pass --synthetic or --features with --manifest".into())),
        _ => {
            return Err(Error::Config(
                "need exactly one data source: synthetic, or features together with manifest".into(),
            ))
        }
    }
    if fc.text_features.is_some() && fc.features.is_none() {
        return Err(Error::Config("text_features needs features".into()));
    }
    fc.run.validate().map_err(|e| match e {
        scap_core::Error::InvalidConfig(m) => Error::Config(m),
        e => Error::Config(e.to_string()),
    })?;
    Ok(fc)
}

pub struct Loaded {
    pub samples: Vec<ImageSample>,
    pub catalog: ClassCatalog,
}

pub fn load(fc: &FileConfig) -> Result<Loaded> {
    if let Some(spec) = &fc.synthetic {
        let (samples, catalog) = generate_synthetic(spec, fc.run.mode).map_err(|e| match e {
            scap_core::Error::InvalidConfig(m) => Error::Config(m),
            scap_core::Error::TooFew { needed, found } => Error::Config(format!("synthetic data needs at least {needed} classes, got {found}")),
            e => Error::Core(e),
        })?;
        return Ok(Loaded { samples, catalog });
    }
    let (Some(f), Some(m)) = (&fc.features, &fc.manifest) else {
        return Err(Error::Config("no data source".into()));
    };
    let ds = load_dataset(f, m, fc.run.mode, fc.text_features.as_deref())?;
    if ds.samples.is_empty() {
        return Err(Error::Manifest("manifest lists no samples".into()));
    }
    Ok(Loaded {
        samples: ds.samples,
        catalog: ds.catalog,
    })
}

/// Runs the configured stream from a fresh or restored state.
pub fn execute(
    fc: &FileConfig,
    data: &Loaded,
    threads: usize,
    state: Option<(&Path, RetentionState)>,
) -> Result<(StreamReport, RetentionState)> {
    let exec = Rayon::new(threads)?;
    let mut engine = Engine::with_aligned_encoders(fc.run.clone(), data.catalog.clone())?;
    if let Some((path, s)) = state {
        engine.restore_state(s).map_err(|source| Error::State {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let report = run_stream(&mut engine, &data.samples, &exec)?;
    Ok((report, engine.state().clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub acc1: Option<f64>,
    pub correct: usize,
    pub labeled: usize,
    pub samples: usize,
    pub clique_count: usize,
    pub avg_max_clique_size: f64,
    pub metrics: RunMetrics,
}

impl MetricsSummary {
    pub fn new(m: &RunMetrics) -> Self {
        Self {
            acc1: m.acc1(),
            correct: m.correct,
            labeled: m.labeled,
            samples: m.samples,
            clique_count: m.clique_count(),
            avg_max_clique_size: m.avg_max_clique_size(),
            metrics: m.clone(),
        }
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "na".into(), |a| format!("{a:.6}"))
}

/// The final line `run` prints.
pub fn summary_line(m: &RunMetrics) -> String {
    format!(
        "acc1={} correct={} labeled={} samples={} batches={} cliques={} avg_max_clique_size={:.6}",
        fmt_acc(m.acc1()),
        m.correct,
        m.labeled,
        m.samples,
        m.batches.len(),
        m.clique_count(),
        m.avg_max_clique_size()
    )
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let fc = resolve(&a.source, &a.config)?;
    if a.dump_config {
        writeln!(out, "{}", fc.to_json()).map_err(io_out)?;
        return Ok(());
    }
    let data = load(&fc)?;
    let state = match &a.resume_state {
        Some(p) => Some((p.as_path(), read_state(p)?)),
        None => None,
    };
    let (report, state) = execute(&fc, &data, a.threads, state)?;
    for b in &report.metrics.batches {
        writeln!(
            out,
            "batch={} size={} acc1={} cliques={} max_clique_size={}",
            b.batch_index,
            b.stats.size,
            fmt_acc(b.acc1()),
            b.stats.clique_count,
            b.stats.max_clique_size
        )
        .map_err(io_out)?;
    }
    writeln!(out, "{}", summary_line(&report.metrics)).map_err(io_out)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<ResultsRecord> = report.predictions.iter().map(ResultsRecord::from).collect();
        write_results(&dir.join("results.jsonl"), &records)?;
        write_json(&dir.join("metrics.json"), &MetricsSummary::new(&report.metrics))?;
        write_json(&dir.join("state.json"), &state)?;
        let cfg = dir.join("config.json");
        fs::write(&cfg, fc.to_json() + "\n").map_err(|e| Error::io(&cfg, e))?;
    }
    Ok(())
}

fn cmd_gen_synth(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    a.synth.apply(&mut spec);
    let fc = FileConfig {
        run: RunConfig {
            mode: a.mode.into(),
            ..RunConfig::default()
        },
        synthetic: Some(spec.clone()),
        ..FileConfig::default()
    };
    let data = load(&fc)?;
    let name = format!("synthetic-seed{}", spec.seed);
    let paths = save_dataset(&a.out, &name, "synthetic", &data.samples, &data.catalog)?;
    writeln!(
        out,
        "samples={} classes={} dim={} features={} manifest={} text_features={}",
        data.samples.len(),
        data.catalog.len(),
        spec.dim,
        paths.features.display(),
        paths.manifest.display(),
        paths.text_features.display()
    )
    .map_err(io_out)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let records = read_results(&a.results)?;
    let labels: std::collections::HashMap<u64, Option<usize>> = manifest.samples.iter().map(|s| (s.id, s.class_index)).collect();
    let mut seen = std::collections::HashSet::new();
    let (mut correct, mut labeled) = (0usize, 0usize);
    for r in &records {
        if !seen.insert(r.sample_id) {
            return Err(Error::IdMismatch {
                id: r.sample_id,
                detail: "appears twice in the results",
            });
        }
        let Some(label) = labels.get(&r.sample_id) else {
            return Err(Error::IdMismatch {
                id: r.sample_id,
                detail: "is in the results but not in the manifest",
            });
        };
        if r.predicted >= manifest.classes.len() {
            return Err(Error::IdMismatch {
                id: r.sample_id,
                detail: "has a predicted class outside the manifest classes",
            });
        }
        if let Some(l) = label {
            labeled += 1;
            correct += usize::from(*l == r.predicted);
        }
    }
    let acc = (labeled > 0).then(|| correct as f64 / labeled as f64);
    writeln!(
        out,
        "acc1={} correct={correct} labeled={labeled} records={} missing={}",
        fmt_acc(acc),
        records.len(),
        manifest.samples.len() - seen.len()
    )
    .map_err(io_out)
}

fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) {
        return Err(Error::Config("--batch-sizes needs positive sizes".into()));
    }
    let fc = resolve(&a.source, &a.config)?;
    let data = load(&fc)?;
    let mut prev = f64::NEG_INFINITY;
    let mut monotone = true;
    for &b in &a.batch_sizes {
        let mut f = fc.clone();
        f.run.batch_size = b;
        let (report, _) = execute(&f, &data, a.threads, None)?;
        let m = &report.metrics;
        let avg = m.avg_max_clique_size();
        monotone &= avg >= prev;
        prev = avg;
        writeln!(
            out,
            "batch_size={b} batches={} avg_max_clique_size={avg:.6} cliques={} acc1={}",
            m.batches.len(),
            m.clique_count(),
            fmt_acc(m.acc1())
        )
        .map_err(io_out)?;
    }
    writeln!(out, "non_decreasing={monotone}").map_err(io_out)
}

pub fn read_state(path: &Path) -> Result<RetentionState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let state = read_state(&a.state)?;
    if a.json {
        return writeln!(out, "{}", serde_json::to_string_pretty(&state).expect("state serializes")).map_err(io_out);
    }
    writeln!(
        out,
        "batches_seen={} text_count={} text_norm={:.6} classes={}",
        state.batches_seen,
        state.text.count,
        scap_core::numeric::norm(state.text.prompt.as_slice()),
        state.caches.len()
    )
    .map_err(io_out)?;
    for (class, cache) in &state.caches {
        let value_tokens: Vec<String> = cache.entries().iter().map(|e| e.value.n_tokens().to_string()).collect();
        writeln!(
            out,
            "class={class} entries={}/{} value_tokens=[{}]",
            cache.len(),
            cache.capacity(),
            value_tokens.join(",")
        )
        .map_err(io_out)?;
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, out),
        Command::GenSynth(a) => cmd_gen_synth(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::InspectCache(a) => cmd_inspect(a, out),
    }
}

/// Parses `args` (program name first), runs, and returns the exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
