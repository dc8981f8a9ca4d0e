//! Command-line orchestration: configuration merging, the four subcommands
//! and their output files.
//!
//! Settings resolve as CLI flag, then config file key, then built-in default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute, pre_event_scores, preview_replacement, univariate_baseline, AttributionConfig, AttributionReport,
    BaselineScores, VariableSubset, DEFAULT_BINS,
};
use crate::detector::{detect, score_interval, Detection, ScanConfig};
use crate::diagnostics::Warning;
use crate::error::{Error, Result};
use crate::series::{load_csv, write_csv, zscore, EmbeddingConfig, Interval, MultivariateSeries, Normalization};
use crate::synth::{generate, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "anomaly-attribution",
    version,
    about = "Detect anomalous intervals in multivariate time series and attribute them to variables"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan for the most divergent intervals.
    Detect(DetectArgs),
    /// Attribute detections to variable subsets by counterfactual replacement.
    Attribute(AttributeArgs),
    /// Per-variable histogram KL of an interval against the whole series.
    Baseline(BaselineArgs),
    /// Generate a synthetic series with injected anomalies.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Input series CSV (header `time,<name>...`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Embedding dimension [default: 3].
    #[arg(long)]
    pub kappa: Option<usize>,
    /// Embedding lag [default: 1].
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Skip per-variable z-scoring.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub len_min: Option<usize>,
    #[arg(long)]
    pub len_max: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Detections written by `detect`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Explicit interval `a:b` (0-based, end exclusive).
    #[arg(long)]
    pub interval: Option<String>,
    #[arg(long)]
    pub max_subset: Option<usize>,
    /// Replacement draws per subset [default: 10].
    #[arg(long)]
    pub realizations: Option<usize>,
    /// Steps to move the window back for a pre-event column; repeatable.
    #[arg(long = "offset")]
    pub offsets: Vec<usize>,
    /// Length of pre-event windows [default: detection length].
    #[arg(long)]
    pub offset_length: Option<usize>,
    /// Keep the nominal model fixed instead of re-estimating it after replacement.
    #[arg(long)]
    pub freeze_nominal: bool,
    /// Allow more than 20 variables.
    #[arg(long)]
    pub allow_large_d: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub interval: Option<String>,
    /// Histogram bins [default: 30].
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// Synthetic spec in TOML.
    #[arg(long, alias = "input")]
    pub spec: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub normalize: Option<bool>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub interval: Option<String>,
    pub detections: Option<PathBuf>,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub kappa: Option<usize>,
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub len_min: Option<usize>,
    pub len_max: Option<usize>,
    pub top_k: Option<usize>,
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    pub max_subset: Option<usize>,
    pub realizations: Option<usize>,
    pub offsets: Option<Vec<usize>>,
    pub offset_length: Option<usize>,
    pub rescore_nominal: Option<bool>,
    pub allow_large_d: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub bins: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub normalize: bool,
    pub seed: u64,
    pub threads: Option<usize>,
    pub embedding: EmbeddingConfig,
    pub scan: ScanConfig,
    pub max_subset: Option<usize>,
    pub realizations: usize,
    pub offsets: Vec<usize>,
    pub offset_length: Option<usize>,
    pub rescore_nominal: bool,
    pub allow_large_d: bool,
    pub bins: usize,
    pub interval: Option<Interval>,
    pub detections: Option<PathBuf>,
}

pub const DEFAULT_LEN_MIN: usize = 20;
pub const DEFAULT_LEN_MAX: usize = 100;

impl RunConfig {
    fn resolve(shared: &SharedArgs) -> Result<(Self, ConfigFile)> {
        let file = match &shared.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let embedding = EmbeddingConfig {
            kappa: shared.kappa.or(file.embedding.kappa).unwrap_or(3),
            tau: shared.tau.or(file.embedding.tau).unwrap_or(1),
        };
        embedding.validate()?;
        let cfg = RunConfig {
            input: shared.input.clone().or_else(|| file.input.clone()),
            output_dir: shared
                .output_dir
                .clone()
                .or_else(|| file.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
            normalize: !shared.no_normalize && file.normalize.unwrap_or(true),
            seed: shared.seed.or(file.seed).unwrap_or(0),
            threads: shared.threads.or(file.threads),
            embedding,
            scan: ScanConfig {
                len_min: file.scan.len_min.unwrap_or(DEFAULT_LEN_MIN),
                len_max: file.scan.len_max.unwrap_or(DEFAULT_LEN_MAX),
                top_k: file.scan.top_k.unwrap_or(1),
                stride: file.scan.stride.unwrap_or(1),
                embedding,
            },
            max_subset: file.attribution.max_subset,
            realizations: file.attribution.realizations.unwrap_or(10),
            offsets: file.attribution.offsets.clone().unwrap_or_default(),
            offset_length: file.attribution.offset_length,
            rescore_nominal: file.attribution.rescore_nominal.unwrap_or(true),
            allow_large_d: file.attribution.allow_large_d.unwrap_or(false),
            bins: file.baseline.bins.unwrap_or(DEFAULT_BINS),
            interval: file.interval.as_deref().map(str::parse).transpose()?,
            detections: file.detections.clone(),
        };
        if cfg.threads == Some(0) {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        Ok((cfg, file))
    }

    pub fn for_detect(args: &DetectArgs) -> Result<Self> {
        let (mut cfg, _) = Self::resolve(&args.shared)?;
        let s = &mut cfg.scan;
        s.len_min = args.len_min.unwrap_or(s.len_min);
        s.len_max = args.len_max.unwrap_or(s.len_max);
        s.top_k = args.top_k.unwrap_or(s.top_k);
        s.stride = args.stride.unwrap_or(s.stride);
        s.validate()?;
        Ok(cfg)
    }

    pub fn for_attribute(args: &AttributeArgs) -> Result<Self> {
        let (mut cfg, _) = Self::resolve(&args.shared)?;
        cfg.max_subset = args.max_subset.or(cfg.max_subset);
        cfg.realizations = args.realizations.unwrap_or(cfg.realizations);
        if !args.offsets.is_empty() {
            cfg.offsets = args.offsets.clone();
        }
        cfg.offset_length = args.offset_length.or(cfg.offset_length);
        cfg.rescore_nominal &= !args.freeze_nominal;
        cfg.allow_large_d |= args.allow_large_d;
        if let Some(iv) = &args.interval {
            cfg.interval = Some(iv.parse()?);
        }
        cfg.detections = args.detections.clone().or(cfg.detections);
        if cfg.realizations == 0 {
            return Err(Error::Config("--realizations must be at least 1".into()));
        }
        if cfg.max_subset == Some(0) {
            return Err(Error::Config("--max-subset must be at least 1".into()));
        }
        if cfg.interval.is_none() && cfg.detections.is_none() {
            return Err(Error::Config("attribute needs --detections or --interval a:b".into()));
        }
        Ok(cfg)
    }

    pub fn for_baseline(args: &BaselineArgs) -> Result<Self> {
        let (mut cfg, _) = Self::resolve(&args.shared)?;
        cfg.bins = args.bins.unwrap_or(cfg.bins);
        if cfg.bins < 2 {
            return Err(Error::Config(format!("--bins must be at least 2, got {}", cfg.bins)));
        }
        if let Some(iv) = &args.interval {
            cfg.interval = Some(iv.parse()?);
        }
        if cfg.interval.is_none() {
            return Err(Error::Config("baseline needs --interval a:b".into()));
        }
        Ok(cfg)
    }

    fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            max_subset_size: self.max_subset,
            realizations: self.realizations,
            seed: self.seed,
            embedding: self.embedding,
            max_variables: if self.allow_large_d { usize::MAX } else { 20 },
            rescore_nominal: self.rescore_nominal,
            baseline_bins: self.bins,
        }
    }

    fn input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::Config("no input series given (--input)".into()))
    }
}

struct Loaded {
    series: MultivariateSeries,
    normalization: Option<Normalization>,
    warnings: Vec<Warning>,
}

fn load_input(cfg: &RunConfig) -> Result<Loaded> {
    let raw = load_csv(cfg.input()?)?;
    if cfg.normalize {
        let (series, norm, warnings) = zscore(&raw)?;
        Ok(Loaded {
            series,
            normalization: Some(norm),
            warnings,
        })
    } else {
        Ok(Loaded {
            series: raw,
            normalization: None,
            warnings: Vec::new(),
        })
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {t} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_log(dir: &Path, command: &str, warnings: &[Warning]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        command: &'a str,
        #[serde(flatten)]
        warning: &'a Warning,
    }
    let mut text = String::new();
    for warning in warnings {
        let line = serde_json::to_string(&Line { command, warning }).expect("warnings serialize");
        text.push_str(&line);
        text.push('\n');
    }
    write_text(&dir.join(format!("{command}.log.jsonl")), &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfigEcho {
    pub input: String,
    pub n: usize,
    pub variables: Vec<String>,
    pub kappa: usize,
    pub tau: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub top_k: usize,
    pub stride: usize,
    pub normalize: bool,
}

/// Schema of `detections.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub config_echo: DetectConfigEcho,
    pub detections: Vec<Detection>,
}

impl DetectionsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            message: format!("{}: {e}", path.display()),
        })
    }
}

pub fn detection_table(detections: &[Detection]) -> String {
    let mut out = String::from("rank        a        b   length        score\n");
    for d in detections {
        let _ = writeln!(
            out,
            "{:>4} {:>8} {:>8} {:>8} {:>12.4}",
            d.rank,
            d.interval.start,
            d.interval.end,
            d.interval.len(),
            d.score
        );
    }
    out
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<DetectionsFile> {
    cfg.scan.validate()?;
    let loaded = load_input(cfg)?;
    let detections = in_pool(cfg.threads, || detect(&loaded.series, &cfg.scan))??;
    ensure_dir(&cfg.output_dir)?;
    let file = DetectionsFile {
        config_echo: DetectConfigEcho {
            input: cfg.input()?.display().to_string(),
            n: loaded.series.n(),
            variables: loaded.series.names().to_vec(),
            kappa: cfg.embedding.kappa,
            tau: cfg.embedding.tau,
            len_min: cfg.scan.len_min,
            len_max: cfg.scan.len_max,
            top_k: cfg.scan.top_k,
            stride: cfg.scan.stride,
            normalize: cfg.normalize,
        },
        detections,
    };
    write_json(&cfg.output_dir.join("detections.json"), &file)?;
    write_text(
        &cfg.output_dir.join("detections.txt"),
        &detection_table(&file.detections),
    )?;
    write_log(&cfg.output_dir, "detect", &loaded.warnings)?;
    Ok(file)
}

/// Schema of `attribution_<rank>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFile {
    pub rank: usize,
    pub detection: AttributionReport,
    pub pre_event: Vec<AttributionReport>,
}

/// Mean post-replacement scores laid out with one row per subset and one
/// column per window (pre-event offsets, then the detection).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub const ORIGINAL_ROW: &str = "anomaly_score";

impl ScoreTable {
    pub fn from_reports(reports: &[(String, &AttributionReport)]) -> Self {
        let columns = reports.iter().map(|(c, _)| c.clone()).collect();
        let mut rows = vec![(
            ORIGINAL_ROW.to_owned(),
            reports.iter().map(|(_, r)| Some(r.original_score)).collect(),
        )];
        let primary = reports.last().map(|(_, r)| *r);
        if let Some(primary) = primary {
            let subsets = subset_rows(primary);
            for (label, indices) in subsets {
                let values = reports
                    .iter()
                    .map(|(_, r)| r.entry(&indices).map(|s| s.mean_score))
                    .collect();
                rows.push((label, values));
            }
        }
        Self { columns, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("subset".to_owned()).chain(self.columns.iter().cloned());
        wtr.write_record(header).expect("in-memory write");
        for (label, values) in &self.rows {
            let cells = std::iter::once(label.clone())
                .chain(values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            wtr.write_record(cells).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let columns = header.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let values = rec
                .iter()
                .skip(1)
                .map(|c| if c.is_empty() { Ok(None) } else { c.parse().map(Some) })
                .collect::<std::result::Result<Vec<Option<f64>>, _>>()
                .map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?;
            rows.push((rec[0].to_owned(), values));
        }
        Ok(Self { columns, rows })
    }
}

fn subset_rows(report: &AttributionReport) -> Vec<(String, Vec<usize>)> {
    let mut all: Vec<(String, Vec<usize>)> = report
        .subsets
        .iter()
        .map(|s| (s.subset.join("+"), s.indices.clone()))
        .chain(report.failed.iter().map(|f| (f.subset.join("+"), f.indices.clone())))
        .collect();
    all.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.1.cmp(&b.1)));
    all
}

pub fn cmd_attribute(cfg: &RunConfig) -> Result<Vec<AttributionFile>> {
    let loaded = load_input(cfg)?;
    let series = &loaded.series;
    let detections: Vec<Detection> = match (cfg.interval, &cfg.detections) {
        (Some(iv), _) => {
            iv.check_within(series.n())?;
            vec![Detection {
                interval: iv,
                score: score_interval(series, iv, cfg.embedding)?,
                rank: 1,
            }]
        }
        (None, Some(path)) => DetectionsFile::load(path)?.detections,
        (None, None) => return Err(Error::Config("attribute needs --detections or --interval a:b".into())),
    };
    for d in &detections {
        d.interval.check_within(series.n())?;
    }
    for &offset in &cfg.offsets {
        for d in &detections {
            crate::attribution::pre_event_window(d.interval, offset, cfg.offset_length, series.n())?;
        }
    }
    let acfg = cfg.attribution();
    ensure_dir(&cfg.output_dir)?;
    let mut warnings = loaded.warnings.clone();
    let mut files = Vec::new();
    for det in &detections {
        let (report, pre) = in_pool(cfg.threads, || -> Result<_> {
            let report = attribute(series, det.interval, &acfg)?;
            let pre = cfg
                .offsets
                .iter()
                .filter(|&&o| o > 0)
                .map(|&o| pre_event_scores(series, det.interval, o, cfg.offset_length, &acfg))
                .collect::<Result<Vec<_>>>()?;
            Ok((report, pre))
        })??;
        warnings.extend(report.warnings.iter().cloned());
        pre.iter().for_each(|r| warnings.extend(r.warnings.iter().cloned()));

        let mut columns: Vec<(String, &AttributionReport)> =
            pre.iter().map(|r| (format!("before_{}", r.config.offset), r)).collect();
        columns.push(("detection".to_owned(), &report));
        let table = ScoreTable::from_reports(&columns);
        write_text(
            &cfg.output_dir.join(format!("attribution_{}.csv", det.rank)),
            &table.to_csv(),
        )?;

        if det.rank == detections.iter().map(|d| d.rank).min().unwrap_or(det.rank) {
            if let Some(best) = report.ranked(1).first() {
                let subset = VariableSubset::new(best.indices.clone())?;
                let preview = preview_replacement(series, det.interval, &subset, &acfg)?;
                let preview = match &loaded.normalization {
                    Some(norm) => norm.invert(&preview),
                    None => preview,
                };
                let preview = match load_csv(cfg.input()?)?.time_labels() {
                    Some(labels) => preview.with_time_labels(labels.to_vec())?,
                    None => preview,
                };
                write_csv(&preview, cfg.output_dir.join("replacement_preview.csv"))?;
            }
        }

        let file = AttributionFile {
            rank: det.rank,
            detection: report,
            pre_event: pre,
        };
        write_json(&cfg.output_dir.join(format!("attribution_{}.json", det.rank)), &file)?;
        files.push(file);
    }
    write_log(&cfg.output_dir, "attribute", &warnings)?;
    Ok(files)
}

/// Schema of `baseline.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub variables: Vec<String>,
    pub normalize: bool,
    #[serde(flatten)]
    pub baseline: BaselineScores,
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<BaselineFile> {
    let interval = cfg
        .interval
        .ok_or_else(|| Error::Config("baseline needs --interval a:b".into()))?;
    if cfg.bins < 2 {
        return Err(Error::Config(format!("--bins must be at least 2, got {}", cfg.bins)));
    }
    let loaded = load_input(cfg)?;
    let baseline = univariate_baseline(&loaded.series, interval, cfg.bins)?;
    ensure_dir(&cfg.output_dir)?;
    let mut csv_text = String::from("variable,bin,lower,upper,inside,all\n");
    for h in &baseline.histograms {
        for (k, (ci, ca)) in h.inside.iter().zip(&h.all).enumerate() {
            let _ = writeln!(
                csv_text,
                "{},{k},{},{},{ci},{ca}",
                h.variable,
                h.edges[k],
                h.edges[k + 1]
            );
        }
    }
    write_text(&cfg.output_dir.join("baseline_histograms.csv"), &csv_text)?;
    let mut warnings = loaded.warnings;
    warnings.extend(baseline.warnings.iter().cloned());
    let file = BaselineFile {
        variables: loaded.series.names().to_vec(),
        normalize: cfg.normalize,
        baseline,
    };
    write_json(&cfg.output_dir.join("baseline.json"), &file)?;
    write_log(&cfg.output_dir, "baseline", &warnings)?;
    Ok(file)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(MultivariateSeries, crate::synth::GroundTruth)> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| Error::io(&args.spec, e))?;
    let mut spec = SynthSpec::from_toml(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (series, truth) = generate(&spec)?;
    let dir = args.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    write_csv(&series, dir.join("series.csv"))?;
    write_json(&dir.join("ground_truth.json"), &truth)?;
    Ok((series, truth))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Detect(args) => RunConfig::for_detect(&args).and_then(|cfg| {
            let file = cmd_detect(&cfg)?;
            print!("{}", detection_table(&file.detections));
            Ok(())
        }),
        Command::Attribute(args) => RunConfig::for_attribute(&args).and_then(|cfg| {
            for f in cmd_attribute(&cfg)? {
                let best: Vec<String> = f
                    .detection
                    .best_per_cardinality()
                    .iter()
                    .map(|s| format!("{{{}}}", s.subset.join(",")))
                    .collect();
                println!(
                    "rank {} {}: original {:.4}, lowest per size {}",
                    f.rank,
                    f.detection.config.interval,
                    f.detection.original_score,
                    best.join(" ")
                );
            }
            Ok(())
        }),
        Command::Baseline(args) => RunConfig::for_baseline(&args).and_then(|cfg| {
            let file = cmd_baseline(&cfg)?;
            for (name, score) in file.variables.iter().zip(&file.baseline.scores) {
                println!("{name}\t{score:.6}");
            }
            Ok(())
        }),
        Command::Simulate(args) => cmd_simulate(&args).map(|(s, _)| {
            println!("wrote {} steps of {} variables", s.n(), s.d());
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("anomaly-attribution").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_follow_experiment_protocol() {
        let Command::Attribute(a) = parse(&["attribute", "--input", "x.csv", "--interval", "3:9"]).command else {
            panic!()
        };
        let cfg = RunConfig::for_attribute(&a).unwrap();
        assert_eq!(cfg.embedding, EmbeddingConfig { kappa: 3, tau: 1 });
        assert_eq!(cfg.realizations, 10);
        assert_eq!(cfg.bins, 30);
        assert!(cfg.normalize);
        assert_eq!(cfg.interval, Some(Interval { start: 3, end: 9 }));
    }

    #[test]
    fn cli_overrides_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 5\n[embedding]\nkappa = 2\ntau = 4\n[scan]\nlen_min = 7\nlen_max = 9\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let Command::Detect(a) = parse(&["detect", "--config", p, "--tau", "2"]).command else {
            panic!()
        };
        let cfg = RunConfig::for_detect(&a).unwrap();
        assert_eq!(cfg.embedding, EmbeddingConfig { kappa: 2, tau: 2 });
        assert_eq!(cfg.seed, 5);
        assert_eq!((cfg.scan.len_min, cfg.scan.len_max), (7, 9));
        assert_eq!(cfg.scan.embedding, cfg.embedding);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sed = 5\n").unwrap();
        let Command::Detect(a) = parse(&["detect", "--config", path.to_str().unwrap()]).command else {
            panic!()
        };
        assert!(matches!(RunConfig::for_detect(&a), Err(Error::Config(_))));
    }

    #[test]
    fn validation_errors() {
        let Command::Detect(a) = parse(&["detect", "--len-min", "50", "--len-max", "10"]).command else {
            panic!()
        };
        assert!(RunConfig::for_detect(&a).is_err());
        let Command::Attribute(a) = parse(&["attribute", "--interval", "9-3"]).command else {
            panic!()
        };
        assert!(RunConfig::for_attribute(&a).is_err());
        let Command::Attribute(a) = parse(&["attribute"]).command else {
            panic!()
        };
        assert!(RunConfig::for_attribute(&a).is_err());
        let Command::Baseline(a) = parse(&["baseline", "--interval", "1:5", "--bins", "1"]).command else {
            panic!()
        };
        assert!(RunConfig::for_baseline(&a).is_err());
    }

    #[test]
    fn score_table_round_trip() {
        let table = ScoreTable {
            columns: vec!["before_10".into(), "detection".into()],
            rows: vec![
                (ORIGINAL_ROW.into(), vec![Some(104.69), Some(371.44)]),
                ("SLP+W".into(), vec![Some(57.11), None]),
            ],
        };
        assert_eq!(ScoreTable::from_csv(&table.to_csv()).unwrap(), table);
    }
}
