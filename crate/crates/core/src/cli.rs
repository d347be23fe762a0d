//! The `causal-chips` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Any flag of a
//! subcommand may also be set in a TOML file passed with `--config`; flags on
//! the command line win.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::confound::{analyze_image_confounding, write_salience, BootstrapConfig, ModelConfig, PropensityConfig, SalienceConfig};
use crate::embed::{embed_corpus, EmbeddingConfig};
use crate::frame::RawFrame;
use crate::geochip::{self, BandSelection, ChipFormat};
use crate::hetero::{analyze_image_heterogeneity, transportability, write_exemplars, HeterogeneityConfig, HeterogeneityReport};
use crate::recordstore::{self, RecordFile, RecordWriter};
use crate::synth::{self, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "causal-chips", version, about = "Image chips, embeddings and image-based causal effect estimation")]
pub struct Cli {
    /// TOML file of flag values (flat `name = value` pairs).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    Info,
    Debug,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut chips around points from a pool of rasters.
    #[command(args_override_self = true)]
    Extract(ExtractArgs),
    /// Pack chips into a record file.
    #[command(args_override_self = true)]
    Pack(PackArgs),
    /// Check every CRC and the index of a record file.
    #[command(args_override_self = true)]
    Validate(ValidateArgs),
    /// Randomized-convolution embeddings of every record.
    #[command(args_override_self = true)]
    Embed(EmbedArgs),
    /// Image-deconfounded average treatment effect.
    #[command(args_override_self = true)]
    Confound(ConfoundArgs),
    /// Image-driven treatment effect clusters.
    #[command(args_override_self = true)]
    Hetero(HeteroArgs),
    /// Synthetic data with known effects.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Record,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct ExtractArgs {
    /// CSV with columns key,lon,lat.
    #[arg(long)]
    pub points: PathBuf,
    /// Rasters searched in order (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub pool: Vec<PathBuf>,
    /// Chip width in pixels.
    #[arg(long, default_value_t = 500)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Fill value for windows overhanging a raster edge (default: reject them).
    #[arg(long)]
    pub pad: Option<f32>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// One-based band numbers (default: all).
    #[arg(long, value_delimiter = ',')]
    pub bands: Option<Vec<usize>>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct PackArgs {
    /// Directory of Key{key}_BAND{b}.csv chips.
    #[arg(long, conflicts_with = "points")]
    pub chips: Option<PathBuf>,
    /// Extract directly from rasters instead (key,lon,lat CSV).
    #[arg(long, requires = "pool")]
    pub points: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub pool: Vec<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub width: usize,
    #[arg(long)]
    pub pad: Option<f32>,
    #[arg(long, value_delimiter = ',')]
    pub bands: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct ValidateArgs {
    pub file: PathBuf,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct EmbeddingArgs {
    /// Embedding dimension (number of random kernels).
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    /// Spatial kernel size (odd).
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Temporal kernel size for image sequences.
    #[arg(long, default_value_t = 2)]
    pub temporal_kernel: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Skip per-image band standardization.
    #[arg(long)]
    pub no_standardize: bool,
}

impl EmbeddingArgs {
    fn config(&self, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            n_embed_dim: self.dim,
            kernel_size: self.kernel,
            temporal_kernel_size: self.temporal_kernel,
            seed,
            batch_size: self.batch_size,
            standardize: !self.no_standardize,
        }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub embedding: EmbeddingArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct ConfoundArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Unit table: key,w,y,lon,lat,covariates...
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub embedding: EmbeddingArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub nboot: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Ridge penalty of the propensity model.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Propensities are clipped into [eps, 1 - eps].
    #[arg(long, default_value_t = 0.01)]
    pub clip_eps: f64,
    /// Resample units rather than image keys in the bootstrap.
    #[arg(long)]
    pub unit_bootstrap: bool,
    /// Occlusion salience maps, e.g. `patch=8,stride=4,max=16`.
    #[arg(long)]
    pub salience: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for salience grids.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Label added to figure file names.
    #[arg(long, default_value = "")]
    pub tag: String,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct HeteroArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of effect clusters.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub embedding: EmbeddingArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub nboot: usize,
    /// Ridge penalty of the cluster gate.
    #[arg(long, default_value_t = 1.0)]
    pub gate_lambda: f64,
    /// Lower quantile reported for cluster probabilities.
    #[arg(long, default_value_t = 0.05)]
    pub conf_level: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Keys (first column `key`) of new locations, looked up in --records.
    #[arg(long)]
    pub transport: Option<PathBuf>,
    /// Occlusion salience maps, e.g. `patch=8,stride=4,max=16`.
    #[arg(long)]
    pub salience: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for exemplar lists and salience grids.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Confounded,
    Hetero,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub design: Design,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Chip height and width.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Confounding strength (confounded design).
    #[arg(long, default_value_t = 4.0)]
    pub gamma: f64,
    /// True effect (confounded design).
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// True cluster effects (hetero design).
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3.0])]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sd: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match apply_config_file(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::command().try_get_matches_from(&argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.log_level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    log::set_max_level(level);

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads.unwrap_or(0));
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cmd: &Command) -> Outcome {
    match cmd {
        Command::Extract(a) => extract(a),
        Command::Pack(a) => pack(a),
        Command::Validate(a) => validate(a),
        Command::Embed(a) => embed(a),
        Command::Confound(a) => confound(a),
        Command::Hetero(a) => hetero(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

/// Splices `--config` values into argv right after the subcommand, so that
/// explicit flags (which come later) override them.
fn apply_config_file(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut config_path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => config_path = Some(PathBuf::from(it.next().ok_or("--config needs a file")?)),
            Some(s) if s.starts_with("--config=") => config_path = Some(PathBuf::from(&s["--config=".len()..])),
            _ => rest.push(a),
        }
    }
    let Some(path) = config_path else { return Ok(rest) };

    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let pos = rest
        .iter()
        .position(|a| a.to_str().is_some_and(|s| names.iter().any(|n| n == s)))
        .ok_or("--config given without a subcommand")?;
    let sub = cmd.find_subcommand(rest[pos].to_str().unwrap()).unwrap();
    let known: BTreeSet<String> = sub.get_arguments().chain(cmd.get_arguments()).filter_map(|a| a.get_long().map(str::to_string)).collect();

    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("config {}: {e}", path.display()))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in &table {
        let flag = key.replace('_', "-");
        if !known.contains(&flag) || flag == "config" || flag == "help" {
            return Err(format!("unknown config key `{key}` for `{}`", sub.get_name()));
        }
        let scalar = |v: &toml::Value| -> Result<String, String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                toml::Value::Boolean(b) => Ok(b.to_string()),
                _ => Err(format!("config key `{key}`: unsupported value {v}")),
            }
        };
        match value {
            toml::Value::Boolean(true) => extra.push(format!("--{flag}").into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                extra.push(format!("--{flag}={}", parts.join(",")).into());
            }
            v => extra.push(format!("--{flag}={}", scalar(v)?).into()),
        }
    }
    rest.splice(pos + 1..pos + 1, extra);
    Ok(rest)
}

fn bands_of(b: &Option<Vec<usize>>) -> BandSelection {
    b.clone().map_or(BandSelection::All, BandSelection::List)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Result object with the effective configuration under `config`.
fn with_config(result: &impl Serialize, config: &impl Serialize) -> anyhow::Result<serde_json::Value> {
    let mut v = serde_json::to_value(result)?;
    let obj = v.as_object_mut().ok_or_else(|| anyhow!("result is not a JSON object"))?;
    obj.insert("config".into(), serde_json::to_value(config)?);
    Ok(v)
}

fn parse_salience(spec: &str) -> Result<SalienceConfig, Failure> {
    let mut cfg = SalienceConfig::default();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Failure::Usage(format!("--salience: expected name=value, got `{part}`")))?;
        let n: usize = v.trim().parse().map_err(|_| Failure::Usage(format!("--salience: `{v}` is not a positive integer")))?;
        match k.trim() {
            "patch" => cfg.patch = n,
            "stride" => cfg.stride = n,
            "max" => cfg.max_units = n,
            other => return Err(Failure::Usage(format!("--salience: unknown setting `{other}` (patch, stride, max)"))),
        }
    }
    if cfg.patch == 0 || cfg.stride == 0 {
        return Err(Failure::Usage("--salience: patch and stride must be at least 1".into()));
    }
    Ok(cfg)
}

fn extract(a: &ExtractArgs) -> Outcome {
    let requests = geochip::read_points_csv(&a.points, a.width, &bands_of(&a.bands)).map_err(anyhow::Error::from)?;
    let format = match a.format {
        FormatArg::Csv => ChipFormat::Csv,
        FormatArg::Record => ChipFormat::Record,
    };
    let report = geochip::extract_from_pool(&requests, &a.pool, &a.out, format, a.pad).map_err(anyhow::Error::from)?;
    write_json(&a.out.join("extract_report.json"), &with_config(&report, a)?)?;
    for key in report.unmatched_keys() {
        log::warn!("no raster in the pool covers {key}");
    }
    println!("{} of {} chips extracted into {}", report.matched(), requests.len(), a.out.display());
    Ok(())
}

fn pack(a: &PackArgs) -> Outcome {
    let file = match (&a.chips, &a.points) {
        (Some(dir), None) => {
            let chips = geochip::read_chip_dir(dir).map_err(anyhow::Error::from)?;
            if chips.is_empty() {
                return Err(anyhow!("no Key*_BAND*.csv chips in {}", dir.display()).into());
            }
            recordstore::write_records(chips.iter().map(|(k, t)| (k.as_str(), t)), &a.out).map_err(anyhow::Error::from)?
        }
        (None, Some(points)) => {
            let requests = geochip::read_points_csv(points, a.width, &bands_of(&a.bands)).map_err(anyhow::Error::from)?;
            let rasters = a.pool.iter().map(geochip::parse_raster).collect::<Result<Vec<_>, _>>().map_err(anyhow::Error::from)?;
            let mut writer = RecordWriter::create(&a.out).map_err(anyhow::Error::from)?;
            let mut matched = 0;
            for req in &requests {
                match geochip::match_in_pool(req, &rasters, a.pad).map_err(anyhow::Error::from)? {
                    Some((_, chip, _)) => {
                        writer.append(&req.key, &chip).map_err(anyhow::Error::from)?;
                        matched += 1;
                    }
                    None => log::warn!("no raster in the pool covers {}", req.key),
                }
            }
            if matched == 0 {
                drop(writer);
                let _ = fs::remove_file(&a.out);
                return Err(anyhow!("none of the {} points is covered by the pool", requests.len()).into());
            }
            writer.finish().map_err(anyhow::Error::from)?
        }
        _ => return Err(Failure::Usage("pack needs exactly one of --chips or --points".into())),
    };
    println!("packed {} records into {}", file.count, a.out.display());
    Ok(())
}

fn validate(a: &ValidateArgs) -> Outcome {
    let report = recordstore::validate(&a.file).map_err(anyhow::Error::from)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    if report.is_ok() {
        Ok(())
    } else {
        Err(anyhow!("{}: {} problem(s) found", a.file.display(), report.findings.len()).into())
    }
}

fn open_records(path: &Path) -> anyhow::Result<RecordFile> {
    RecordFile::open(path).with_context(|| format!("opening {}", path.display()))
}

fn embed(a: &EmbedArgs) -> Outcome {
    let records = open_records(&a.records)?;
    let keys: Vec<String> = records.keys().map(str::to_string).collect();
    let cfg = a.embedding.config(a.seed);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let phi = embed_corpus(&records, &keys, &cfg).map_err(anyhow::Error::from)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    phi.write_csv(std::io::BufWriter::new(fs::File::create(&a.out).map_err(anyhow::Error::from)?)).map_err(anyhow::Error::from)?;
    println!("{} embeddings of dimension {} written to {}", phi.nrows(), phi.dim(), a.out.display());
    Ok(())
}

fn confound(a: &ConfoundArgs) -> Outcome {
    let salience = a.salience.as_deref().map(parse_salience).transpose()?;
    let embed_cfg = a.embedding.config(a.seed);
    embed_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let records = open_records(&a.records)?;
    let raw = RawFrame::from_path(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let (frame, dropped) = raw.into_frame().map_err(anyhow::Error::from)?;
    if !dropped.is_empty() {
        log::info!("dropped {} incomplete rows", dropped.len());
    }
    let config = ModelConfig {
        propensity: PropensityConfig { l2_lambda: a.lambda, clip_eps: a.clip_eps, ..Default::default() },
        folds: a.folds,
        bootstrap: BootstrapConfig { n_boot: a.nboot, seed: a.seed, cluster_by_key: !a.unit_bootstrap },
        salience,
    };
    let result = analyze_image_confounding(&frame, &records, &embed_cfg, &config).map_err(anyhow::Error::from)?;
    if !result.salience.is_empty() {
        let dir = a.out_dir.clone().unwrap_or_else(|| a.out.parent().map(Path::to_path_buf).unwrap_or_default());
        write_salience(&result.salience, &dir, &a.tag).map_err(anyhow::Error::from)?;
    }
    write_json(&a.out, &with_config(&result, a)?)?;
    println!("tauHat_propensityHajek = {:.6} (se {:.6})", result.tau_hajek, result.tau_hajek_se);
    Ok(())
}

fn read_keys(path: &Path) -> anyhow::Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = rdr.headers()?.iter().position(|h| h == "key").ok_or_else(|| anyhow!("{}: no `key` column", path.display()))?;
    let mut keys = Vec::new();
    for rec in rdr.records() {
        keys.push(rec?.get(col).unwrap_or_default().to_string());
    }
    Ok(keys)
}

fn hetero(a: &HeteroArgs) -> Outcome {
    let salience = a.salience.as_deref().map(parse_salience).transpose()?;
    let embed_cfg = a.embedding.config(a.seed);
    embed_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let records = open_records(&a.records)?;
    let raw = RawFrame::from_path(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let config = HeterogeneityConfig {
        k_clusters: a.k,
        max_em_iters: a.max_iters,
        tol: a.tol,
        n_boot: a.nboot,
        seed: a.seed,
        gate_lambda: a.gate_lambda,
        conf_level: a.conf_level,
        ..Default::default()
    };
    let analysis = analyze_image_heterogeneity(&raw, &records, &embed_cfg, &config, salience.as_ref()).map_err(anyhow::Error::from)?;
    let transport: Option<DMatrix<f64>> = match &a.transport {
        Some(path) => {
            let keys = read_keys(path)?;
            let phi = embed_corpus(&records, &keys, &embed_cfg).map_err(anyhow::Error::from)?;
            Some(transportability(&analysis.fit, &phi.values).map_err(anyhow::Error::from)?)
        }
        None => None,
    };
    let dir = a.out_dir.clone().unwrap_or_else(|| a.out.parent().map(Path::to_path_buf).unwrap_or_default());
    write_exemplars(&analysis.exemplars, &dir).map_err(anyhow::Error::from)?;
    if !analysis.salience.is_empty() {
        write_salience(&analysis.salience, &dir, &a.tag).map_err(anyhow::Error::from)?;
    }
    let report = HeterogeneityReport::new(&analysis.fit, transport.as_ref());
    write_json(&a.out, &with_config(&report, a)?)?;
    println!("clusterTaus_mean = {:?}, impliedATE = {:.6}", report.cluster_taus_mean, report.implied_ate);
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Outcome {
    let spec = SynthSpec {
        n_units: a.n,
        chip_size: a.size,
        bands: a.bands,
        tau_true: match a.design {
            Design::Confounded => vec![a.tau],
            Design::Hetero => a.taus.clone(),
        },
        gamma: a.gamma,
        noise_sd: a.noise_sd,
        seed: a.seed,
    };
    let (data, name) = match a.design {
        Design::Confounded => (synth::gen_confounded(&spec), "confounded"),
        Design::Hetero => (synth::gen_heterogeneous(&spec), "hetero"),
    };
    let data = data.map_err(|e| match e {
        synth::SynthError::InvalidSpec(m) => Failure::Usage(m),
        e => Failure::Data(e.into()),
    })?;
    synth::write_synth(&data, &spec, name, &a.out_dir).map_err(anyhow::Error::from)?;
    println!("{} {name} units written to {}", spec.n_units, a.out_dir.display());
    Ok(())
}
