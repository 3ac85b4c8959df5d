//! Command-line surface: data generation, training, evaluation, the
//! ablation and sweep harnesses, information-plane analysis, and
//! embedding export.
//!
//! Flag precedence is flag > config file > built-in default. The config
//! file is flat JSON with dotted keys (`train.beta`, `data.source`). The
//! only environment variable consulted is `METAVIB_DATA_DIR`, the default
//! data root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::checkpoint::{self, TensorRecord};
use crate::data::{
    build_rotation_domains, load_idx, make_split, synth_glyphs, BasePool, Domain,
};
use crate::distributions::KlDirection;
use crate::error::{Error, Result};
use crate::evaluation::{
    self, predict, run_ablation, run_sweep, PredictOptions, SweepAxis,
};
use crate::infoplane::{info_plane, write_infoplane_csv, DEFAULT_BINS};
use crate::networks::ModelParams;
use crate::objectives::Objective;
use crate::rng::SeedStream;
use crate::trainer::{self, TrainConfig};

pub const DATA_DIR_ENV: &str = "METAVIB_DATA_DIR";

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

#[derive(Parser)]
#[command(
    name = "metavib",
    version,
    about = "Episodic meta-learning with a variational information bottleneck on rotated-digit-style domains"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build the multi-domain dataset (synthetic glyphs or IDX digits).
    GenData(GenDataArgs),
    /// Train one objective against one held-out target domain.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a target domain; writes uncertainty.csv.
    Eval(EvalArgs),
    /// Train and evaluate every objective over targets and seeds.
    Ablate(AblateArgs),
    /// Sweep the bottleneck size or the latent sample count.
    Sweep(SweepArgs),
    /// Information-plane estimates over a run's snapshots.
    Infoplane(InfoplaneArgs),
    /// Export encoder-mean embeddings of every domain sample.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Flat dotted-key JSON config; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data root (default: $METAVIB_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Use the procedural glyph pool instead of IDX files.
    #[arg(long)]
    pub synthetic: bool,
    /// IDX image file (big-endian, magic 0x00000803).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file (big-endian, magic 0x00000801).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub per_domain: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated rotation angles in degrees.
    #[arg(long)]
    pub angles: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub objective: Option<String>,
    /// Held-out target domain id (e.g. M75).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lz: Option<usize>,
    #[arg(long)]
    pub lpsi: Option<usize>,
    #[arg(long)]
    pub kl_direction: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Samples per selected domain per episode.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Write parameter snapshots at every evaluation point.
    #[arg(long)]
    pub snapshots: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub lz: Option<usize>,
    #[arg(long)]
    pub lpsi: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of seeds (1..=n) per configuration.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// "all" or a comma-separated list of target domain ids.
    #[arg(long)]
    pub targets: Option<String>,
    /// Comma-separated subset of erm,baseline,vib,metavib.
    #[arg(long)]
    pub objectives: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lz: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Parallel worker cap for the run fan-out.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// beta | lz
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct InfoplaneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding snap_*.ckpt files from a --snapshots run.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Probe batch size (stratified over domains and classes).
    #[arg(long)]
    pub probe: Option<usize>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

// ---------------------------------------------------------------------
// Config file and value resolution.
// ---------------------------------------------------------------------

/// Flat dotted-key JSON configuration.
pub struct ConfigFile {
    map: serde_json::Map<String, serde_json::Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let map = match path {
            None => serde_json::Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                    Error::Parameter(format!("config {}: {e}", p.display()))
                })?;
                match value {
                    serde_json::Value::Object(map) => map,
                    _ => {
                        return Err(Error::Parameter(format!(
                            "config {} must be a JSON object",
                            p.display()
                        )))
                    }
                }
            }
        };
        Ok(ConfigFile { map })
    }

    fn lookup(&self, key: &str) -> Option<&serde_json::Value> {
        self.map.get(key)
    }

    pub fn f64(&self, flag: Option<f64>, key: &str, default: f64) -> Result<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Parameter(format!("config key '{key}' must be a number"))),
        }
    }

    pub fn usize(&self, flag: Option<usize>, key: &str, default: usize) -> Result<usize> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Parameter(format!("config key '{key}' must be an integer"))),
        }
    }

    pub fn u64(&self, flag: Option<u64>, key: &str, default: u64) -> Result<u64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Parameter(format!("config key '{key}' must be an integer"))),
        }
    }

    pub fn string(&self, flag: Option<String>, key: &str, default: &str) -> Result<String> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.lookup(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Parameter(format!("config key '{key}' must be a string"))),
        }
    }

    pub fn string_opt(&self, flag: Option<String>, key: &str) -> Result<Option<String>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.lookup(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| Error::Parameter(format!("config key '{key}' must be a string"))),
        }
    }
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad number '{s}' in list")))
        })
        .collect()
}

// ---------------------------------------------------------------------
// Data directory layout.
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct DomainMeta {
    pub id: String,
    pub angle: f64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataIndex {
    pub classes: usize,
    pub domains: Vec<DomainMeta>,
}

fn domain_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("domain_{id}.bin"))
}

pub fn save_domains(dir: &Path, domains: &[Domain]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let index = DataIndex {
        classes: domains.first().map(|d| d.class_count).unwrap_or(0),
        domains: domains
            .iter()
            .map(|d| DomainMeta {
                id: d.id.clone(),
                angle: d.angle_deg,
                count: d.len(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(dir.join("index.json"), text)?;
    for d in domains {
        let records = vec![
            TensorRecord::new("images", d.images.shape().to_vec(), d.images.data().to_vec()),
            TensorRecord::new(
                "labels",
                vec![d.len()],
                d.labels.iter().map(|&l| l as f64).collect(),
            ),
            TensorRecord::scalar("angle", d.angle_deg),
        ];
        checkpoint::write_records(&domain_file(dir, &d.id), &records)?;
    }
    Ok(())
}

pub fn load_domains(dir: &Path) -> Result<(Vec<Domain>, DataIndex)> {
    let index_path = dir.join("index.json");
    let text = std::fs::read_to_string(&index_path).map_err(|e| {
        Error::Parameter(format!(
            "cannot read data index {}: {e} (run gen-data first)",
            index_path.display()
        ))
    })?;
    let index: DataIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Parameter(format!("bad data index: {e}")))?;
    let mut domains = Vec::with_capacity(index.domains.len());
    for meta in &index.domains {
        let records = checkpoint::read_records(&domain_file(dir, &meta.id))?;
        let images = checkpoint::find(&records, "images")?;
        let labels = checkpoint::find(&records, "labels")?;
        domains.push(Domain::new(
            meta.id.clone(),
            meta.angle,
            Tensor::new(images.shape.clone(), images.data.clone())?,
            labels.data.iter().map(|&v| v as usize).collect(),
            index.classes,
        )?);
    }
    Ok((domains, index))
}

fn resolve_data_dir(args: &CommonArgs) -> Result<PathBuf> {
    if let Some(dir) = &args.data_dir {
        return Ok(dir.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) => Ok(PathBuf::from(v)),
        None => Err(Error::Parameter(format!(
            "no --data-dir given and {DATA_DIR_ENV} is unset"
        ))),
    }
}

// ---------------------------------------------------------------------
// Run manifest.
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    input_hash: String,
    out_dir: String,
    created_unix_ms: u128,
    config: BTreeMap<String, serde_json::Value>,
}

fn hash_inputs(paths: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        if p.exists() {
            hasher.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            hasher.update(std::fs::read(p)?);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    input_paths: &[PathBuf],
    config: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = RunManifest {
        command: command.to_string(),
        seed,
        input_hash: hash_inputs(input_paths)?,
        out_dir: out.display().to_string(),
        created_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        config,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn data_input_paths(dir: &Path, index: &DataIndex) -> Vec<PathBuf> {
    let mut paths = vec![dir.join("index.json")];
    paths.extend(index.domains.iter().map(|m| domain_file(dir, &m.id)));
    paths
}

// ---------------------------------------------------------------------
// Command implementations.
// ---------------------------------------------------------------------

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Infoplane(args) => cmd_infoplane(args),
        Command::ExportEmbeddings(args) => cmd_export(args),
    }
}

#[cfg(feature = "parallel")]
fn configure_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_jobs(_jobs: Option<usize>) {}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = file.u64(args.common.seed, "data.seed", 7)?;
    let per_domain = file.usize(args.per_domain, "data.per_domain", 1000)?;
    let noise_sigma = file.f64(args.noise_sigma, "data.noise_sigma", 0.1)?;
    let classes = file.usize(args.classes, "data.classes", 10)?;
    let angles_text = file.string(
        args.angles,
        "data.angles",
        "0,15,30,45,60,75",
    )?;
    let angles = parse_f64_list(&angles_text)?;
    let source = if args.synthetic {
        "synthetic".to_string()
    } else {
        file.string(None, "data.source", "idx")?
    };

    let mut rng = SeedStream::new(seed);
    let base: BasePool = if source == "synthetic" {
        let per_class_pool = per_domain / classes.max(1) + per_domain;
        synth_glyphs(classes, per_class_pool, noise_sigma, &mut rng)?
    } else {
        let images = match (&args.images, file.string_opt(None, "data.images")?) {
            (Some(p), _) => p.clone(),
            (None, Some(s)) => PathBuf::from(s),
            (None, None) => {
                return Err(Error::Parameter(
                    "gen-data needs --synthetic or --images/--labels".into(),
                ))
            }
        };
        let labels = match (&args.labels, file.string_opt(None, "data.labels")?) {
            (Some(p), _) => p.clone(),
            (None, Some(s)) => PathBuf::from(s),
            (None, None) => return Err(Error::Parameter("missing --labels".into())),
        };
        BasePool::from_idx(load_idx(&images, &labels)?, classes)?
    };
    let domains = build_rotation_domains(&base, &angles, per_domain, &mut rng)?;
    save_domains(&args.common.out, &domains)?;
    println!(
        "wrote {} domains x {} samples to {}",
        domains.len(),
        per_domain,
        args.common.out.display()
    );
    Ok(())
}

struct ResolvedTrain {
    config: TrainConfig,
    target: String,
    val_frac: f64,
    snapshot: BTreeMap<String, serde_json::Value>,
}

#[allow(clippy::too_many_arguments)]
fn resolve_train(
    file: &ConfigFile,
    seed: Option<u64>,
    objective: Option<String>,
    target: Option<String>,
    beta: Option<f64>,
    lz: Option<usize>,
    lpsi: Option<usize>,
    kl_direction: Option<String>,
    lr: Option<f64>,
    iters: Option<usize>,
    batch: Option<usize>,
    eval_every: Option<usize>,
    val_frac: Option<f64>,
) -> Result<ResolvedTrain> {
    let defaults = TrainConfig::default();
    let objective = Objective::from_str(&file.string(objective, "train.objective", "metavib")?)?;
    let target = file
        .string_opt(target, "train.target")?
        .ok_or_else(|| Error::Parameter("no --target domain given".into()))?;
    let config = TrainConfig {
        objective,
        beta: file.f64(beta, "train.beta", defaults.beta)?,
        l_z: file.usize(lz, "train.lz", defaults.l_z)?,
        l_psi: file.usize(lpsi, "train.lpsi", defaults.l_psi)?,
        kl_direction: KlDirection::from_str(&file.string(
            kl_direction,
            "train.kl_direction",
            "forward",
        )?)?,
        learning_rate: file.f64(lr, "train.lr", defaults.learning_rate)?,
        iterations: file.usize(iters, "train.iters", defaults.iterations)?,
        batch_per_domain: file.usize(batch, "train.batch", defaults.batch_per_domain)?,
        seed: file.u64(seed, "train.seed", defaults.seed)?,
        eval_every: file.usize(eval_every, "train.eval_every", defaults.eval_every)?,
        ..defaults
    };
    config.validate()?;
    let val_frac = file.f64(val_frac, "train.val_frac", 0.1)?;

    let mut snapshot = BTreeMap::new();
    let js = |v: f64| serde_json::json!(v);
    snapshot.insert("train.objective".into(), serde_json::json!(objective.to_string()));
    snapshot.insert("train.target".into(), serde_json::json!(target));
    snapshot.insert("train.beta".into(), js(config.beta));
    snapshot.insert("train.lz".into(), serde_json::json!(config.l_z));
    snapshot.insert("train.lpsi".into(), serde_json::json!(config.l_psi));
    snapshot.insert(
        "train.kl_direction".into(),
        serde_json::json!(match config.kl_direction {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        }),
    );
    snapshot.insert("train.lr".into(), js(config.learning_rate));
    snapshot.insert("train.iters".into(), serde_json::json!(config.iterations));
    snapshot.insert("train.batch".into(), serde_json::json!(config.batch_per_domain));
    snapshot.insert("train.seed".into(), serde_json::json!(config.seed));
    snapshot.insert("train.eval_every".into(), serde_json::json!(config.eval_every));
    snapshot.insert("train.val_frac".into(), js(val_frac));
    Ok(ResolvedTrain {
        config,
        target,
        val_frac,
        snapshot,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, index) = load_domains(&data_dir)?;
    let mut resolved = resolve_train(
        &file,
        args.common.seed,
        args.objective,
        args.target,
        args.beta,
        args.lz,
        args.lpsi,
        args.kl_direction,
        args.lr,
        args.iters,
        args.batch,
        args.eval_every,
        args.val_frac,
    )?;
    let out = &args.common.out;
    resolved.config.checkpoint_dir = Some(out.clone());
    if args.snapshots {
        resolved.config.snapshot_every = Some(resolved.config.eval_every);
    }

    let mut input_paths = data_input_paths(&data_dir, &index);
    if let Some(cfg) = &args.common.config {
        input_paths.push(cfg.clone());
    }
    write_manifest(out, "train", resolved.config.seed, &input_paths, resolved.snapshot.clone())?;

    let ids: Vec<String> = domains.iter().map(|d| d.id.clone()).collect();
    let split = make_split(&ids, &resolved.target, resolved.val_frac)?;
    let outcome = trainer::train(&resolved.config, &domains, &split)?;
    trainer::write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
    outcome.best.save(&out.join("best.ckpt"))?;
    for (iter, params) in &outcome.snapshots {
        params.save(&out.join(format!("snap_{iter:07}.ckpt")))?;
    }
    println!(
        "trained {} for {} iterations; best validation accuracy {:.2}",
        resolved.config.objective, resolved.config.iterations, outcome.best_val_acc
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, _) = load_domains(&data_dir)?;
    let objective = Objective::from_str(&file.string(args.objective, "train.objective", "metavib")?)?;
    let target = file
        .string_opt(args.target, "train.target")?
        .ok_or_else(|| Error::Parameter("no --target domain given".into()))?;
    let opts = PredictOptions {
        l_z: file.usize(args.lz, "eval.lz", 10)?,
        l_psi: file.usize(args.lpsi, "eval.lpsi", 1)?,
        repeats: file.usize(args.repeats, "eval.repeats", 20)?,
        seed: file.u64(args.common.seed, "train.seed", 1)?,
        ..Default::default()
    };
    if !args.checkpoint.exists() {
        return Err(Error::Parameter(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let params = ModelParams::load(&args.checkpoint)?;
    let ids: Vec<String> = domains.iter().map(|d| d.id.clone()).collect();
    let split = make_split(&ids, &target, 0.1)?;
    let target_domain = domains
        .iter()
        .find(|d| d.id == target)
        .expect("split validated the target");
    let sources: Vec<Domain> = domains
        .iter()
        .filter(|d| split.source_domains.contains(&d.id))
        .cloned()
        .collect();
    let spec = trainer::spec_for_domains(&domains, target_domain.class_count)?;
    let records = predict(
        &params,
        &spec,
        &sources,
        &target_domain.images,
        &target_domain.labels,
        objective,
        &opts,
    )?;
    let acc = evaluation::accuracy(&records)?;
    std::fs::create_dir_all(&args.common.out)?;
    evaluation::write_uncertainty_csv(&args.common.out.join("uncertainty.csv"), &records)?;
    println!("target={target} accuracy={acc}");
    Ok(())
}

fn seeds_list(n: usize) -> Vec<u64> {
    (1..=n as u64).collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    configure_jobs(args.jobs);
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, _) = load_domains(&data_dir)?;
    let defaults = TrainConfig::default();
    let base = TrainConfig {
        beta: file.f64(args.beta, "train.beta", defaults.beta)?,
        l_z: file.usize(args.lz, "train.lz", defaults.l_z)?,
        learning_rate: file.f64(args.lr, "train.lr", defaults.learning_rate)?,
        iterations: file.usize(args.iters, "train.iters", defaults.iterations)?,
        batch_per_domain: file.usize(args.batch, "train.batch", defaults.batch_per_domain)?,
        eval_every: file.usize(args.eval_every, "train.eval_every", defaults.eval_every)?,
        ..defaults
    };
    let objectives: Vec<Objective> = match args.objectives {
        None => Objective::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| Objective::from_str(s.trim()))
            .collect::<Result<_>>()?,
    };
    let targets_text = file.string(args.targets, "ablate.targets", "all")?;
    let targets: Vec<String> = if targets_text == "all" {
        domains.iter().map(|d| d.id.clone()).collect()
    } else {
        targets_text.split(',').map(|s| s.trim().to_string()).collect()
    };
    let seeds = seeds_list(file.usize(args.seeds, "ablate.seeds", 3)?);
    let val_frac = file.f64(args.val_frac, "train.val_frac", 0.1)?;
    let eval = PredictOptions {
        repeats: file.usize(args.repeats, "eval.repeats", 20)?,
        ..Default::default()
    };
    let cells = run_ablation(&domains, &base, &objectives, &targets, &seeds, val_frac, &eval)?;
    std::fs::create_dir_all(&args.common.out)?;
    evaluation::write_ablation_csv(&args.common.out.join("ablation.csv"), &cells)?;
    for c in &cells {
        println!(
            "{:<9} {:<6} {:6.2} +- {:.2} ({} seeds)",
            c.objective.to_string(),
            c.domain,
            c.acc_mean,
            c.acc_std,
            c.seeds
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    configure_jobs(args.jobs);
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, _) = load_domains(&data_dir)?;
    let axis = SweepAxis::from_str(&args.axis)?;
    let values = parse_f64_list(&args.values)?;
    let defaults = TrainConfig::default();
    let base = TrainConfig {
        learning_rate: file.f64(args.lr, "train.lr", defaults.learning_rate)?,
        iterations: file.usize(args.iters, "train.iters", defaults.iterations)?,
        batch_per_domain: file.usize(args.batch, "train.batch", defaults.batch_per_domain)?,
        eval_every: file.usize(args.eval_every, "train.eval_every", defaults.eval_every)?,
        ..defaults
    };
    let target = file
        .string_opt(args.target, "train.target")?
        .ok_or_else(|| Error::Parameter("no --target domain given".into()))?;
    let ids: Vec<String> = domains.iter().map(|d| d.id.clone()).collect();
    let val_frac = file.f64(args.val_frac, "train.val_frac", 0.1)?;
    let split = make_split(&ids, &target, val_frac)?;
    let seeds = seeds_list(file.usize(args.seeds, "sweep.seeds", 1)?);
    let eval = PredictOptions {
        repeats: file.usize(args.repeats, "eval.repeats", 20)?,
        ..Default::default()
    };
    let cells = run_sweep(&domains, &base, axis, &values, &split, &seeds, &eval)?;
    std::fs::create_dir_all(&args.common.out)?;
    evaluation::write_sweep_csv(&args.common.out.join("sweep.csv"), &cells)?;
    for c in &cells {
        println!("{}={:<8} {:<6} {:6.2} +- {:.2}", c.axis, c.value, c.domain, c.acc_mean, c.acc_std);
    }
    Ok(())
}

fn cmd_infoplane(args: InfoplaneArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, index) = load_domains(&data_dir)?;
    let bins = file.usize(args.bins, "infoplane.bins", DEFAULT_BINS)?;
    let probe_n = file.usize(args.probe, "infoplane.probe", 256)?;
    let seed = file.u64(args.common.seed, "infoplane.seed", 1)?;

    // Collect snapshots ordered by iteration.
    let mut history: Vec<(usize, ModelParams)> = Vec::new();
    for entry in std::fs::read_dir(&args.checkpoints)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(rest) = name.strip_prefix("snap_") {
            if let Some(iter_text) = rest.strip_suffix(".ckpt") {
                if let Ok(iter) = iter_text.parse::<usize>() {
                    history.push((iter, ModelParams::load(&path)?));
                }
            }
        }
    }
    history.sort_by_key(|(iter, _)| *iter);
    if history.len() < 2 {
        return Err(Error::Parameter(format!(
            "{} holds {} snapshots; the information plane needs at least 2 \
             (train with --snapshots)",
            args.checkpoints.display(),
            history.len()
        )));
    }

    // Stratified probe batch over all domains.
    let classes = index.classes;
    let mut rng = SeedStream::new(seed);
    let per_class = probe_n.div_ceil(classes);
    let mut picks: Vec<(usize, usize)> = Vec::new(); // (domain, row)
    for class in 0..classes {
        let mut members: Vec<(usize, usize)> = Vec::new();
        for (di, d) in domains.iter().enumerate() {
            members.extend(d.class_indices(class).iter().map(|&r| (di, r)));
        }
        for p in rng.sample_without_replacement(members.len(), per_class.min(members.len())) {
            picks.push(members[p]);
        }
    }
    picks.truncate(probe_n);
    let item: usize = domains[0].images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(picks.len() * item);
    let mut labels = Vec::with_capacity(picks.len());
    for &(di, row) in &picks {
        data.extend_from_slice(&domains[di].images.data()[row * item..(row + 1) * item]);
        labels.push(domains[di].labels[row]);
    }
    let mut shape = domains[0].images.shape().to_vec();
    shape[0] = picks.len();
    let probe = Tensor::new(shape, data)?;

    let spec = trainer::spec_for_domains(&domains, classes)?;
    let rows = info_plane(&history, &spec, &probe, &labels, bins)?;
    std::fs::create_dir_all(&args.common.out)?;
    write_infoplane_csv(&args.common.out.join("infoplane.csv"), &rows)?;
    println!(
        "information plane over {} checkpoints x {} layers written",
        history.len(),
        rows.len() / history.len()
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let data_dir = resolve_data_dir(&args.common)?;
    let (domains, index) = load_domains(&data_dir)?;
    let params = ModelParams::load(&args.checkpoint)?;
    let spec = trainer::spec_for_domains(&domains, index.classes)?;
    let rows = evaluation::export_embeddings(&params, &spec, &domains)?;
    std::fs::create_dir_all(&args.common.out)?;
    evaluation::write_embeddings_csv(&args.common.out.join("embeddings.csv"), &rows)?;
    println!("wrote {} embedding rows", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train.beta": 0.5, "train.lz": 25}"#).unwrap();
        let file = ConfigFile::load(Some(&path)).unwrap();
        assert_eq!(file.f64(Some(0.25), "train.beta", 0.001).unwrap(), 0.25);
        assert_eq!(file.f64(None, "train.beta", 0.001).unwrap(), 0.5);
        assert_eq!(file.f64(None, "train.gamma", 0.001).unwrap(), 0.001);
        assert_eq!(file.usize(None, "train.lz", 10).unwrap(), 25);
        let empty = ConfigFile::load(None).unwrap();
        assert_eq!(empty.f64(None, "train.beta", 0.001).unwrap(), 0.001);
    }

    #[test]
    fn bad_config_types_are_parameter_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train.beta": "high"}"#).unwrap();
        let file = ConfigFile::load(Some(&path)).unwrap();
        assert!(matches!(
            file.f64(None, "train.beta", 0.001),
            Err(Error::Parameter(_))
        ));
        std::fs::write(&path, "[1,2]").unwrap();
        assert!(ConfigFile::load(Some(&path)).is_err());
    }

    #[test]
    fn angle_list_parsing() {
        assert_eq!(
            parse_f64_list("0, 15,30").unwrap(),
            vec![0.0, 15.0, 30.0]
        );
        assert!(parse_f64_list("0,x").is_err());
    }

    #[test]
    fn domain_files_roundtrip() {
        let mut rng = SeedStream::new(4);
        let pool = synth_glyphs(10, 12, 0.05, &mut rng).unwrap();
        let domains =
            build_rotation_domains(&pool, &[0.0, 30.0], 40, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_domains(dir.path(), &domains).unwrap();
        let (back, index) = load_domains(dir.path()).unwrap();
        assert_eq!(index.classes, 10);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, domains[0].id);
        assert_eq!(back[0].labels, domains[0].labels);
        assert_eq!(back[0].images.data(), domains[0].images.data());
        assert_eq!(back[1].angle_deg, 30.0);
    }
}
