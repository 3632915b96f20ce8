//! Command-line pipeline: `gen-data`, `build-dict`, `train`, `index`, `eval`.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ann::HnswIndex;
use crate::error::{Error, Result};
use crate::eval::{run_ablation, AblationReport, AblationRow, ScoreMode, Variant};
use crate::exemplar::ExemplarDictionary;
use crate::fsutil::write_atomic;
use crate::learner::{loss_csv, ModelConfig};
use crate::levels::Level;
use crate::params::ParamStore;
use crate::pipeline::{build_indices, embed_exemplars, initial_params, make_dictionary, run_offline, run_online};
use crate::synth::{generate_dataset, Dataset, CROPS_FILE, EVAL_FILE, SCENES_FILE, TRAIN_FILE};

pub use config::{Paths, RunConfig, Stage};
pub use manifest::{RunManifest, TOOL_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OFFLINE_CHECKPOINT: &str = "offline.egcp";
pub const ONLINE_CHECKPOINT: &str = "online.egcp";
pub const REPORT_FILE: &str = "report.txt";
pub const CURVES_FILE: &str = "curves.csv";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Parser)]
#[command(name = "egcl", version, about = "Exemplar-guided contrastive proposal scoring pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and eval feature stores.
    GenData(Common),
    /// Cluster training crops into an exemplar dictionary.
    BuildDict(Common),
    /// Train the transformation offline, online, or both in sequence.
    Train {
        #[command(flatten)]
        common: Common,
        /// `online` resumes from the saved offline checkpoint
        #[arg(long, value_enum, default_value_t = PhaseArg::Both)]
        phase: PhaseArg,
    },
    /// Embed the exemplars with the final checkpoint and build one graph per level.
    Index(Common),
    /// Score the eval scenes and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Train and score the full component grid from the generated data
        /// instead of evaluating the existing checkpoint.
        #[arg(long)]
        ablation: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Offline,
    Online,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Verbatim,
    Similarity,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Sets every seed of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dictionary size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the nearest-exemplar term in the fused confidence
    #[arg(long)]
    pub mu: Option<f64>,
    /// Weight of the average-exemplar term in the fused confidence
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Contrastive weight in online training.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Whether exemplar distances enter the confidence as distances or as similarities
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Worker threads for parallel scoring and generation.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Use upstream artifacts even when their recorded config differs.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            let pipeline = cfg.pipeline().with_seed(seed);
            cfg.data = pipeline.data;
            cfg.dictionary = pipeline.dictionary;
            cfg.training = pipeline.training;
            cfg.index = pipeline.index;
        }
        if let Some(k) = self.k {
            cfg.dictionary.k = k;
        }
        if let Some(mu) = self.mu {
            cfg.scoring.mu = mu;
        }
        if let Some(lambda) = self.lambda {
            cfg.scoring.lambda = lambda;
        }
        if let Some(alpha) = self.alpha {
            cfg.contrastive.alpha = alpha;
        }
        if let Some(tau) = self.tau {
            cfg.contrastive.tau = tau;
        }
        if let Some(mode) = self.mode {
            cfg.scoring.mode = match mode {
                ModeArg::Verbatim => ScoreMode::Verbatim,
                ModeArg::Similarity => ScoreMode::Similarity,
            };
        }
    }

    /// Config file plus overrides, validated.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::GenData(c) | Command::BuildDict(c) | Command::Index(c) => c,
        Command::Train { common, .. } | Command::Eval { common, .. } => common,
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    let opts = common(cmd);
    if let Some(n) = opts.threads {
        if n == 0 {
            return Err(Error::config("cli", "threads", "must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let cfg = opts.load()?;
    let allow = opts.allow_config_mismatch;
    match cmd {
        Command::GenData(_) => gen_data(&cfg),
        Command::BuildDict(_) => build_dict(&cfg, allow),
        Command::Train { phase, .. } => train(&cfg, *phase, allow),
        Command::Index(_) => index(&cfg, allow),
        Command::Eval { ablation, .. } => eval(&cfg, *ablation, allow),
    }
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    [TRAIN_FILE, CROPS_FILE, EVAL_FILE, SCENES_FILE].map(|f| dir.join(f)).to_vec()
}

fn dictionary_manifest(cfg: &RunConfig) -> PathBuf {
    let mut p = cfg.paths.dictionary.clone().into_os_string();
    p.push(".manifest.json");
    p.into()
}

fn checkpoint_manifest(cfg: &RunConfig, checkpoint: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("{checkpoint}.manifest.json"))
}

pub fn index_file(dir: &Path, level: Level) -> PathBuf {
    dir.join(format!("index_l{}.egnx", level.id()))
}

fn load_data(cfg: &RunConfig, allow: bool) -> Result<Dataset> {
    let dir = &cfg.paths.data_dir;
    RunManifest::check_upstream(&dir.join(MANIFEST_FILE), &cfg.stage_hash(Stage::Data), allow)?;
    let (_, dataset) = Dataset::load(dir)?;
    Ok(dataset)
}

fn load_dictionary(cfg: &RunConfig, allow: bool) -> Result<ExemplarDictionary> {
    RunManifest::check_upstream(&dictionary_manifest(cfg), &cfg.stage_hash(Stage::Dictionary), allow)?;
    ExemplarDictionary::load(&cfg.paths.dictionary)
}

fn load_checkpoint(cfg: &RunConfig, name: &str, allow: bool) -> Result<ParamStore> {
    RunManifest::check_upstream(&checkpoint_manifest(cfg, name), &cfg.stage_hash(Stage::Train), allow)?;
    ParamStore::load(&cfg.paths.checkpoint_dir.join(name))
}

fn finish(
    cfg: &RunConfig,
    command: &str,
    stage: Stage,
    inputs: &[PathBuf],
    artifacts: &[PathBuf],
    manifest: &Path,
    start: Instant,
) -> Result<()> {
    let m = RunManifest::new(
        command,
        cfg.config_hash(),
        cfg.stage_hash(stage),
        inputs,
        artifacts,
        start.elapsed().as_secs_f64(),
    )?;
    m.save(manifest)?;
    log::info!("{command}: wrote {} artifact(s), manifest {}", artifacts.len(), manifest.display());
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let dataset = generate_dataset(&cfg.data)?;
    let dir = &cfg.paths.data_dir;
    dataset.save(&cfg.data, dir)?;
    finish(cfg, "gen-data", Stage::Data, &[], &data_files(dir), &dir.join(MANIFEST_FILE), start)
}

fn build_dict(cfg: &RunConfig, allow: bool) -> Result<()> {
    let start = Instant::now();
    let dataset = load_data(cfg, allow)?;
    let dict = make_dictionary(&dataset, &cfg.dictionary)?;
    log::info!(
        "dictionary: {} exemplars, occluded ratio {:.4}",
        dict.len(),
        dict.occluded_ratio()
    );
    dict.save(&cfg.paths.dictionary)?;
    finish(
        cfg,
        "build-dict",
        Stage::Dictionary,
        &data_files(&cfg.paths.data_dir),
        std::slice::from_ref(&cfg.paths.dictionary),
        &dictionary_manifest(cfg),
        start,
    )
}

fn train(cfg: &RunConfig, phase: PhaseArg, allow: bool) -> Result<()> {
    let dataset = load_data(cfg, allow)?;
    let dict = load_dictionary(cfg, allow)?;
    let dir = &cfg.paths.checkpoint_dir;
    let mut inputs = data_files(&cfg.paths.data_dir);
    inputs.push(cfg.paths.dictionary.clone());
    let pipeline = cfg.pipeline();

    let offline = if phase == PhaseArg::Online {
        None
    } else {
        let start = Instant::now();
        let init = initial_params(&pipeline, true)?;
        let (store, log) = run_offline(&init, &dataset, &dict, &pipeline)?;
        let ckpt = dir.join(OFFLINE_CHECKPOINT);
        let losses = dir.join("offline_losses.csv");
        store.save(&ckpt)?;
        write_atomic(&losses, loss_csv(&log).as_bytes())?;
        finish(
            cfg,
            "train --phase offline",
            Stage::Train,
            &inputs,
            &[ckpt, losses],
            &checkpoint_manifest(cfg, OFFLINE_CHECKPOINT),
            start,
        )?;
        Some(store)
    };
    if phase == PhaseArg::Offline {
        return Ok(());
    }
    let start = Instant::now();
    let mut online_inputs = inputs.clone();
    let init = match offline {
        Some(store) => store,
        None => {
            online_inputs.push(dir.join(OFFLINE_CHECKPOINT));
            load_checkpoint(cfg, OFFLINE_CHECKPOINT, allow)?
        }
    };
    let (store, log) = run_online(&init, &dataset, &dict, &pipeline)?;
    let ckpt = dir.join(ONLINE_CHECKPOINT);
    let losses = dir.join("online_losses.csv");
    store.save(&ckpt)?;
    write_atomic(&losses, loss_csv(&log).as_bytes())?;
    finish(
        cfg,
        "train --phase online",
        Stage::Train,
        &online_inputs,
        &[ckpt, losses],
        &checkpoint_manifest(cfg, ONLINE_CHECKPOINT),
        start,
    )
}

fn index(cfg: &RunConfig, allow: bool) -> Result<()> {
    let start = Instant::now();
    let mut dict = load_dictionary(cfg, allow)?;
    let store = load_checkpoint(cfg, ONLINE_CHECKPOINT, allow)?;
    embed_exemplars(&mut dict, &store)?;
    let indices = build_indices(&dict, &cfg.index)?;
    let dir = &cfg.paths.index_dir;
    let mut files = Vec::new();
    for (level, idx) in &indices {
        let path = index_file(dir, *level);
        idx.save(&path)?;
        files.push(path);
    }
    finish(
        cfg,
        "index",
        Stage::Index,
        &[cfg.paths.dictionary.clone(), cfg.paths.checkpoint_dir.join(ONLINE_CHECKPOINT)],
        &files,
        &dir.join(MANIFEST_FILE),
        start,
    )
}

fn load_indices(cfg: &RunConfig, allow: bool) -> Result<BTreeMap<Level, HnswIndex>> {
    let dir = &cfg.paths.index_dir;
    RunManifest::check_upstream(&dir.join(MANIFEST_FILE), &cfg.stage_hash(Stage::Index), allow)?;
    Level::ALL
        .into_iter()
        .map(|level| {
            let idx = HnswIndex::load(&index_file(dir, level))?;
            if idx.level() != level {
                return Err(Error::format("index", format!("file for level {} holds level {}", level.id(), idx.level().id())));
            }
            Ok((level, idx))
        })
        .collect()
}

fn eval(cfg: &RunConfig, ablation: bool, allow: bool) -> Result<()> {
    let start = Instant::now();
    let pipeline = cfg.pipeline();
    let dataset = load_data(cfg, allow)?;
    let mut inputs = data_files(&cfg.paths.data_dir);
    let report = if ablation {
        run_ablation(&pipeline, &dataset)?
    } else {
        let store = load_checkpoint(cfg, ONLINE_CHECKPOINT, allow)?;
        if !crate::learner::infer_config(&store).is_ok_and(|m: ModelConfig| m.transform) {
            return Err(Error::InvalidArgument("checkpoint has no transformation".into()));
        }
        let indices = load_indices(cfg, allow)?;
        inputs.push(cfg.paths.checkpoint_dir.join(ONLINE_CHECKPOINT));
        inputs.extend(Level::ALL.map(|l| index_file(&cfg.paths.index_dir, l)));
        let iou = cfg.evaluation.iou_threshold;
        let w = &cfg.scoring;
        let rows = vec![
            AblationRow::evaluate(Variant::FtOocl, &dataset.eval, &store, None, w, iou)?,
            AblationRow::evaluate(Variant::FtOoclEci, &dataset.eval, &store, Some(&indices), w, iou)?,
        ];
        AblationReport { config: pipeline, rows }
    };
    let dir = &cfg.paths.report_dir;
    let files = write_report(&report, dir)?;
    print!("{}", report.to_text()?);
    finish(
        cfg,
        if ablation { "eval --ablation" } else { "eval" },
        Stage::Eval,
        &inputs,
        &files,
        &dir.join(MANIFEST_FILE),
        start,
    )
}

/// Writes the report, plot data and timing; returns the paths written.
pub fn write_report(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let text = dir.join(REPORT_FILE);
    let curves = dir.join(CURVES_FILE);
    let timing = dir.join(TIMING_FILE);
    write_atomic(&text, report.to_text()?.as_bytes())?;
    write_atomic(&curves, report.plot_csv().as_bytes())?;
    let mut t = serde_json::to_string_pretty(&report.timing_json()).expect("json");
    t.push('\n');
    write_atomic(&timing, t.as_bytes())?;
    Ok(vec![text, curves, timing])
}
