//! Command-line surface of `plr-osnet`.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, a missing or
//! invalid config), 1 for anything that fails at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plr_core::dataset::{parse_filename, ImageRecord};
use plr_core::evaluator::{cmc_map, distance_matrix, extract_embeddings, ranked_gallery, Metric};
use plr_core::model::PlrOsNet;
use plr_core::synthetic::make_synthetic_dataset;
use plr_core::trainer::{Event, TrainConfig, TrainState};

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crate::config::{config_hash, resolve_config};
use crate::embeddings::{write_embeddings, EvalReport};
use crate::error::{io_err, ReidError};
use crate::imageio::{load_image, save_png, FileSource};
use crate::layout::{list_images, scan_reid_dir, Layout};
use crate::render::{cam_overlays, rank_strip};
use crate::synth::write_synthetic;
use crate::trainlog::TrainLog;

/// Fallback for `--out`.
pub const OUT_ENV: &str = "PLR_OUT_DIR";
pub const LAST_CHECKPOINT: &str = "last.plrc";
pub const EVAL_JSON: &str = "eval.json";
pub const RANKS_CSV: &str = "ranks.csv";

#[derive(Parser, Debug)]
#[command(name = "plr-osnet", version, about = "Two-branch part-level person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a config file.
    Train(TrainArgs),
    /// Query/gallery retrieval scores of a checkpoint.
    Eval(EvalArgs),
    /// Dump descriptors of one subset.
    Extract(ExtractArgs),
    /// Activation-map overlays for individual images.
    VizCam(VizArgs),
    /// Top-k retrieval strips for query images.
    Rank(RankArgs),
    /// Write a synthetic dataset in the Market-1501 layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with any subset of the config fields.
    #[arg(long)]
    pub config: PathBuf,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Layout::Market1501)]
    pub layout: Layout,
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved config and parameter count, then exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Market1501)]
    pub layout: Layout,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    pub metric: MetricArg,
    /// Directory for eval.json; without it the report is only printed.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Query,
    Gallery,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Market1501)]
    pub layout: Layout,
    #[arg(long, value_enum, default_value_t = Subset::Gallery)]
    pub subset: Subset,
    /// Dump file; the sidecar CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of gallery images with Market-1501 style names.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    pub metric: MetricArg,
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(required = true)]
    pub queries: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub ids: usize,
    #[arg(long, default_value_t = 2)]
    pub cams: usize,
    #[arg(long, default_value_t = 4)]
    pub per: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(ReidError),
}

impl From<ReidError> for CliError {
    fn from(e: ReidError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<plr_core::Error> for CliError {
    fn from(e: plr_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Extract(a) => cmd_extract(a),
        Command::VizCam(a) => cmd_viz_cam(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn mkdir(dir: &Path) -> Result<(), ReidError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Config file plus overrides; any failure here is a usage error.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    if !a.config.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", a.config.display())));
    }
    let mut cfg = resolve_config(Some(&a.config), &a.set).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let d = TrainConfig::default();
    let default_schedule = (cfg.total_epochs, cfg.warmup_epochs, cfg.decay_epochs) == (d.total_epochs, d.warmup_epochs, d.decay_epochs);
    if a.layout.is_cuhk03() && default_schedule {
        cfg = cfg.with_schedule_for(true);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = train_config(&a)?;
    if a.dry_run {
        let model = PlrOsNet::<f32>::new(&cfg.model_config(), 1, cfg.seed)?;
        println!("{}", serde_json::to_string_pretty(&cfg).map_err(ReidError::from)?);
        println!("config_hash: {}", config_hash(&cfg));
        println!("parameters: {}", model.count_parameters());
        return Ok(());
    }
    let root = a.data_root.as_ref().ok_or_else(|| CliError::Usage("train needs --data-root".into()))?;
    let split = scan_reid_dir(root, a.layout)?;
    if split.num_train_identities < cfg.p {
        return Err(plr_core::Error::NotEnoughIdentities { requested: cfg.p, available: split.num_train_identities }.into());
    }
    let mut state = match &a.checkpoint {
        Some(p) => {
            let st = load_checkpoint_for(p, &cfg)?;
            if st.model.num_classes != split.num_train_identities {
                return Err(ReidError::Config(format!(
                    "checkpoint has {} classes, dataset has {}",
                    st.model.num_classes, split.num_train_identities
                ))
                .into());
            }
            st
        }
        None => TrainState::new(&cfg, split.num_train_identities)?,
    };
    mkdir(&a.out)?;
    let cfg_path = a.out.join("config.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).map_err(ReidError::from)?).map_err(io_err(&cfg_path))?;
    let mut log = TrainLog::create(&a.out, a.checkpoint.is_some())?;
    let source = FileSource { records: &split.train };
    let ckpt = a.out.join(LAST_CHECKPOINT);
    eprintln!(
        "training {} epochs from epoch {} on {} images / {} identities",
        cfg.total_epochs,
        state.epoch,
        split.train.len(),
        split.num_train_identities
    );
    while !state.finished() {
        let t0 = Instant::now();
        let mut failure = None;
        state.train_epoch(&split, &source, &mut |e| {
            let r = match e {
                Event::Step(s) => log.step(s),
                Event::EpochEnd { epoch, steps, mean_total } => {
                    eprintln!("epoch {epoch}: {steps} steps, mean loss {mean_total:.4}");
                    log.epoch(*epoch, *steps, *mean_total, t0.elapsed().as_secs_f64())
                }
            };
            if let Err(err) = r {
                failure.get_or_insert(err);
            }
        })?;
        if let Some(err) = failure {
            return Err(err.into());
        }
        save_checkpoint(&state, &ckpt)?;
    }
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(PlrOsNet<f32>, TrainConfig), ReidError> {
    let st = load_checkpoint(path)?;
    Ok((st.model, st.cfg))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (mut model, cfg) = load_model(&a.checkpoint)?;
    let split = scan_reid_dir(&a.data_root, a.layout)?;
    let q = extract_embeddings(&mut model, &FileSource { records: &split.query }, &split.query, a.batch_size, &cfg.augment)?;
    let g = extract_embeddings(&mut model, &FileSource { records: &split.gallery }, &split.gallery, a.batch_size, &cfg.augment)?;
    let metric = Metric::from(a.metric);
    let d = distance_matrix(&q, &g, metric)?;
    let r = cmc_map(&d, &q.person_ids, &q.camera_ids, &g.person_ids, &g.camera_ids, 10)?;
    let json = serde_json::to_string_pretty(&EvalReport::new(&r, metric)).map_err(ReidError::from)?;
    println!("{json}");
    if let Some(out) = &a.out {
        mkdir(out)?;
        let p = out.join(EVAL_JSON);
        fs::write(&p, json).map_err(io_err(&p))?;
    }
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let (mut model, cfg) = load_model(&a.checkpoint)?;
    let split = scan_reid_dir(&a.data_root, a.layout)?;
    let recs = match a.subset {
        Subset::Train => &split.train,
        Subset::Query => &split.query,
        Subset::Gallery => &split.gallery,
    };
    let set = extract_embeddings(&mut model, &FileSource { records: recs }, recs, a.batch_size, &cfg.augment)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let paths: Vec<String> = recs.iter().map(|r| r.path.clone()).collect();
    write_embeddings(&a.out, &set, &paths)?;
    eprintln!("{} × {} descriptors written to {}", set.len(), set.dim(), a.out.display());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn cmd_viz_cam(a: VizArgs) -> CliResult {
    let (mut model, cfg) = load_model(&a.checkpoint)?;
    mkdir(&a.out)?;
    for path in &a.images {
        let img = load_image(path)?;
        for (suffix, overlay) in cam_overlays(&mut model, &img, &cfg.augment)? {
            save_png(&a.out.join(format!("{}_{suffix}.png", stem(path))), &overlay)?;
        }
    }
    Ok(())
}

/// Records for loose image files; names must carry identity and camera.
pub fn records_for(paths: &[PathBuf]) -> Result<Vec<ImageRecord>, ReidError> {
    paths
        .iter()
        .map(|p| {
            let s = p.to_str().ok_or_else(|| ReidError::BadFilename { path: p.clone() })?;
            let (pid, cam) = parse_filename(s).map_err(|_| ReidError::BadFilename { path: p.clone() })?;
            Ok(ImageRecord { path: s.to_string(), person_id: pid, camera_id: cam, is_junk: pid == -1 })
        })
        .collect()
}

fn cmd_rank(a: RankArgs) -> CliResult {
    if a.top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let (mut model, cfg) = load_model(&a.checkpoint)?;
    let q_recs = records_for(&a.queries)?;
    let g_recs = records_for(&list_images(&a.gallery)?)?;
    let q = extract_embeddings(&mut model, &FileSource { records: &q_recs }, &q_recs, a.batch_size, &cfg.augment)?;
    let g = extract_embeddings(&mut model, &FileSource { records: &g_recs }, &g_recs, a.batch_size, &cfg.augment)?;
    let d = distance_matrix(&q, &g, a.metric.into())?;
    mkdir(&a.out)?;
    let csv_path = a.out.join(RANKS_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["query", "rank", "gallery", "distance", "correct"])?;
    for (i, qr) in q_recs.iter().enumerate() {
        let row: Vec<f64> = d.row(i).to_vec();
        let order = ranked_gallery(&row, qr.person_id, qr.camera_id, &g.person_ids, &g.camera_ids);
        let top: Vec<usize> = order.into_iter().take(a.top_k).collect();
        let correct: Vec<bool> = top.iter().map(|&j| g_recs[j].person_id == qr.person_id).collect();
        let imgs = top.iter().map(|&j| load_image(Path::new(&g_recs[j].path))).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = imgs.iter().collect();
        let strip = rank_strip(&load_image(Path::new(&qr.path))?, &refs, &correct);
        save_png(&a.out.join(format!("{}_rank.png", stem(Path::new(&qr.path)))), &strip)?;
        for (r, (&j, ok)) in top.iter().zip(&correct).enumerate() {
            w.write_record([qr.path.clone(), (r + 1).to_string(), g_recs[j].path.clone(), row[j].to_string(), ok.to_string()])?;
        }
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let set = make_synthetic_dataset(a.ids, a.cams, a.per, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    mkdir(&a.out)?;
    let rows = write_synthetic(&a.out, &set)?;
    eprintln!("{} images written under {}", rows.len(), a.out.display());
    Ok(())
}
