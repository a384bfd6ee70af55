//! The `gsqa` command-line tool.
//!
//! Exit codes: 0 on success, 1 on domain or data errors, 2 on usage errors.

pub mod service;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gsqa_core::distortion::{build_manifest, BaseModel, DatasetManifest, DistortionKind, DistortionSpec, Grid};
use gsqa_core::metrics::evaluate;
use gsqa_core::net::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelParams, NetConfig};
use gsqa_core::ply::{read_ply, write_ply, Encoding};
use gsqa_core::regioning::{build_regions, save_regions, RegionConfig};
use gsqa_core::subjective::{compute_mos, export_manifest_mos, load_ratings, screen_participants, write_mos, RatingTable, ScreeningConfig};
use gsqa_core::training::{
    load_cloud_samples, load_stimuli, make_folds, predict_folds, report_from_predictions, train_fold, train_fold_resampled,
    CloudSample, EpochLog, LossConfig, Pooling, ReportOptions, Sample, TrainConfig,
};
use gsqa_core::Model64;

pub fn long_version() -> &'static str {
    concat!(
        env!("CARGO_PKG_VERSION"),
        " (",
        env!("GSQA_BUILD_TARGET"),
        ", ",
        env!("GSQA_BUILD_PROFILE"),
        " build, rustc ",
        env!("GSQA_RUSTC_VERSION"),
        ")"
    )
}

#[derive(Parser, Debug)]
#[command(name = "gsqa", version, long_version = long_version(), about = "No-reference quality assessment for 3D Gaussian Splatting models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Apply one synthetic distortion to a PLY model.
    Distort(DistortArgs),
    /// Dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Sample regions from a model and write a region file.
    Preprocess(PreprocessArgs),
    /// Train quality models on a manifest with MOS.
    Train(TrainArgs),
    /// Score a single model with a trained checkpoint.
    Predict(PredictArgs),
    /// Evaluate fold checkpoints on their held-out stimuli.
    Evaluate(EvaluateArgs),
    /// Correlation and error metrics between two score files.
    Metrics(MetricsArgs),
    /// Screen raw ratings and compute mean opinion scores.
    Mos(MosArgs),
    /// Host rating sessions over HTTP.
    Serve(ServeArgs),
    /// Print tensor shapes and the parameter count of a network.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
pub struct DistortArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// downsample, spatial_noise or color_noise.
    #[arg(long)]
    pub kind: String,
    /// Retained fraction, position sigma or SH amplitude, depending on kind.
    #[arg(long, allow_hyphen_values = true)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write ASCII instead of binary little-endian.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Generate the distortion grid over every PLY in a directory.
    Build(DatasetBuildArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GridChoice {
    /// All five kinds at three levels; reconstruction kinds as recipes only.
    Full,
    /// Only the three executable kinds.
    Synthesis,
}

#[derive(Args, Debug)]
pub struct DatasetBuildArgs {
    #[arg(long)]
    pub bases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = GridChoice::Full)]
    pub grid: GridChoice,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct RegionArgs {
    #[arg(long = "p-pre", default_value_t = 8192)]
    pub p_pre: usize,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Standardize grouping dimensions before sampling.
    #[arg(long)]
    pub standardize: bool,
}

impl RegionArgs {
    fn config(&self) -> RegionConfig {
        RegionConfig {
            p_pre: self.p_pre,
            n: self.n,
            k: self.k,
            standardize: self.standardize,
        }
    }
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub regions: RegionArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct NetArgs {
    /// Token width.
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Region-graph degree, self included.
    #[arg(long = "k-graph", default_value_t = 8)]
    pub k_graph: usize,
}

impl NetArgs {
    fn config(&self) -> NetConfig {
        NetConfig {
            d: self.d,
            heads: self.heads,
            k_graph: self.k_graph,
            ..NetConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold index, or `all` to train every fold.
    #[arg(long, default_value = "all")]
    pub fold: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint file (single fold) or directory (`all`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda2: f64,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub regions: RegionArgs,
    /// Directory for cached region files.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Redraw pre-downsampling and regions of the training stimuli every epoch.
    #[arg(long = "resample-regions")]
    pub resample_regions: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Region sampling seed (defaults to the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `fold<i>.ckpt` files and their sidecars.
    #[arg(long)]
    pub ckpts: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Average per-fold metrics instead of pooling all held-out predictions.
    #[arg(long = "per-fold-average")]
    pub per_fold_average: bool,
    /// Fit a four-parameter logistic before PLCC and RMSE.
    #[arg(long = "logistic-map")]
    pub logistic_map: bool,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// CSV of predictions: `id,value` rows, or a single value column.
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV of targets in the same layout.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long = "logistic-map")]
    pub logistic_map: bool,
}

#[derive(Args, Debug)]
pub struct MosArgs {
    /// Ratings CSV (`participant_id,stimulus_id,score,timestamp_iso8601`).
    #[arg(long)]
    pub ratings: PathBuf,
    /// Output MOS CSV (`stimulus_id,mos,n_raters`).
    #[arg(long)]
    pub out: PathBuf,
    /// Attach the scores to this manifest...
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// ...and write the result here (defaults to overwriting it).
    #[arg(long = "manifest-out")]
    pub manifest_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.5)]
    pub fence: f64,
    #[arg(long = "max-outlier-fraction", default_value_t = 0.05)]
    pub max_outlier_fraction: f64,
    #[arg(long = "min-variance", default_value_t = 1e-6)]
    pub min_variance: f64,
    #[arg(long = "extreme-fraction", default_value_t = 0.95)]
    pub extreme_fraction: f64,
    #[arg(long = "min-raters", default_value_t = 3)]
    pub min_raters: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory with `index.json` and the video files.
    #[arg(long)]
    pub stimuli: PathBuf,
    /// Ratings CSV, appended to.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, env = "GSQA_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Training stimuli when none is marked in the index.
    #[arg(long = "training-count", default_value_t = service::DEFAULT_TRAINING_COUNT)]
    pub training_count: usize,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    /// Describe a saved checkpoint instead of a fresh network.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Distort(a) => distort(a),
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Metrics(a) => metrics(a),
        Command::Mos(a) => mos(a),
        Command::Serve(a) => serve(a),
        Command::Describe(a) => describe(a),
    }
}

fn distort(a: DistortArgs) -> Result<()> {
    let kind: DistortionKind = a.kind.parse()?;
    let cloud = read_ply(&a.input)?;
    let out = DistortionSpec::new(kind, a.level, a.seed).apply(&cloud)?;
    let enc = if a.ascii { Encoding::Ascii } else { Encoding::BinaryLittleEndian };
    write_ply(&out, &a.out, enc)?;
    eprintln!("{}: {} -> {} splats", a.out.display(), cloud.len(), out.len());
    Ok(())
}

fn dataset_build(a: DatasetBuildArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.bases)
        .with_context(|| format!("reading {}", a.bases.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ply files in {}", a.bases.display());
    }
    let bases = paths
        .into_iter()
        .map(|path| {
            let cloud = read_ply(&path)?;
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            Ok(BaseModel { name, path, cloud })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = match a.grid {
        GridChoice::Full => Grid::Default,
        GridChoice::Synthesis => Grid::synthesis(),
    };
    let manifest = build_manifest(&bases, &grid, a.seed, &a.out)?;
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    eprintln!(
        "{}: {} entries ({} generated)",
        path.display(),
        manifest.entries.len(),
        manifest.executable_entries().count()
    );
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cloud = read_ply(&a.input)?;
    let batch = build_regions(&cloud, &a.regions.config(), a.seed)?;
    save_regions(&batch, &a.out)?;
    Ok(())
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn fold_checkpoint(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.ckpt"))
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let regions = a.regions.config();
    let net = a.net.config();
    net.validate()?;
    let stimuli = load_stimuli(&manifest, &manifest_dir(&a.manifest), &regions, a.seed, a.cache.as_deref())?;
    let names: Vec<String> = manifest.base_models.iter().map(|b| b.name.clone()).collect();
    let plan = make_folds(&names, a.seed)?;
    let folds: Vec<usize> = if a.fold == "all" {
        (0..plan.folds.len()).collect()
    } else {
        let f: usize = a.fold.parse().with_context(|| format!("--fold must be an index or `all`, got `{}`", a.fold))?;
        if f >= plan.folds.len() {
            bail!("fold {f} out of range (0..{})", plan.folds.len());
        }
        vec![f]
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
    };
    let bases: Vec<&str> = stimuli.iter().map(|s| s.base.as_str()).collect();
    let clouds = if a.resample_regions {
        load_cloud_samples(&manifest, &manifest_dir(&a.manifest), a.seed)?
    } else {
        Vec::new()
    };
    if a.fold == "all" {
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    }
    for f in folds {
        let path = if a.fold == "all" { fold_checkpoint(&a.out, f) } else { a.out.clone() };
        let (train_ix, test_ix) = plan.split(&bases, f)?;
        let samples: Vec<Sample> = train_ix.iter().map(|&i| stimuli[i].sample.clone()).collect();
        let log_path = PathBuf::from(format!("{}.log.jsonl", path.display()));
        let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
        writeln!(
            log,
            "{}",
            serde_json::json!({"fold": f, "train": cfg, "loss": loss, "net": net, "regions": regions,
                "resample_regions": a.resample_regions, "schedule": cfg.schedule(samples.len())})
        )?;
        eprintln!("fold {f}: {} train, {} test", samples.len(), test_ix.len());
        let mut io_err = None;
        let on_epoch = |e: &EpochLog| {
            if let Err(err) = writeln!(log, "{}", serde_json::to_string(e).unwrap()).and_then(|_| log.flush()) {
                io_err.get_or_insert(err);
            }
        };
        let outcome = if a.resample_regions {
            let subset: Vec<CloudSample> = train_ix.iter().map(|&i| clouds[i].clone()).collect();
            train_fold_resampled::<f64>(&subset, &regions, net, &cfg, &loss, on_epoch)?
        } else {
            train_fold::<f64>(&samples, net, &cfg, &loss, on_epoch)?
        };
        if let Some(e) = io_err {
            return Err(e).context("writing training log");
        }
        let meta = CheckpointMeta {
            net,
            regions,
            seed: a.seed,
            scalar: "f64".into(),
            parameter_count: outcome.model.parameter_count(),
            fold: Some(f),
        };
        save_checkpoint(&outcome.model, &meta, &path)?;
        if let Some(last) = outcome.log.last() {
            eprintln!("fold {f}: loss {:.4}, train SRCC {:?} -> {}", last.loss, last.train_srcc, path.display());
        }
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, meta): (Model64, CheckpointMeta) = load_checkpoint(&a.ckpt)?;
    let cloud = read_ply(&a.input)?;
    let batch = build_regions(&cloud, &meta.regions, a.seed.unwrap_or(meta.seed))?;
    let score = model.predict(&batch)?;
    println!("{}", serde_json::json!({ "score": score }));
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut models = Vec::new();
    let mut meta0: Option<CheckpointMeta> = None;
    for f in 0.. {
        let path = fold_checkpoint(&a.ckpts, f);
        if !path.exists() {
            break;
        }
        let (model, meta): (ModelParams<f64>, CheckpointMeta) = load_checkpoint(&path)?;
        if let Some(m0) = &meta0 {
            if m0.seed != meta.seed || m0.regions != meta.regions {
                bail!("{} was trained with a different seed or region configuration", path.display());
            }
        }
        meta0.get_or_insert(meta);
        models.push(model);
    }
    let Some(meta) = meta0 else {
        bail!("no fold0.ckpt in {}", a.ckpts.display());
    };
    let names: Vec<String> = manifest.base_models.iter().map(|b| b.name.clone()).collect();
    let plan = make_folds(&names, meta.seed)?;
    if models.len() != plan.folds.len() {
        bail!("found {} fold checkpoints, expected {}", models.len(), plan.folds.len());
    }
    let stimuli = load_stimuli(&manifest, &manifest_dir(&a.manifest), &meta.regions, meta.seed, a.cache.as_deref())?;
    let rows = predict_folds(&plan, &stimuli, &models)?;
    let opts = ReportOptions {
        pooling: if a.per_fold_average { Pooling::PerFoldAverage } else { Pooling::FoldPooled },
        logistic_map: a.logistic_map,
    };
    let report = report_from_predictions(&plan, rows, &opts)?;
    std::fs::write(&a.report, report.to_json()?).with_context(|| format!("writing {}", a.report.display()))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Reads `id,value` rows (or a single value column) from a CSV with a header.
fn read_scores(path: &Path) -> Result<(Vec<Option<String>>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let width = rdr.headers()?.len();
    let (mut ids, mut values) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (id, v) = if width >= 2 { (Some(rec[0].to_string()), &rec[1]) } else { (None, &rec[0]) };
        let v: f64 = v
            .trim()
            .parse()
            .with_context(|| format!("{}: row {} is not a number", path.display(), i + 2))?;
        ids.push(id);
        values.push(v);
    }
    Ok((ids, values))
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let (pid, pred) = read_scores(&a.pred)?;
    let (tid, target) = read_scores(&a.target)?;
    let pred = if pid.iter().all(Option::is_some) && tid.iter().all(Option::is_some) {
        let by_id: HashMap<&str, f64> = pid.iter().map(|i| i.as_deref().unwrap()).zip(pred.iter().copied()).collect();
        tid.iter()
            .map(|t| {
                let t = t.as_deref().unwrap();
                by_id.get(t).copied().with_context(|| format!("no prediction for `{t}`"))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        if pred.len() != target.len() {
            bail!("{} predictions for {} targets", pred.len(), target.len());
        }
        pred
    };
    let m = evaluate(&pred, &target, a.logistic_map)?;
    let mut out = serde_json::to_value(m)?;
    out["logistic_map"] = a.logistic_map.into();
    out["n"] = target.len().into();
    println!("{out}");
    Ok(())
}

fn mos(a: MosArgs) -> Result<()> {
    let ratings = load_ratings(&a.ratings)?;
    let table = RatingTable::from_ratings(&ratings)?;
    let cfg = ScreeningConfig {
        fence: a.fence,
        max_flagged_fraction: a.max_outlier_fraction,
        min_variance: a.min_variance,
        extreme_fraction: a.extreme_fraction,
        min_raters: a.min_raters,
    };
    let screened = screen_participants(&table, &cfg)?;
    for (p, reason) in screened.participants.iter().zip(&screened.excluded) {
        if let Some(r) = reason {
            eprintln!("excluded participant {p}: {}", serde_json::to_string(r)?.trim_matches('"'));
        }
    }
    eprintln!("{} scores flagged as outliers", screened.flags.len());
    let rows = compute_mos(&screened)?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_mos(&rows, f)?;
    if let Some(mpath) = &a.manifest {
        let manifest = DatasetManifest::load(mpath)?;
        let (updated, warnings) = export_manifest_mos(&rows, &manifest)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        updated.save(a.manifest_out.as_ref().unwrap_or(mpath))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let svc = service::Service::open(&service::ServiceConfig {
        stimuli_dir: a.stimuli,
        ratings_path: a.ratings,
        training_count: a.training_count,
    })?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        eprintln!("listening on http://{}/v1", listener.local_addr()?);
        axum::serve(listener, service::router(Arc::new(svc))).await?;
        Ok(())
    })
}

fn describe(a: DescribeArgs) -> Result<()> {
    let model: Model64 = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.0,
        None => ModelParams::new(a.net.config(), 0)?,
    };
    println!("{}", model.describe());
    Ok(())
}
