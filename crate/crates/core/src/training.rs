//! Correlation losses, the optimizer and step schedule, and the k-fold
//! benchmark protocol.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{entry_seed, rng, splitmix64, DatasetManifest, DistortionCategory, DistortionKind};
use crate::error::{domain, Error, Result};
use crate::metrics::{evaluate, MetricSet};
use crate::net::{Gradients, ModelParams, NetConfig};
use crate::ply::read_ply;
use crate::regioning::{build_regions, load_regions, save_regions, RegionBatch, RegionConfig};
use crate::scalar::Scalar;
use crate::splat::GaussianCloud;

/// Below this product of standard deviations the correlation term is taken as 0.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

/// A loss value with its gradient w.r.t. the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn check_batch<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(domain!("{} predictions for {} targets", pred.len(), target.len()));
    }
    if pred.len() < 2 {
        return Err(domain!("loss needs a batch of at least 2, got {}", pred.len()));
    }
    Ok(())
}

/// `1 − Pearson(ŷ, y)`; 1 with zero gradient when either side is (nearly) constant.
pub fn loss_lin<T: Scalar>(pred: &[T], target: &[T]) -> Result<Loss<T>> {
    check_batch(pred, target)?;
    let b = T::from_usize(pred.len()).unwrap();
    let mp = pred.iter().copied().sum::<T>() / b;
    let mt = target.iter().copied().sum::<T>() / b;
    let a: Vec<T> = pred.iter().map(|&v| v - mp).collect();
    let c: Vec<T> = target.iter().map(|&v| v - mt).collect();
    let sxx: T = a.iter().map(|&v| v * v).sum();
    let syy: T = c.iter().map(|&v| v * v).sum();
    let sxy: T = a.iter().zip(&c).map(|(&x, &y)| x * y).sum();
    let denom = (sxx * syy).sqrt();
    if denom / b < T::lit(DEGENERATE_SPREAD) {
        return Ok(Loss {
            value: T::one(),
            grad: vec![T::zero(); pred.len()],
        });
    }
    let r = (sxy / denom).max(-T::one()).min(T::one());
    let grad = a.iter().zip(&c).map(|(&ai, &ci)| -(ci / denom - r * ai / sxx)).collect();
    Ok(Loss {
        value: T::one() - r,
        grad,
    })
}

/// `(1/B²) Σᵢ Σⱼ 1(yᵢ > yⱼ) · max(0, 1 − (ŷᵢ − ŷⱼ))`, subgradient 0 at the hinge.
pub fn loss_mon<T: Scalar>(pred: &[T], target: &[T]) -> Result<Loss<T>> {
    check_batch(pred, target)?;
    let n = pred.len();
    let w = T::one() / T::from_usize(n * n).unwrap();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            if target[i] > target[j] {
                let h = T::one() - (pred[i] - pred[j]);
                if h > T::zero() {
                    value += h;
                    grad[i] -= w;
                    grad[j] += w;
                }
            }
        }
    }
    Ok(Loss { value: value * w, grad })
}

pub fn loss_total<T: Scalar>(pred: &[T], target: &[T], cfg: &LossConfig) -> Result<Loss<T>> {
    let lin = loss_lin(pred, target)?;
    let mon = loss_mon(pred, target)?;
    let (l1, l2) = (T::lit(cfg.lambda1), T::lit(cfg.lambda2));
    Ok(Loss {
        value: l1 * lin.value + l2 * mon.value,
        grad: lin.grad.iter().zip(&mon.grad).map(|(&a, &b)| l1 * a + l2 * b).collect(),
    })
}

/// One-cycle step size: cosine rise from `peak/div` to `peak` over the first
/// `pct_start` of the steps, then cosine decay to `peak/final_div` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn initial(&self) -> f64 {
        self.peak / self.div
    }

    pub fn last(&self) -> f64 {
        self.peak / self.final_div
    }

    pub fn lr(&self, step: usize) -> f64 {
        let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos()) / 2.0;
        let t = step as f64;
        let warm = self.pct_start * self.total_steps as f64;
        let end = self.total_steps.saturating_sub(1) as f64;
        if t <= warm {
            if warm <= 0.0 {
                return self.peak;
            }
            cos_interp(self.initial(), self.peak, t / warm)
        } else if end > warm {
            cos_interp(self.peak, self.last(), (t - warm) / (end - warm))
        } else {
            self.last()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            peak_lr: 1e-4,
            weight_decay: 1e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 25.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.pct_start) || self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return Err(Error::Config("invalid one-cycle parameters".into()));
        }
        Ok(())
    }

    /// Optimizer steps per epoch for `n` training stimuli (short final batches dropped).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let full = n / self.batch_size;
        if n % self.batch_size >= 2 {
            full + 1
        } else {
            full
        }
    }

    pub fn schedule(&self, n: usize) -> OneCycle {
        OneCycle {
            peak: self.peak_lr,
            total_steps: self.epochs * self.steps_per_epoch(n),
            pct_start: self.pct_start,
            div: self.div_factor,
            final_div: self.final_div_factor,
        }
    }
}

/// Adam moments with decoupled weight decay.
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        let zeros = || model.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut ModelParams<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, decay, eps) = (T::lit(lr), T::one() - T::lit(lr * self.weight_decay), T::lit(self.eps));
        for (ti, t) in model.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &grads.0[ti]);
            for i in 0..t.data.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                t.data[i] = t.data[i] * decay - lr * update;
            }
        }
        model.touch();
    }
}

/// A preprocessed stimulus with its target score.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub regions: RegionBatch,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Step size of the epoch's last update.
    pub lr: f64,
    /// Correlations of the predictions made while stepping through the epoch.
    pub train_plcc: Option<f64>,
    pub train_srcc: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    pub log: Vec<EpochLog>,
}

/// Scores every sample (in parallel, order preserved).
pub fn predict_all<T: Scalar>(model: &ModelParams<T>, batches: &[&RegionBatch]) -> Result<Vec<f64>> {
    batches.par_iter().map(|b| model.predict(b).map(|v| v.to_f64_lossy())).collect()
}

/// Loss, predictions and parameter gradients for one optimizer step.
pub struct BatchStep<T> {
    pub loss: T,
    pub predictions: Vec<T>,
    pub grads: Gradients<T>,
}

/// Evaluates one batch. Members run in parallel; gradients are summed in batch order.
pub fn batch_gradients<T: Scalar>(model: &ModelParams<T>, batch: &[&Sample], loss: &LossConfig) -> Result<BatchStep<T>> {
    let caches = batch.par_iter().map(|s| model.forward(&s.regions)).collect::<Result<Vec<_>>>()?;
    let pred: Vec<T> = caches.iter().map(|c| c.score).collect();
    let target: Vec<T> = batch.iter().map(|s| T::lit(s.mos)).collect();
    let l = loss_total(&pred, &target, loss)?;
    let partial = caches
        .par_iter()
        .zip(&l.grad)
        .map(|(c, &g)| {
            let mut grads = Gradients::zeros_like(model);
            if g != T::zero() {
                model.backward_into(c, g, &mut grads)?;
            }
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros_like(model);
    for g in &partial {
        total.add_assign(g);
    }
    Ok(BatchStep {
        loss: l.value,
        predictions: pred,
        grads: total,
    })
}

/// Trains a fresh model on `train`, calling `on_epoch` after every epoch.
pub fn train_fold<T: Scalar>(
    train: &[Sample],
    net: NetConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    run_epochs(train.len(), |_| Ok(None), train, net, cfg, loss, on_epoch)
}

/// A training stimulus kept as a cloud so its regions can be redrawn.
#[derive(Debug, Clone)]
pub struct CloudSample {
    pub id: String,
    pub cloud: GaussianCloud,
    /// Seed of the first epoch's regions; later epochs derive theirs from it.
    pub region_seed: u64,
    pub mos: f64,
}

/// Like [`train_fold`], but rebuilds every stimulus's regions (pre-downsampling
/// included) at the start of each epoch. Epoch 0 uses each `region_seed` as is.
pub fn train_fold_resampled<T: Scalar>(
    train: &[CloudSample],
    regions: &RegionConfig,
    net: NetConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    let draw = |epoch: usize| {
        train
            .par_iter()
            .map(|c| {
                let seed = if epoch == 0 { c.region_seed } else { entry_seed(c.region_seed, epoch as u64) };
                Ok(Sample {
                    id: c.id.clone(),
                    regions: build_regions(&c.cloud, regions, seed)?,
                    mos: c.mos,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    run_epochs(train.len(), draw, &[], net, cfg, loss, on_epoch)
}

/// The shared loop; `redraw(epoch)` may replace `fixed` for that epoch.
fn run_epochs<T: Scalar>(
    count: usize,
    redraw: impl Fn(usize) -> Result<Option<Vec<Sample>>>,
    fixed: &[Sample],
    net: NetConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if count == 0 {
        return Err(domain!("training set is empty"));
    }
    cfg.validate()?;
    if cfg.steps_per_epoch(count) == 0 {
        return Err(domain!("{count} training stimuli cannot fill a batch of at least 2"));
    }
    let mut model = ModelParams::<T>::new(net, cfg.seed)?;
    let mut opt = AdamW::new(&model, cfg);
    let schedule = cfg.schedule(count);
    let mut shuffle_rng = rng(splitmix64(cfg.seed));
    let mut order: Vec<usize> = (0..count).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let fresh = redraw(epoch)?;
        let train = fresh.as_deref().unwrap_or(fixed);
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut batches, mut lr) = (0.0, 0, 0.0);
        let (mut pred, mut targets) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let members: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let step_out = batch_gradients(&model, &members, loss)?;
            lr = schedule.lr(step);
            opt.step(&mut model, &step_out.grads, lr);
            step += 1;
            sum += step_out.loss.to_f64_lossy();
            batches += 1;
            pred.extend(step_out.predictions.iter().map(|v| v.to_f64_lossy()));
            targets.extend(members.iter().map(|s| s.mos));
        }
        let entry = EpochLog {
            epoch,
            loss: sum / batches as f64,
            lr,
            train_plcc: crate::metrics::plcc(&pred, &targets).ok(),
            train_srcc: crate::metrics::srcc(&pred, &targets).ok(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Base models partitioned into disjoint folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

pub const FOLDS: usize = 5;

/// Seeded partition of `names` into five equally sized folds.
pub fn make_folds(names: &[String], seed: u64) -> Result<FoldPlan> {
    if names.is_empty() || names.len() % FOLDS != 0 {
        return Err(domain!("{} base models cannot be split into {FOLDS} equal folds", names.len()));
    }
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(domain!("duplicate base model names"));
    }
    let mut shuffled = names.to_vec();
    shuffled.shuffle(&mut rng(seed));
    let per = names.len() / FOLDS;
    Ok(FoldPlan {
        folds: shuffled.chunks(per).map(|c| c.to_vec()).collect(),
    })
}

impl FoldPlan {
    pub fn fold_of(&self, base: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|b| b == base))
    }

    /// `(train, test)` index lists into `bases` for fold `fold`.
    pub fn split(&self, bases: &[&str], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, b) in bases.iter().enumerate() {
            match self.fold_of(b) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(Error::Data(format!("base model `{b}` is not in the fold plan"))),
            }
        }
        Ok((train, test))
    }
}

/// A benchmark stimulus: a generated model with a known score.
#[derive(Debug, Clone)]
pub struct Stimulus {
    pub id: String,
    pub base: String,
    pub kind: DistortionKind,
    pub sample: Sample,
}

/// Loads and preprocesses every stimulus of `manifest` that has a model file.
/// Region batches are cached under `cache_dir` when given.
pub fn load_stimuli(
    manifest: &DatasetManifest,
    dir: &Path,
    regions: &RegionConfig,
    region_seed: u64,
    cache_dir: Option<&Path>,
) -> Result<Vec<Stimulus>> {
    let mos = manifest.mos.as_ref();
    let missing: Vec<&str> = manifest
        .executable_entries()
        .filter(|e| mos.map_or(true, |m| !m.contains_key(&e.id)))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing MOS for stimuli: {}", missing.join(", "))));
    }
    let mos = mos.cloned().unwrap_or_default();
    if let Some(c) = cache_dir {
        std::fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
    }
    manifest
        .entries
        .par_iter()
        .enumerate()
        .filter(|(_, e)| e.output.is_some())
        .map(|(i, e)| {
            let seed = entry_seed(region_seed, i as u64);
            let tag = format!(
                "p{}-n{}-k{}{}-s{seed:016x}",
                regions.p_pre,
                regions.n,
                regions.k,
                if regions.standardize { "-std" } else { "" }
            );
            let cached = cache_dir.map(|c| c.join(format!("{}.{tag}.gsrb", e.id)));
            let batch = match &cached {
                Some(p) if p.exists() => load_regions(p)?,
                _ => {
                    let cloud = read_ply(dir.join(e.output.as_ref().unwrap()))?;
                    let b = build_regions(&cloud, regions, seed)?;
                    if let Some(p) = &cached {
                        save_regions(&b, p)?;
                    }
                    b
                }
            };
            Ok(Stimulus {
                id: e.id.clone(),
                base: e.base.clone(),
                kind: e.spec.kind,
                sample: Sample {
                    id: e.id.clone(),
                    regions: batch,
                    mos: mos[&e.id],
                },
            })
        })
        .collect()
}

/// The stimuli of [`load_stimuli`] as clouds, in the same order, for
/// per-epoch region resampling.
pub fn load_cloud_samples(manifest: &DatasetManifest, dir: &Path, region_seed: u64) -> Result<Vec<CloudSample>> {
    let mos = manifest.mos.as_ref();
    manifest
        .entries
        .par_iter()
        .enumerate()
        .filter(|(_, e)| e.output.is_some())
        .map(|(i, e)| {
            let mos = mos
                .and_then(|m| m.get(&e.id))
                .copied()
                .ok_or_else(|| Error::Data(format!("missing MOS for stimuli: {}", e.id)))?;
            Ok(CloudSample {
                id: e.id.clone(),
                cloud: read_ply(dir.join(e.output.as_ref().unwrap()))?,
                region_seed: entry_seed(region_seed, i as u64),
                mos,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub base: String,
    pub kind: DistortionKind,
    pub fold: usize,
    pub predicted: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FoldPooled,
    PerFoldAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub pooling: Pooling,
    pub logistic_map: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            pooling: Pooling::FoldPooled,
            logistic_map: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBlock {
    pub category: String,
    pub count: usize,
    /// `None` when the category has too few stimuli or a degenerate spread.
    pub metrics: Option<MetricSet>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pooling: Pooling,
    pub logistic_map: bool,
    pub overall: MetricSet,
    pub per_type: Vec<CategoryBlock>,
    pub folds: Vec<Vec<String>>,
    pub predictions: Vec<PredictionRow>,
}

fn metrics_for(rows: &[&PredictionRow], opts: &ReportOptions) -> Result<MetricSet> {
    let eval_rows = |rows: &[&PredictionRow]| {
        let p: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.mos).collect();
        evaluate(&p, &y, opts.logistic_map)
    };
    match opts.pooling {
        Pooling::FoldPooled => eval_rows(rows),
        Pooling::PerFoldAverage => {
            let mut by_fold: BTreeMap<usize, Vec<&PredictionRow>> = BTreeMap::new();
            for r in rows {
                by_fold.entry(r.fold).or_default().push(r);
            }
            let sets: Vec<MetricSet> = by_fold.values().filter_map(|v| eval_rows(v).ok()).collect();
            if sets.is_empty() {
                return Err(Error::UndefinedMetric("no fold has defined metrics".into()));
            }
            let k = sets.len() as f64;
            Ok(MetricSet {
                plcc: sets.iter().map(|s| s.plcc).sum::<f64>() / k,
                srcc: sets.iter().map(|s| s.srcc).sum::<f64>() / k,
                krcc: sets.iter().map(|s| s.krcc).sum::<f64>() / k,
                rmse: sets.iter().map(|s| s.rmse).sum::<f64>() / k,
            })
        }
    }
}

/// Builds the report from held-out predictions.
pub fn report_from_predictions(plan: &FoldPlan, predictions: Vec<PredictionRow>, opts: &ReportOptions) -> Result<EvalReport> {
    let all: Vec<&PredictionRow> = predictions.iter().collect();
    let overall = metrics_for(&all, opts)?;
    let per_type = DistortionCategory::ALL
        .iter()
        .map(|&cat| {
            let rows: Vec<&PredictionRow> = predictions.iter().filter(|r| r.kind.category() == cat).collect();
            let (metrics, note) = match metrics_for(&rows, opts) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CategoryBlock {
                category: cat.label().to_string(),
                count: rows.len(),
                metrics,
                note,
            }
        })
        .collect();
    Ok(EvalReport {
        pooling: opts.pooling,
        logistic_map: opts.logistic_map,
        overall,
        per_type,
        folds: plan.folds.clone(),
        predictions,
    })
}

/// Held-out predictions of `models[f]` on the test stimuli of fold `f`.
pub fn predict_folds<T: Scalar>(plan: &FoldPlan, stimuli: &[Stimulus], models: &[ModelParams<T>]) -> Result<Vec<PredictionRow>> {
    if models.len() != plan.folds.len() {
        return Err(Error::Contract(format!("{} models for {} folds", models.len(), plan.folds.len())));
    }
    let bases: Vec<&str> = stimuli.iter().map(|s| s.base.as_str()).collect();
    let mut rows = Vec::with_capacity(stimuli.len());
    for (f, model) in models.iter().enumerate() {
        let (_, test) = plan.split(&bases, f)?;
        let batches: Vec<&RegionBatch> = test.iter().map(|&i| &stimuli[i].sample.regions).collect();
        let pred = predict_all(model, &batches)?;
        for (&i, p) in test.iter().zip(pred) {
            let s = &stimuli[i];
            rows.push(PredictionRow {
                id: s.id.clone(),
                base: s.base.clone(),
                kind: s.kind,
                fold: f,
                predicted: p,
                mos: s.sample.mos,
            });
        }
    }
    let order: HashMap<&str, usize> = stimuli.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    rows.sort_by_key(|r| order[r.id.as_str()]);
    Ok(rows)
}

pub struct BenchmarkConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub report: ReportOptions,
    /// Seed of the fold partition.
    pub fold_seed: u64,
}

/// Trains one model per fold (folds in parallel) and evaluates the pooled
/// held-out predictions.
pub fn run_benchmark<T: Scalar>(stimuli: &[Stimulus], cfg: &BenchmarkConfig) -> Result<(EvalReport, Vec<ModelParams<T>>)> {
    let mut names: Vec<String> = stimuli.iter().map(|s| s.base.clone()).collect();
    names.sort();
    names.dedup();
    let plan = make_folds(&names, cfg.fold_seed)?;
    let bases: Vec<&str> = stimuli.iter().map(|s| s.base.as_str()).collect();
    let models = (0..plan.folds.len())
        .into_par_iter()
        .map(|f| {
            let (train, _) = plan.split(&bases, f)?;
            let samples: Vec<Sample> = train.iter().map(|&i| stimuli[i].sample.clone()).collect();
            Ok(train_fold::<T>(&samples, cfg.net, &cfg.train, &cfg.loss, |_| {})?.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = predict_folds(&plan, stimuli, &models)?;
    Ok((report_from_predictions(&plan, rows, &cfg.report)?, models))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mode = match self.pooling {
            Pooling::FoldPooled => "fold-pooled",
            Pooling::PerFoldAverage => "per-fold average",
        };
        let mapping = if self.logistic_map { "logistic-mapped" } else { "raw" };
        let _ = writeln!(out, "{} stimuli, {mode}, {mapping} predictions", self.predictions.len());
        let _ = writeln!(out, "{:<26} {:>5} {:>8} {:>8} {:>8} {:>8}", "", "n", "PLCC", "SRCC", "KRCC", "RMSE");
        let mut line = |name: &str, n: usize, m: Option<&MetricSet>| {
            let _ = match m {
                Some(m) => writeln!(out, "{name:<26} {n:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", m.plcc, m.srcc, m.krcc, m.rmse),
                None => writeln!(out, "{name:<26} {n:>5} {:>8} {:>8} {:>8} {:>8}", "-", "-", "-", "-"),
            };
        };
        line("Overall", self.predictions.len(), Some(&self.overall));
        for b in &self.per_type {
            line(&b.category, b.count, b.metrics.as_ref());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lin_cases() {
        let y = [1.0, 2.0, 4.0, 3.5];
        let affine: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!(loss_lin(&affine, &y).unwrap().value.abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((loss_lin(&neg, &y).unwrap().value - 2.0).abs() < 1e-12);
        let flat = loss_lin(&[2.0; 4], &y).unwrap();
        assert_eq!(flat.value, 1.0);
        assert!(flat.grad.iter().all(|&g| g == 0.0));
        assert!(loss_lin(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mon_cases() {
        assert_eq!(loss_mon(&[1.5, 1.2], &[2.0, 1.0]).unwrap().value, (1.0 - (1.5 - 1.2)) / 4.0);
        assert_eq!(loss_mon(&[3.0, 1.0, -1.0], &[3.0, 2.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(loss_mon(&[0.3, 2.0, -1.0], &[2.0, 2.0, 2.0]).unwrap().value, 0.0);
        // exactly on the hinge: zero subgradient
        assert_eq!(loss_mon(&[2.0, 1.0], &[1.0, 0.0]).unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn total_combines() {
        let (p, y) = ([0.1, 0.9, 0.4], [1.0, 3.0, 2.0]);
        let cfg = LossConfig { lambda1: 0.5, lambda2: 0.0 };
        let t = loss_total(&p, &y, &cfg).unwrap();
        assert_eq!(t.value, 0.5 * loss_lin(&p, &y).unwrap().value);
    }

    #[test]
    fn schedule_trace() {
        let s = OneCycle {
            peak: 1e-4,
            total_steps: 100,
            pct_start: 0.3,
            div: 25.0,
            final_div: 25.0,
        };
        assert!((s.lr(0) - 4e-6).abs() < 1e-18);
        assert!((s.lr(30) - 1e-4).abs() < 1e-18);
        assert!(s.lr(99) <= 4e-6 + 1e-18);
        for t in 0..30 {
            assert!(s.lr(t) < s.lr(t + 1));
        }
        for t in 30..99 {
            assert!(s.lr(t) > s.lr(t + 1));
        }
    }

    #[test]
    fn steps_per_epoch_drops_singletons() {
        let c = TrainConfig {
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(c.steps_per_epoch(30), 4);
        assert_eq!(c.steps_per_epoch(25), 3);
        assert_eq!(c.steps_per_epoch(1), 0);
    }

    #[test]
    fn folds_partition() {
        let names: Vec<String> = (0..15).map(|i| format!("b{i}")).collect();
        let p = make_folds(&names, 7).unwrap();
        assert_eq!(p.folds.len(), 5);
        assert!(p.folds.iter().all(|f| f.len() == 3));
        let mut all: Vec<String> = p.folds.concat();
        all.sort();
        let mut expect = names.clone();
        expect.sort();
        assert_eq!(all, expect);
        assert_eq!(p, make_folds(&names, 7).unwrap());
        assert!(make_folds(&names[..14], 7).is_err());
    }

    #[test]
    fn resampling_redraws_after_the_first_epoch() {
        use crate::net::encode_checkpoint;
        use crate::synthetic::{procedural_cloud, Shape};
        let regions = RegionConfig { p_pre: 64, n: 4, k: 4, standardize: false };
        let clouds: Vec<CloudSample> = (0..4)
            .map(|i| CloudSample {
                id: i.to_string(),
                cloud: procedural_cloud(Shape::Sphere, 300, i),
                region_seed: 10 + i,
                mos: 1.0 + i as f64,
            })
            .collect();
        let fixed: Vec<Sample> = clouds
            .iter()
            .map(|c| Sample { id: c.id.clone(), regions: build_regions(&c.cloud, &regions, c.region_seed).unwrap(), mos: c.mos })
            .collect();
        let net = NetConfig { d: 8, heads: 2, ffn_mult: 2, k_graph: 2, blocks: 1, head_bias_init: 3.0 };
        let loss = LossConfig::default();
        let run = |epochs| {
            let cfg = TrainConfig { epochs, batch_size: 4, ..Default::default() };
            let a = train_fold::<f64>(&fixed, net, &cfg, &loss, |_| {}).unwrap().model;
            let b = train_fold_resampled::<f64>(&clouds, &regions, net, &cfg, &loss, |_| {}).unwrap().model;
            (encode_checkpoint(&a), encode_checkpoint(&b))
        };
        let (a, b) = run(1);
        assert_eq!(a, b);
        let (a, b) = run(3);
        assert_ne!(a, b);
    }
}
