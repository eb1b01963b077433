use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use kneefuse::baselines::{lr_fit_cv, lr_predict_record, LrConfig};
use kneefuse::cohort::{assemble_dataset, check_horizon, make_split, ClinicalStats, SplitPlan, SubjectRecord, VariableSet};
use kneefuse::evaluation::{
    average_precision, calibrated_ap, rank_settings, roc_auc, stratified_bootstrap, subgroup_report, MetricEstimate, PredictionsByHorizon, RankingTable,
    SUBGROUP_PREVALENCE,
};
use kneefuse::experiment::prepare_batch;
use kneefuse::imaging::{build_pipeline, AugmentConfig, PipelineMode, Protocol, Volume};
use kneefuse::interpret::rur_report;
use kneefuse::io::{canonical_json, load_volume, read_cohort_csv, read_vol1, save_volume, write_cohort_csv, write_vol1, ScalarType};
use kneefuse::models::{checkpoint_bytes, read_checkpoint, ArchKind, ArchSpec, Model};
use kneefuse::relaxometry::{fit_t2_volume, FitConfig, MultiEchoVolume};
use kneefuse::synth::{synth_cohort, SynthConfig};
use kneefuse::training::{derive_seed, ensemble_predict, train_cv, TrainData};
use ndarray::Ix4;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig};
use crate::CliError;

const FUSION_FIXTURE: &str = include_str!("../fixtures/fusion_means.csv");

type CliResult<T = ()> = Result<T, CliError>;

fn contract(msg: impl Into<String>) -> CliError {
    CliError::Contract(msg.into())
}

/// Canonical JSON report with the config, its hash and the seeds used.
#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    config: &'a C,
    config_hash: String,
    seeds: BTreeMap<&'a str, u64>,
    result: R,
}

fn write_report<C: Serialize, R: Serialize>(path: &Path, command: &str, config: &C, seeds: &[(&str, u64)], result: R) -> CliResult {
    let report = Report {
        command,
        config,
        config_hash: config_hash(config)?,
        seeds: seeds.iter().copied().collect(),
        result,
    };
    fs::write(path, canonical_json(&report)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    fs::write(path, canonical_json(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| contract(format!("bad list entry {t:?}: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubjectMeta {
    id: String,
    knee_center: [f64; 2],
    progressor: bool,
    latent_health: f64,
    multi_echo: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthManifest {
    subjects: Vec<SubjectMeta>,
}

/// A `synth` output directory.
struct DataDir {
    root: PathBuf,
    records: Vec<SubjectRecord>,
    centers: BTreeMap<String, [f64; 2]>,
}

impl DataDir {
    fn open(root: &Path) -> CliResult<Self> {
        let records = read_cohort_csv(fs::File::open(root.join("cohort.csv"))?)?;
        let manifest = root.join("synth.json");
        let centers = if manifest.exists() {
            let v: serde_json::Value = read_json(&manifest)?;
            let m: SynthManifest = serde_json::from_value(v["result"].clone()).map_err(|e| contract(format!("synth.json: {e}")))?;
            m.subjects.into_iter().map(|s| (s.id, s.knee_center)).collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            root: root.to_path_buf(),
            records,
            centers,
        })
    }

    fn fetch(&self, r: &SubjectRecord, p: Protocol) -> kneefuse::Result<(Volume, Option<[f64; 2]>)> {
        let rel = r
            .image_refs
            .get(&p)
            .ok_or_else(|| kneefuse::Error::Contract(format!("{}: no {p} image reference", r.id)))?;
        let v = load_volume(&self.root.join(rel), None)?;
        let center = if p == Protocol::Xr { self.centers.get(&r.id).copied() } else { None };
        Ok((v, center))
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0.15)]
    prevalence: f64,
    #[arg(long, default_value_t = 24)]
    horizon: u32,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long, default_value_t = 3.0)]
    effect_size: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n: a.n,
        prevalence: a.prevalence,
        horizon: a.horizon,
        scale: a.scale,
        effect_size: a.effect_size,
        noise: a.noise,
        ..SynthConfig::default()
    };
    let cohort = synth_cohort(&cfg, a.seed)?;
    fs::create_dir_all(a.out.join("volumes"))?;
    let mut subjects = Vec::new();
    for (r, img) in cohort.records.iter().zip(&cohort.images) {
        for (p, v) in &img.volumes {
            let rel = r
                .image_refs
                .get(p)
                .ok_or_else(|| contract(format!("{}: no reference for {p}", r.id)))?;
            save_volume(&a.out.join(rel), v)?;
        }
        let multi_echo = match &img.multi_echo {
            Some(me) => {
                let rel = format!("volumes/{}_T2ME.vol", r.id);
                write_multi_echo(&a.out.join(&rel), me)?;
                Some(rel)
            }
            None => None,
        };
        subjects.push(SubjectMeta {
            id: r.id.clone(),
            knee_center: img.knee_center,
            progressor: cohort.progressor[subjects.len()],
            latent_health: img.latent_health,
            multi_echo,
        });
    }
    write_cohort_csv(fs::File::create(a.out.join("cohort.csv"))?, &cohort.records)?;
    write_report(&a.out.join("synth.json"), "synth", &cfg, &[("cohort", a.seed)], SynthManifest { subjects })?;
    println!("wrote {} subjects to {}", cohort.records.len(), a.out.display());
    Ok(())
}

/// 4D `[row, col, slice, echo]` VOL1; the echo-axis spacing holds the echo
/// spacing in ms, so uniformly spaced echoes need no sidecar.
fn write_multi_echo(path: &Path, me: &MultiEchoVolume) -> CliResult {
    let te = me.echo_times();
    let step = te[0];
    if te.iter().enumerate().any(|(k, &t)| (t - step * (k + 1) as f64).abs() > 1e-12) {
        return Err(contract("multi-echo export needs echo times k·Δ, k = 1..n"));
    }
    let s = me.spacing();
    let f = std::io::BufWriter::new(fs::File::create(path)?);
    write_vol1(f, &me.data().clone().into_dyn(), &[s[0], s[1], s[2], step], ScalarType::F64)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FitT2Args {
    /// 4D multi-echo VOL1 file.
    #[arg(long)]
    input: PathBuf,
    /// Output T2 map (3D VOL1, f64, ms).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated echo times in ms; default k·Δ from the file's echo spacing.
    #[arg(long)]
    echo_times: Option<String>,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    /// Disable clipping of T2 to [0, 100] ms.
    #[arg(long)]
    no_clip: bool,
    /// Optional JSON summary.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct FitT2Config {
    fit: FitConfig,
    echo_times: Vec<f64>,
    input: String,
}

pub fn fit_t2(a: FitT2Args) -> CliResult {
    let raw = read_vol1(std::io::BufReader::new(fs::File::open(&a.input)?))?;
    if raw.data.ndim() != 4 {
        return Err(contract(format!("fit-t2 needs a 4D multi-echo volume, got {}D", raw.data.ndim())));
    }
    let n_echo = raw.data.shape()[3];
    let te = match &a.echo_times {
        Some(s) => parse_list::<f64>(s)?,
        None => (1..=n_echo).map(|k| k as f64 * raw.spacing[3]).collect(),
    };
    let data = raw.data.into_dimensionality::<Ix4>().expect("checked 4D");
    let me = MultiEchoVolume::new(data, te.clone(), [raw.spacing[0], raw.spacing[1], raw.spacing[2]])?;
    let cfg = FitConfig {
        tolerance: a.tolerance,
        max_iterations: a.max_iterations,
        clip_ms: if a.no_clip { None } else { FitConfig::default().clip_ms },
    };
    let map = fit_t2_volume(&me, &cfg);
    let f = std::io::BufWriter::new(fs::File::create(&a.out)?);
    write_vol1(f, &map.t2.clone().into_dyn(), &map.spacing, ScalarType::F64)?;
    let valid = map.valid_count();
    if let Some(rp) = &a.report {
        let config = FitT2Config {
            fit: cfg,
            echo_times: te,
            input: a.input.display().to_string(),
        };
        let result = serde_json::json!({
            "valid_voxels": valid,
            "total_voxels": map.t2.len(),
            "shape": map.t2.shape(),
        });
        write_report(rp, "fit-t2", &config, &[], result)?;
    }
    println!("fitted {valid}/{} voxels", map.t2.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    protocol: Protocol,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    mode: PipelineMode,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct PreprocessConfig {
    data: String,
    protocol: Protocol,
    mode: String,
    scale: f64,
    stages: Vec<&'static str>,
}

pub fn preprocess(a: PreprocessArgs) -> CliResult {
    let dd = DataDir::open(&a.data)?;
    let augment = AugmentConfig {
        rng_seed: a.seed,
        ..AugmentConfig::default()
    };
    let pipe = build_pipeline(a.protocol, a.mode, a.scale, &augment)?;
    fs::create_dir_all(&a.out)?;
    let mut shapes = BTreeMap::new();
    for (i, r) in dd.records.iter().enumerate() {
        if !r.image_refs.contains_key(&a.protocol) {
            continue;
        }
        let (v, center) = dd.fetch(r, a.protocol)?;
        let out = pipe.apply_seeded(&v, center, derive_seed(a.seed, i as u64 + 1))?;
        save_volume(&a.out.join(format!("{}_{}.vol", r.id, a.protocol.tag())), &out)?;
        shapes.insert(r.id.clone(), (out.shape().to_vec(), out.spacing().to_vec()));
    }
    let config = PreprocessConfig {
        data: a.data.display().to_string(),
        protocol: a.protocol,
        mode: format!("{:?}", a.mode).to_lowercase(),
        scale: a.scale,
        stages: pipe.stage_names(),
    };
    write_report(&a.out.join("preprocess.json"), "preprocess", &config, &[("augment", a.seed)], shapes)?;
    println!("preprocessed {} volumes", config_count(&a.out)?);
    Ok(())
}

fn config_count(dir: &Path) -> CliResult<usize> {
    Ok(fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "vol"))
        .count())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    arch: Option<ArchKind>,
    #[arg(long)]
    horizon: Option<u32>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    holdout_site: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    trf_layers: Option<usize>,
    /// Comma-separated MRI protocols for the MRI branches.
    #[arg(long)]
    mri: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn run_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        c.data = d.display().to_string();
    }
    if let Some(k) = a.arch {
        if c.arch.kind != k {
            c.arch = ArchSpec::desk(k);
        }
    }
    if let Some(m) = &a.mri {
        c.arch.mri = parse_list::<Protocol>(m)?;
    }
    if let Some(l) = a.trf_layers {
        c.arch.trf_layers = l;
    }
    if let Some(h) = a.horizon {
        c.horizon = h;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(s) = a.split_seed {
        c.split_seed = s;
    }
    if let Some(s) = &a.holdout_site {
        c.holdout_site = s.clone();
    }
    if let Some(f) = a.folds {
        c.folds = f;
    }
    if let Some(s) = a.scale {
        c.scale = s;
    }
    if let Some(e) = a.epochs {
        c.train.epochs_budget = e;
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = a.lr_peak {
        c.train.lr_peak = lr;
        c.train.lr_start = c.train.lr_start.min(lr);
    }
    c.validate()?;
    Ok(c)
}

fn seeds_of(c: &RunConfig) -> Vec<(&'static str, u64)> {
    vec![("split", c.split_seed), ("train", c.train.seed), ("eval", c.eval_seed)]
}

#[derive(Serialize, Deserialize)]
struct FoldHistory {
    fold: usize,
    best_epoch: Option<usize>,
    best_val_ap: Option<f64>,
    history: Vec<kneefuse::training::EpochRecord>,
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = run_config(&a)?;
    let dd = DataDir::open(Path::new(&cfg.data))?;
    let ds = assemble_dataset(&dd.records, cfg.horizon)?;
    let split = make_split(&ds, &cfg.holdout_site, cfg.folds, cfg.split_seed)?;
    let dev_ids = split.development_ids();
    let (dev_records, dev_labels) = ds.select(&dev_ids)?;
    let stats = ClinicalStats::fit(dev_records.iter().copied())?;
    let batch = prepare_batch(&dev_records, &cfg.arch, cfg.scale, |r, p| dd.fetch(r, p), Some(&stats))?;
    let data = TrainData::new(dev_ids, batch, dev_labels)?;
    let folds = train_cv(&data, &split, &cfg.arch, &cfg.train)?;

    fs::create_dir_all(&a.out)?;
    write_report(&a.out.join("run.json"), "train", &cfg, &seeds_of(&cfg), serde_json::json!({"folds": folds.len()}))?;
    write_json(&a.out.join("split.json"), &split)?;
    write_json(&a.out.join("clinical_stats.json"), &stats)?;
    for f in &folds {
        let dir = a.out.join(format!("fold_{}", f.fold));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("checkpoint.bin"), checkpoint_bytes(&f.checkpoint))?;
        write_json(
            &dir.join("history.json"),
            &FoldHistory {
                fold: f.fold,
                best_epoch: f.best_epoch,
                best_val_ap: f.best_val_ap(),
                history: f.history.clone(),
            },
        )?;
        println!("fold {}: best validation AP {:?}", f.fold, f.best_val_ap());
    }
    Ok(())
}

/// A trained run directory.
struct Run {
    cfg: RunConfig,
    split: SplitPlan,
    stats: ClinicalStats,
    models: Vec<Model>,
}

impl Run {
    fn open(dir: &Path) -> CliResult<Self> {
        let v: serde_json::Value = read_json(&dir.join("run.json"))?;
        let cfg: RunConfig = serde_json::from_value(v["config"].clone()).map_err(|e| contract(format!("run.json: {e}")))?;
        let split: SplitPlan = read_json(&dir.join("split.json"))?;
        let stats: ClinicalStats = read_json(&dir.join("clinical_stats.json"))?;
        let mut models = Vec::new();
        for k in 0..split.folds.len() {
            let p = dir.join(format!("fold_{k}")).join("checkpoint.bin");
            models.push(read_checkpoint(std::io::BufReader::new(fs::File::open(&p)?))?);
        }
        Ok(Self { cfg, split, stats, models })
    }

    /// Held-out inputs.
    fn test_data(&self) -> CliResult<(Vec<SubjectRecord>, TrainData)> {
        let dd = DataDir::open(Path::new(&self.cfg.data))?;
        let ds = assemble_dataset(&dd.records, self.cfg.horizon)?;
        let (recs, labels) = ds.select(&self.split.test_ids)?;
        let batch = prepare_batch(&recs, &self.cfg.arch, self.cfg.scale, |r, p| dd.fetch(r, p), Some(&self.stats))?;
        let owned = recs.into_iter().cloned().collect();
        Ok((owned, TrainData::new(self.split.test_ids.clone(), batch, labels)?))
    }
}

#[derive(Serialize)]
struct Metrics {
    roc_auc: MetricEstimate,
    average_precision: MetricEstimate,
    calibrated_ap: MetricEstimate,
    n: usize,
    positives: usize,
}

fn metrics(scores: &[f64], labels: &[u8], iters: usize, seed: u64) -> CliResult<Metrics> {
    Ok(Metrics {
        roc_auc: stratified_bootstrap(scores, labels, roc_auc, iters, seed)?,
        average_precision: stratified_bootstrap(scores, labels, average_precision, iters, seed)?,
        calibrated_ap: stratified_bootstrap(scores, labels, |s: &[f64], l: &[u8]| calibrated_ap(s, l, SUBGROUP_PREVALENCE), iters, seed)?,
        n: labels.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
    })
}

fn write_predictions(path: &Path, horizon: u32, ids: &[String], labels: &[u8], scores: &[f64]) -> CliResult {
    let mut s = String::from("horizon,id,label,score\n");
    for ((id, y), p) in ids.iter().zip(labels).zip(scores) {
        s.push_str(&format!("{horizon},{id},{y},{p}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap iterations (default from the run config).
    #[arg(long)]
    boot: Option<usize>,
    /// Bootstrap seed (default from the run config).
    #[arg(long)]
    seed: Option<u64>,
}

pub fn eval(a: EvalArgs) -> CliResult {
    let mut run = Run::open(&a.run)?;
    if let Some(b) = a.boot {
        run.cfg.bootstrap_iters = b;
    }
    if let Some(s) = a.seed {
        run.cfg.eval_seed = s;
    }
    let (_, test) = run.test_data()?;
    let scores = ensemble_predict(&run.models, &test.batch)?;
    let m = metrics(&scores, &test.labels, run.cfg.bootstrap_iters, run.cfg.eval_seed)?;
    fs::create_dir_all(&a.out)?;
    write_predictions(&a.out.join("predictions.csv"), run.cfg.horizon, &test.ids, &test.labels, &scores)?;
    println!("ROC AUC {:.4}  AP {:.4}", m.roc_auc.point, m.average_precision.point);
    write_report(&a.out.join("eval.json"), "eval", &run.cfg, &seeds_of(&run.cfg), m)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vars: VariableSet,
    #[arg(long, default_value_t = 24)]
    horizon: u32,
    #[arg(long, default_value = "D")]
    holdout_site: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct BaselineConfig {
    data: String,
    vars: VariableSet,
    horizon: u32,
    holdout_site: String,
    folds: usize,
    bootstrap_iters: usize,
    lr: LrConfig,
}

pub fn baseline(a: BaselineArgs) -> CliResult {
    check_horizon(a.horizon)?;
    let dd = DataDir::open(&a.data)?;
    let ds = assemble_dataset(&dd.records, a.horizon)?;
    let split = make_split(&ds, &a.holdout_site, a.folds, a.split_seed)?;
    let lr_cfg = LrConfig {
        l2: a.l2,
        ..LrConfig::default()
    };
    let fit = lr_fit_cv(&ds, &split, a.vars, &lr_cfg)?;
    let (test, labels) = ds.select(&split.test_ids)?;
    let scores: Vec<f64> = test
        .iter()
        .map(|r| lr_predict_record(&fit.models, r))
        .collect::<kneefuse::Result<_>>()?;
    let m = metrics(&scores, &labels, a.boot, a.eval_seed)?;
    fs::create_dir_all(&a.out)?;
    write_predictions(&a.out.join("predictions.csv"), a.horizon, &split.test_ids, &labels, &scores)?;
    println!("{} ROC AUC {:.4}  AP {:.4}  weighting {:?}", a.vars, m.roc_auc.point, m.average_precision.point, fit.chosen);
    let config = BaselineConfig {
        data: a.data.display().to_string(),
        vars: a.vars,
        horizon: a.horizon,
        holdout_site: a.holdout_site.clone(),
        folds: a.folds,
        bootstrap_iters: a.boot,
        lr: lr_cfg,
    };
    write_report(
        &a.out.join("baseline.json"),
        "baseline",
        &config,
        &[("split", a.split_seed), ("eval", a.eval_seed)],
        serde_json::json!({ "fit": fit, "metrics": m }),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Trained run directory holding the fold checkpoints.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn ablate(a: AblateArgs) -> CliResult {
    let run = Run::open(&a.run)?;
    let (_, test) = run.test_data()?;
    let report = rur_report(&run.models, &test.ids, &test.batch, &test.labels, run.cfg.horizon)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("id,label,modality,drop,rur\n");
    for s in &report.samples {
        for (m, d) in &s.drops {
            csv.push_str(&format!("{},{},{m},{d},{}\n", s.id, s.label, s.rur[m]));
        }
    }
    fs::write(a.out.join("rur.csv"), csv)?;
    for (m, ms) in &report.cohort {
        println!("{m}: RUR {:.3} ± {:.3}", ms.mean, ms.sd);
    }
    write_report(&a.out.join("rur.json"), "ablate", &run.cfg, &seeds_of(&run.cfg), &report)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct RankArgs {
    /// CSV with columns setting,metric,horizon,mean; defaults to the bundled
    /// fusion-setting table.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn rank(a: RankArgs) -> CliResult {
    let text = match &a.table {
        Some(p) => fs::read_to_string(p)?,
        None => FUSION_FIXTURE.to_string(),
    };
    let table = RankingTable::from_csv(&text)?;
    let report = rank_settings(&table)?;
    println!("{}", report.best);
    if report.tied.len() > 1 {
        println!("tied: {}", report.tied.join(","));
    }
    let mut totals: Vec<(&String, &f64)> = report.totals.iter().collect();
    totals.sort_by(|x, y| x.1.total_cmp(y.1).then(x.0.cmp(y.0)));
    for (s, t) in totals {
        println!("{s}\t{t}");
    }
    if let Some(out) = &a.out {
        let config = serde_json::json!({ "table": a.table.as_ref().map(|p| p.display().to_string()) });
        write_report(out, "rank", &config, &[], &report)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SubgroupsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prediction CSVs (horizon,id,label,score); repeat once per horizon.
    #[arg(long, required = true)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn subgroups(a: SubgroupsArgs) -> CliResult {
    let dd = DataDir::open(&a.data)?;
    let mut preds: PredictionsByHorizon = BTreeMap::new();
    for p in &a.predictions {
        let text = fs::read_to_string(p)?;
        for (n, line) in text.lines().enumerate().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || contract(format!("{}:{}: expected horizon,id,label,score", p.display(), n + 1));
            if cells.len() != 4 {
                return Err(bad());
            }
            let h: u32 = cells[0].parse().map_err(|_| bad())?;
            let y: u8 = cells[2].parse().map_err(|_| bad())?;
            let s: f64 = cells[3].parse().map_err(|_| bad())?;
            preds.entry(h).or_default().insert(cells[1].to_string(), (s, y));
        }
    }
    let rows = subgroup_report(&preds, &dd.records)?;
    let config = serde_json::json!({
        "data": a.data.display().to_string(),
        "predictions": a.predictions.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    for r in &rows {
        println!("{:?} {:?} {:?}: n={} auc={:?} cap={:?}", r.trauma, r.klg, r.symptomatic, r.n, r.roc_auc, r.calibrated_ap);
    }
    write_report(&a.out, "subgroups", &config, &[], &rows)?;
    Ok(())
}
