//! Glue from cohorts and volumes to model inputs, plus the held-out
//! evaluation loop shared by the CLI and the end-to-end tests.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{lr_fit_cv, lr_predict_record, LrConfig};
use crate::cohort::{assemble_dataset, encode_clinical, make_split, ClinicalStats, Dataset, SplitPlan, SubjectRecord, VariableSet};
use crate::error::{contract, Result};
use crate::evaluation::{average_precision, roc_auc};
use crate::imaging::{build_pipeline, AugmentConfig, PipelineMode, Protocol, Volume};
use crate::models::{stack_mri, stack_xr, ArchSpec, ModalityBatch, Model};
use crate::synth::SynthCohort;
use crate::training::{ensemble_predict, train_cv, EpochRecord, TrainConfig, TrainData};

/// Eval-mode preprocessing of one acquisition.
pub fn preprocess(protocol: Protocol, v: &Volume, knee_center: Option<[f64; 2]>, scale: f64) -> Result<Volume> {
    build_pipeline(protocol, PipelineMode::Eval, scale, &AugmentConfig::default())?.apply(v, knee_center)
}

/// Protocols an architecture reads from disk.
pub fn image_protocols(spec: &ArchSpec) -> Vec<Protocol> {
    let mut p = Vec::new();
    if spec.kind.uses_xr() {
        p.push(Protocol::Xr);
    }
    p.extend(spec.mri.iter().copied());
    p
}

/// Stacks per-subject preprocessed volumes (and optional clinical rows)
/// into a batch for `spec`.
pub fn assemble_batch(spec: &ArchSpec, volumes: &[BTreeMap<Protocol, Volume>], clinical: Option<&[Vec<f64>]>) -> Result<ModalityBatch> {
    let mut batch = ModalityBatch::default();
    let gather = |p: Protocol| -> Result<Vec<&Volume>> {
        volumes
            .iter()
            .enumerate()
            .map(|(i, m)| m.get(&p).ok_or_else(|| contract(format!("subject {i} lacks {p}"))))
            .collect()
    };
    if spec.kind.uses_xr() {
        batch.xr = Some(stack_xr(&gather(Protocol::Xr)?)?);
    }
    for &p in &spec.mri {
        batch.mri.insert(p, stack_mri(&gather(p)?)?);
    }
    if spec.kind.uses_clinical() {
        let rows = clinical.ok_or_else(|| contract(format!("{} needs clinical rows", spec.kind)))?;
        if rows.len() != volumes.len() || rows.iter().any(|r| r.len() != spec.clinical_dim) {
            return Err(contract(format!("clinical rows must be {} × {}", volumes.len(), spec.clinical_dim)));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        batch.clinical = Some(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[rows.len(), spec.clinical_dim]), flat).expect("checked"));
    }
    Ok(batch)
}

/// Variable set whose width matches a clinical branch of `dim` inputs.
pub fn clinical_set_for(dim: usize) -> Result<VariableSet> {
    [VariableSet::C1, VariableSet::C2, VariableSet::C3, VariableSet::C4]
        .into_iter()
        .find(|s| s.dim() == dim)
        .ok_or_else(|| contract(format!("no clinical variable set has width {dim}")))
}

/// Preprocesses every subject's acquisitions for `spec` (in parallel) and
/// stacks them into a batch. `fetch` returns the raw volume and, for
/// radiographs, the knee center in pixels.
pub fn prepare_batch<F>(records: &[&SubjectRecord], spec: &ArchSpec, scale: f64, fetch: F, stats: Option<&ClinicalStats>) -> Result<ModalityBatch>
where
    F: Fn(&SubjectRecord, Protocol) -> Result<(Volume, Option<[f64; 2]>)> + Sync,
{
    let protocols = image_protocols(spec);
    let vols: Vec<BTreeMap<Protocol, Volume>> = records
        .par_iter()
        .map(|r| {
            protocols
                .iter()
                .map(|&p| {
                    let (v, center) = fetch(r, p)?;
                    Ok((p, preprocess(p, &v, center, scale)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let clinical = if spec.kind.uses_clinical() {
        let s = stats.ok_or_else(|| contract(format!("{} needs clinical statistics", spec.kind)))?;
        let set = clinical_set_for(spec.clinical_dim)?;
        Some(records.iter().map(|r| encode_clinical(r, s, set)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    assemble_batch(spec, &vols, clinical.as_deref())
}

/// Model inputs for `ids` of a synthetic cohort.
pub fn synth_train_data(cohort: &SynthCohort, ds: &Dataset, ids: &[String], spec: &ArchSpec, stats: Option<&ClinicalStats>) -> Result<TrainData> {
    let (records, labels) = ds.select(ids)?;
    let fetch = |r: &SubjectRecord, p: Protocol| {
        let i = cohort
            .records
            .iter()
            .position(|c| c.id == r.id)
            .ok_or_else(|| contract(format!("{} not in cohort", r.id)))?;
        let img = &cohort.images[i];
        let v = img
            .volumes
            .get(&p)
            .ok_or_else(|| contract(format!("{}: no {p} volume", r.id)))?;
        Ok((v.clone(), (p == Protocol::Xr).then_some(img.knee_center)))
    };
    let batch = prepare_batch(&records, spec, cohort.config.scale, fetch, stats)?;
    TrainData::new(ids.to_vec(), batch, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub horizon: u32,
    pub holdout_site: String,
    pub folds: usize,
    pub split_seed: u64,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub baseline_vars: VariableSet,
    pub baseline: LrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_dev: usize,
    pub n_test: usize,
    pub test_positives: usize,
    pub model_auc: f64,
    pub model_ap: f64,
    pub baseline_auc: f64,
    pub baseline_ap: f64,
    pub best_val_ap: Vec<Option<f64>>,
    pub histories: Vec<Vec<EpochRecord>>,
    pub test_ids: Vec<String>,
    pub model_scores: Vec<f64>,
    pub baseline_scores: Vec<f64>,
}

pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub split: SplitPlan,
    pub models: Vec<Model>,
}

/// Site-holdout split, CV training with fold ensembling, and the clinical
/// logistic baseline on the same folds, all scored on the held-out site.
pub fn run_experiment(cohort: &SynthCohort, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ds = assemble_dataset(&cohort.records, cfg.horizon)?;
    let split = make_split(&ds, &cfg.holdout_site, cfg.folds, cfg.split_seed)?;
    let dev_ids = split.development_ids();
    let stats = {
        let (dev, _) = ds.select(&dev_ids)?;
        ClinicalStats::fit(dev)?
    };
    let dev = synth_train_data(cohort, &ds, &dev_ids, &cfg.arch, Some(&stats))?;
    let test = synth_train_data(cohort, &ds, &split.test_ids, &cfg.arch, Some(&stats))?;
    let folds = train_cv(&dev, &split, &cfg.arch, &cfg.train)?;
    let models: Vec<Model> = folds.iter().map(|f| f.checkpoint.clone()).collect();
    let scores = ensemble_predict(&models, &test.batch)?;

    let lr = lr_fit_cv(&ds, &split, cfg.baseline_vars, &cfg.baseline)?;
    let (test_records, _) = ds.select(&split.test_ids)?;
    let base: Vec<f64> = test_records
        .iter()
        .map(|r| lr_predict_record(&lr.models, r))
        .collect::<Result<_>>()?;
    let report = ExperimentReport {
        n_dev: dev_ids.len(),
        n_test: test.labels.len(),
        test_positives: test.labels.iter().filter(|&&y| y == 1).count(),
        model_auc: roc_auc(&scores, &test.labels)?,
        model_ap: average_precision(&scores, &test.labels)?,
        baseline_auc: roc_auc(&base, &test.labels)?,
        baseline_ap: average_precision(&base, &test.labels)?,
        best_val_ap: folds.iter().map(|f| f.best_val_ap()).collect(),
        histories: folds.iter().map(|f| f.history.clone()).collect(),
        test_ids: split.test_ids.clone(),
        model_scores: scores,
        baseline_scores: base,
    };
    Ok(ExperimentOutput { report, split, models })
}
