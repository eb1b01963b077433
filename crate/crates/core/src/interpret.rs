//! Mean-value modality ablation and Relative Utilization Rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::models::{Modality, ModalityBatch, Model};
use crate::training::ensemble_predict;

fn true_class(p1: &[f64], labels: &[u8]) -> Vec<f64> {
    p1.iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { p } else { 1.0 - p })
        .collect()
}

fn check(models: &[Model], batch: &ModalityBatch, labels: &[u8], modality: Modality) -> Result<()> {
    let first = models.first().ok_or_else(|| contract("ablation needs at least one model"))?;
    if !first.spec.modalities().contains(&modality) {
        return Err(contract(format!("{} does not consume modality {modality}", first.spec.kind)));
    }
    if batch.batch_size()? != labels.len() {
        return Err(contract("one label per sample required"));
    }
    Ok(())
}

/// Per-sample drop in true-class probability when `modality` is replaced
/// by its entry in `means`. Models are averaged as an ensemble.
pub fn ablate_modality(models: &[Model], batch: &ModalityBatch, labels: &[u8], modality: Modality, means: &BTreeMap<Modality, diffcore::Array>) -> Result<Vec<f64>> {
    check(models, batch, labels, modality)?;
    let mut clean = batch.clone();
    clean.masked.clear();
    let base = true_class(&ensemble_predict(models, &clean)?, labels);
    let mut masked = clean;
    masked.masked.insert(modality);
    masked.means = means.clone();
    let abl = true_class(&ensemble_predict(models, &masked)?, labels);
    Ok(base.iter().zip(abl).map(|(b, a)| b - a).collect())
}

/// Negative drops clamp to 0; the rest are normalised to sum 1, with a
/// uniform split when nothing is positive.
pub fn compute_rur(drops: &BTreeMap<Modality, f64>) -> Result<BTreeMap<Modality, f64>> {
    if drops.values().any(|d| !d.is_finite()) {
        return Err(contract("drops must be finite"));
    }
    let total: f64 = drops.values().map(|d| d.max(0.0)).sum();
    if total <= 0.0 {
        let u = 1.0 / drops.len().max(1) as f64;
        return Ok(drops.keys().map(|&m| (m, u)).collect());
    }
    Ok(drops.iter().map(|(&m, d)| (m, d.max(0.0) / total)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRur {
    pub id: String,
    pub label: u8,
    pub drops: BTreeMap<Modality, f64>,
    pub rur: BTreeMap<Modality, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RurReport {
    pub horizon: u32,
    pub samples: Vec<SampleRur>,
    pub cohort: BTreeMap<Modality, MeanSd>,
}

/// Ablates every modality of the models' spec over `batch`, with means
/// taken over the same batch.
pub fn rur_report(models: &[Model], ids: &[String], batch: &ModalityBatch, labels: &[u8], horizon: u32) -> Result<RurReport> {
    let first = models.first().ok_or_else(|| contract("ablation needs at least one model"))?;
    if ids.len() != labels.len() {
        return Err(contract("one id per label required"));
    }
    let means = batch.modality_means();
    let mut per_mod = BTreeMap::new();
    for m in first.spec.modalities() {
        per_mod.insert(m, ablate_modality(models, batch, labels, m, &means)?);
    }
    let samples = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let drops: BTreeMap<Modality, f64> = per_mod.iter().map(|(&m, d)| (m, d[i])).collect();
            Ok(SampleRur {
                id: id.clone(),
                label: labels[i],
                rur: compute_rur(&drops)?,
                drops,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len().max(1) as f64;
    let cohort = per_mod
        .keys()
        .map(|&m| {
            let mean = samples.iter().map(|s| s.rur[&m]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.rur[&m] - mean).powi(2)).sum::<f64>() / n;
            (m, MeanSd { mean, sd: var.sqrt() })
        })
        .collect();
    Ok(RurReport { horizon, samples, cohort })
}
