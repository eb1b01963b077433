//! L2-regularised logistic regression on clinical variable sets.

use serde::{Deserialize, Serialize};

use crate::cohort::{encode_clinical, ClinicalStats, Dataset, SplitPlan, SubjectRecord, VariableSet};
use crate::error::{contract, Error, Result};
use crate::evaluation::average_precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    None,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    /// Penalty `l2/2·|w|²`; the bias is not penalised.
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iterations: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            grad_tol: 1e-8,
            max_iterations: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub variable_set: VariableSet,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_weighting: ClassWeighting,
    pub train_stats: ClinicalStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective after each iteration (first entry is the start point).
    pub loss_trace: Vec<f64>,
}

/// Per-class weights `n/(2·n_c)` for `[class 0, class 1]`.
pub fn balanced_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Stratification("class weighting needs both classes".into()));
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)])
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn objective(x: &[Vec<f64>], y: &[u8], c: &[f64], w: &[f64], b: f64, l2: f64) -> f64 {
    let data: f64 = x
        .iter()
        .zip(y)
        .zip(c)
        .map(|((xi, &yi), ci)| {
            let z = b + xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            ci * (softplus(z) - yi as f64 * z)
        })
        .sum();
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Full-batch gradient descent with step 1/L, L the Lipschitz bound
/// `¼·Σ c_i (|x_i|² + 1) + l2`, stopping at gradient norm < `grad_tol`.
pub fn fit_logistic(x: &[Vec<f64>], y: &[u8], weighting: ClassWeighting, cfg: &LrConfig) -> Result<LrFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(contract(format!("{} rows for {} labels", x.len(), y.len())));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(contract("ragged feature rows"));
    }
    let c: Vec<f64> = match weighting {
        ClassWeighting::None => vec![1.0; y.len()],
        ClassWeighting::Balanced => {
            let cw = balanced_weights(y)?;
            y.iter().map(|&v| cw[v as usize]).collect()
        }
    };
    let lip = 0.25
        * x.iter()
            .zip(&c)
            .map(|(r, ci)| ci * (1.0 + r.iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
        + cfg.l2;
    let step = 1.0 / lip;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut trace = vec![objective(x, y, &c, &w, b, cfg.l2)];
    let mut gw = vec![0.0; dim];
    for it in 0..=cfg.max_iterations {
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = cfg.l2 * wi);
        let mut gb = 0.0;
        for ((xi, &yi), ci) in x.iter().zip(y).zip(&c) {
            let z = b + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = ci * (sigmoid(z) - yi as f64);
            gb += r;
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += r * v);
        }
        let norm = (gb * gb + gw.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if norm < cfg.grad_tol || it == cfg.max_iterations {
            return Ok(LrFit {
                weights: w,
                bias: b,
                iterations: it,
                grad_norm: norm,
                loss_trace: trace,
            });
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= step * g);
        b -= step * gb;
        trace.push(objective(x, y, &c, &w, b, cfg.l2));
    }
    unreachable!("loop returns at max_iterations")
}

impl LrModel {
    pub fn predict_encoded(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(contract(format!(
                "feature length {} differs from model length {}",
                features.len(),
                self.weights.len()
            )));
        }
        Ok(sigmoid(self.bias + features.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()))
    }

    pub fn predict_record(&self, record: &SubjectRecord) -> Result<f64> {
        self.predict_encoded(&encode_clinical(record, &self.train_stats, self.variable_set)?)
    }
}

/// Fits one model on `train` records with their own standardisation.
pub fn fit_lr_model(train: &[&SubjectRecord], labels: &[u8], set: VariableSet, weighting: ClassWeighting, cfg: &LrConfig) -> Result<LrModel> {
    let stats = ClinicalStats::fit(train.iter().copied())?;
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|r| encode_clinical(r, &stats, set))
        .collect::<Result<_>>()?;
    let fit = fit_logistic(&x, labels, weighting, cfg)?;
    Ok(LrModel {
        variable_set: set,
        weights: fit.weights,
        bias: fit.bias,
        class_weighting: weighting,
        train_stats: stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCvResult {
    pub variable_set: VariableSet,
    pub chosen: ClassWeighting,
    /// Mean validation AP for `[none, balanced]`.
    pub mean_val_ap: [f64; 2],
    pub models: Vec<LrModel>,
}

/// Chooses class weighting by mean validation AP over the folds of
/// `split`; returns the winner's per-fold models. Ties keep `None`.
pub fn lr_fit_cv(dataset: &Dataset, split: &SplitPlan, set: VariableSet, cfg: &LrConfig) -> Result<LrCvResult> {
    if split.folds.is_empty() {
        return Err(contract("split has no folds"));
    }
    let mut per_weighting = Vec::new();
    for weighting in [ClassWeighting::None, ClassWeighting::Balanced] {
        let mut models = Vec::new();
        let mut ap_sum = 0.0;
        for fold in &split.folds {
            let (train, ytr) = dataset.select(&fold.train_ids)?;
            let (val, yva) = dataset.select(&fold.val_ids)?;
            if !ytr.contains(&0) || !ytr.contains(&1) || !yva.contains(&1) {
                return Err(Error::Stratification("baseline fold lacks a class".into()));
            }
            let m = fit_lr_model(&train, &ytr, set, weighting, cfg)?;
            let p: Vec<f64> = val.iter().map(|r| m.predict_record(r)).collect::<Result<_>>()?;
            ap_sum += average_precision(&p, &yva)?;
            models.push(m);
        }
        per_weighting.push((ap_sum / split.folds.len() as f64, models));
    }
    let mean_val_ap = [per_weighting[0].0, per_weighting[1].0];
    let (chosen, idx) = if mean_val_ap[1] > mean_val_ap[0] {
        (ClassWeighting::Balanced, 1)
    } else {
        (ClassWeighting::None, 0)
    };
    Ok(LrCvResult {
        variable_set: set,
        chosen,
        mean_val_ap,
        models: per_weighting.swap_remove(idx).1,
    })
}

/// Mean of per-fold probabilities on already-encoded features.
pub fn lr_predict(models: &[LrModel], features: &[f64]) -> Result<f64> {
    if models.is_empty() {
        return Err(contract("no baseline models"));
    }
    let mut s = 0.0;
    for m in models {
        s += m.predict_encoded(features)?;
    }
    Ok(s / models.len() as f64)
}

/// Mean of per-fold probabilities, encoding with each fold's own statistics.
pub fn lr_predict_record(models: &[LrModel], record: &SubjectRecord) -> Result<f64> {
    if models.is_empty() {
        return Err(contract("no baseline models"));
    }
    let mut s = 0.0;
    for m in models {
        s += m.predict_record(record)?;
    }
    Ok(s / models.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> ClinicalStats {
        let z = crate::cohort::ZScore { mean: 0.0, sd: 1.0 };
        ClinicalStats {
            age: z,
            bmi: z,
            womac: z,
            sex_seen: [true; 2],
            injury_seen: [true; 2],
            surgery_seen: [true; 2],
            klg_seen: [true; 4],
        }
    }

    #[test]
    fn weights_for_ninety_ten() {
        let mut y = vec![0u8; 90];
        y.extend([1u8; 10]);
        let w = balanced_weights(&y).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-15);
        assert!((w[0] - 0.5556).abs() < 1e-4);
        assert_eq!(w[1], 5.0);
    }

    #[test]
    fn intercept_only_matches_prevalence() {
        let y: Vec<u8> = (0..40).map(|i| u8::from(i % 5 == 0)).collect();
        let x = vec![Vec::new(); 40];
        let fit = fit_logistic(&x, &y, ClassWeighting::None, &LrConfig::default()).unwrap();
        assert!(fit.grad_norm < 1e-8);
        assert!((sigmoid(fit.bias) - 0.2).abs() < 1e-9);
        let bal = fit_logistic(&x, &y, ClassWeighting::Balanced, &LrConfig::default()).unwrap();
        assert!((sigmoid(bal.bias) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn loss_non_increasing_and_separable() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0 - 1.0]).collect();
        let y: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let fit = fit_logistic(&x, &y, ClassWeighting::None, &LrConfig::default()).unwrap();
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let m = LrModel {
            variable_set: VariableSet::C1,
            weights: fit.weights.clone(),
            bias: fit.bias,
            class_weighting: ClassWeighting::None,
            train_stats: stats(),
        };
        let p: Vec<f64> = x.iter().map(|r| m.predict_encoded(r).unwrap()).collect();
        assert_eq!(crate::evaluation::roc_auc(&p, &y).unwrap(), 1.0);
        assert!(m.predict_encoded(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn predict_averages() {
        let mk = |b: f64| LrModel {
            variable_set: VariableSet::C1,
            weights: vec![0.0; 4],
            bias: b,
            class_weighting: ClassWeighting::None,
            train_stats: stats(),
        };
        assert_eq!(lr_predict(&[mk(0.0)], &[0.0; 4]).unwrap(), 0.5);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let p = lr_predict(&[mk(logit(0.3)), mk(logit(0.5))], &[0.0; 4]).unwrap();
        assert!((p - 0.4).abs() < 1e-15);
    }
}
