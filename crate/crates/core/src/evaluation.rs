//! Ranking metrics, resampling statistics, setting ranking and subgroup
//! summaries.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{pool_klg, PooledKlg, SubjectRecord};
use crate::error::{contract, Error, Result};

/// Prevalence the subgroup AP is calibrated to.
pub const SUBGROUP_PREVALENCE: f64 = 0.15;
/// Permutation tests enumerate every swap pattern up to this many samples.
pub const EXACT_PERMUTATION_MAX_N: usize = 12;
const TIE_TOL: f64 = 1e-12;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(contract("scores must be finite"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(contract("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Cumulative (tp, fp) after each distinct score, from the highest down.
fn threshold_counts(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Non-interpolated AP; tied scores form one threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let p = pos as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_counts(scores, labels) {
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    Ok(ap)
}

/// AP with precision recomputed at prevalence `pi0` from the threshold's
/// TPR and FPR.
pub fn calibrated_ap(scores: &[f64], labels: &[u8], pi0: f64) -> Result<f64> {
    if !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(contract(format!("target prevalence must lie in (0, 1), got {pi0}")));
    }
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("calibrated AP needs both classes".into()));
    }
    let (p, n) = (pos as f64, neg as f64);
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (tp, fp) in threshold_counts(scores, labels) {
        let tpr = tp / p;
        let fpr = fp / n;
        let precision = tpr * pi0 / (tpr * pi0 + fpr * (1.0 - pi0));
        ap += (tpr - prev) * precision;
        prev = tpr;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub point: f64,
    pub mean: f64,
    /// Population standard deviation of the replicate metrics.
    pub se: f64,
    pub n_boot: usize,
    pub seed: u64,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Indices of one stratified replicate: positives and negatives are each
/// resampled with replacement, positives first.
pub fn bootstrap_indices(labels: &[u8], seed: u64, iteration: usize) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let mut rng = iteration_rng(seed, iteration);
    let mut out = Vec::with_capacity(labels.len());
    for group in [&pos, &neg] {
        for _ in 0..group.len() {
            out.push(*group.choose(&mut rng).expect("non-empty class"));
        }
    }
    out
}

pub fn stratified_bootstrap<F>(scores: &[f64], labels: &[u8], metric: F, iters: usize, seed: u64) -> Result<MetricEstimate>
where
    F: Fn(&[f64], &[u8]) -> Result<f64> + Sync,
{
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("stratified bootstrap needs both classes".into()));
    }
    if iters == 0 {
        return Err(contract("bootstrap needs at least one iteration"));
    }
    let point = metric(scores, labels)?;
    let reps: Vec<f64> = (0..iters)
        .into_par_iter()
        .map(|it| {
            let idx = bootstrap_indices(labels, seed, it);
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            metric(&s, &y)
        })
        .collect::<Result<_>>()?;
    let mean = reps.iter().sum::<f64>() / iters as f64;
    let var = reps.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / iters as f64;
    Ok(MetricEstimate {
        point,
        mean,
        se: var.sqrt(),
        n_boot: iters,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// One-sided p-value for metric(a) > metric(b).
    pub p_value: f64,
    pub observed_delta: f64,
    /// True when all 2^n swap patterns were enumerated.
    pub exact: bool,
    pub iterations: usize,
}

/// Sign-flip test: every iteration swaps a_i and b_i with probability 1/2.
pub fn paired_permutation_test<F>(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    metric: F,
    iters: usize,
    seed: u64,
) -> Result<PermutationResult>
where
    F: Fn(&[f64], &[u8]) -> Result<f64> + Sync,
{
    if scores_a.len() != scores_b.len() {
        return Err(contract("paired score vectors must have equal length"));
    }
    check_inputs(scores_a, labels)?;
    check_inputs(scores_b, labels)?;
    let observed = metric(scores_a, labels)? - metric(scores_b, labels)?;
    let n = labels.len();
    let delta_for = |swap: &dyn Fn(usize) -> bool| -> Result<f64> {
        let (mut a, mut b) = (scores_a.to_vec(), scores_b.to_vec());
        for i in 0..n {
            if swap(i) {
                std::mem::swap(&mut a[i], &mut b[i]);
            }
        }
        Ok(metric(&a, labels)? - metric(&b, labels)?)
    };

    if n <= EXACT_PERMUTATION_MAX_N {
        let total = 1usize << n;
        let hits = (0..total)
            .into_par_iter()
            .map(|mask| delta_for(&|i| mask >> i & 1 == 1).map(|d| (d >= observed - TIE_TOL) as usize))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        return Ok(PermutationResult {
            p_value: hits as f64 / total as f64,
            observed_delta: observed,
            exact: true,
            iterations: total,
        });
    }
    if iters == 0 {
        return Err(contract("permutation test needs at least one iteration"));
    }
    let hits = (0..iters)
        .into_par_iter()
        .map(|it| {
            let mut rng = iteration_rng(seed, it);
            let flips: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            delta_for(&|i| flips[i]).map(|d| (d >= observed - TIE_TOL) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(PermutationResult {
        p_value: (1 + hits) as f64 / (iters + 1) as f64,
        observed_delta: observed,
        exact: false,
        iterations: iters,
    })
}

/// Mean metric values per (metric, horizon, setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub settings: Vec<String>,
    pub metrics: Vec<String>,
    pub horizons: Vec<u32>,
    /// Indexed `[metric][horizon][setting]`.
    pub means: Vec<Vec<Vec<Option<f64>>>>,
}

impl RankingTable {
    /// Builds the grid from `(setting, metric, horizon, mean)` rows; axes keep
    /// first-appearance order, absent cells stay empty.
    pub fn from_rows(rows: &[(String, String, u32, f64)]) -> Result<Self> {
        fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) {
            if !v.contains(x) {
                v.push(x.clone());
            }
        }
        let (mut settings, mut metrics, mut horizons) = (Vec::new(), Vec::new(), Vec::new());
        for (s, m, h, _) in rows {
            push_unique(&mut settings, s);
            push_unique(&mut metrics, m);
            push_unique(&mut horizons, h);
        }
        let mut means = vec![vec![vec![None; settings.len()]; horizons.len()]; metrics.len()];
        for (s, m, h, v) in rows {
            if !v.is_finite() {
                return Err(contract(format!("non-finite mean for {s}/{m}/{h}")));
            }
            let mi = metrics.iter().position(|x| x == m).unwrap();
            let hi = horizons.iter().position(|x| x == h).unwrap();
            let si = settings.iter().position(|x| x == s).unwrap();
            if means[mi][hi][si].replace(*v).is_some() {
                return Err(contract(format!("duplicate cell {s}/{m}/{h}")));
            }
        }
        Ok(Self {
            settings,
            metrics,
            horizons,
            means,
        })
    }

    /// Parses `setting,metric,horizon,mean` CSV with a header row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let (s, m, h, v): (String, String, u32, f64) = rec?;
            rows.push((s, m, h, v));
        }
        Self::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRanks {
    pub metric: String,
    pub horizon: u32,
    pub ranks: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub best: String,
    /// Every setting sharing the minimal total; more than one means the
    /// lexicographic tie-break decided.
    pub tied: Vec<String>,
    pub totals: BTreeMap<String, f64>,
    pub cells: Vec<CellRanks>,
}

/// Ranks (1 = best) with averaged positions for ties.
fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Sums per-cell ranks over metrics and horizons; the lowest total wins.
pub fn rank_settings(table: &RankingTable) -> Result<RankingReport> {
    if table.settings.is_empty() || table.metrics.is_empty() || table.horizons.is_empty() {
        return Err(contract("ranking table is empty"));
    }
    let mut totals: BTreeMap<String, f64> = table.settings.iter().map(|s| (s.clone(), 0.0)).collect();
    let mut cells = Vec::new();
    for (mi, m) in table.metrics.iter().enumerate() {
        for (hi, &h) in table.horizons.iter().enumerate() {
            let row = &table.means[mi][hi];
            let values: Vec<f64> = row
                .iter()
                .zip(&table.settings)
                .map(|(v, s)| v.ok_or_else(|| contract(format!("incomplete grid: missing {s}/{m}/{h}"))))
                .collect::<Result<_>>()?;
            let ranks = descending_ranks(&values);
            for (s, r) in table.settings.iter().zip(&ranks) {
                *totals.get_mut(s).unwrap() += r;
            }
            cells.push(CellRanks {
                metric: m.clone(),
                horizon: h,
                ranks: table.settings.iter().cloned().zip(ranks).collect(),
            });
        }
    }
    let min = totals.values().cloned().fold(f64::INFINITY, f64::min);
    // BTreeMap iteration is lexicographic, so the first tied name wins
    let tied: Vec<String> = totals
        .iter()
        .filter(|(_, &t)| t == min)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(RankingReport {
        best: tied[0].clone(),
        tied,
        totals,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraumaGroup {
    NoInjuryOrSurgery,
    InjuryNoSurgery,
    Surgery,
}

/// Baseline KLG bin; grade 4 falls into the top bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KlgBin {
    #[serde(rename = "0/1")]
    G01,
    #[serde(rename = "2")]
    G2,
    #[serde(rename = "3")]
    G3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub trauma: TraumaGroup,
    pub klg: KlgBin,
    pub symptomatic: bool,
}

impl SubgroupSpec {
    pub fn of(record: &SubjectRecord) -> Result<Self> {
        let trauma = if record.prior_surgery {
            TraumaGroup::Surgery
        } else if record.prior_injury {
            TraumaGroup::InjuryNoSurgery
        } else {
            TraumaGroup::NoInjuryOrSurgery
        };
        let klg = match pool_klg(record.baseline_klg()?)? {
            PooledKlg::G01 => KlgBin::G01,
            PooledKlg::G2 => KlgBin::G2,
            PooledKlg::G3 | PooledKlg::G4 => KlgBin::G3,
        };
        Ok(Self {
            trauma,
            klg,
            symptomatic: record.symptomatic(),
        })
    }
}

/// One row of the subgroup report; `klg`/`symptomatic` are `None` for the
/// trauma-group total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub trauma: TraumaGroup,
    pub klg: Option<KlgBin>,
    pub symptomatic: Option<bool>,
    pub n: usize,
    /// Horizon-averaged metrics; `None` when some horizon lacks a class.
    pub roc_auc: Option<f64>,
    pub calibrated_ap: Option<f64>,
}

/// `predictions[horizon][subject id] = (score, label)`.
pub type PredictionsByHorizon = BTreeMap<u32, BTreeMap<String, (f64, u8)>>;

/// Per-subgroup horizon-averaged ROC AUC and calibrated AP, restricted to
/// subjects labelled at every horizon.
pub fn subgroup_report(predictions: &PredictionsByHorizon, records: &[SubjectRecord]) -> Result<Vec<SubgroupResult>> {
    if predictions.is_empty() {
        return Err(contract("subgroup report needs at least one horizon"));
    }
    let mut common: BTreeSet<&String> = predictions.values().next().unwrap().keys().collect();
    for p in predictions.values() {
        common.retain(|id| p.contains_key(*id));
    }
    let mut members: BTreeMap<(TraumaGroup, Option<(KlgBin, bool)>), Vec<&str>> = BTreeMap::new();
    for r in records.iter().filter(|r| common.contains(&r.id)) {
        let g = SubgroupSpec::of(r)?;
        members.entry((g.trauma, None)).or_default().push(&r.id);
        members
            .entry((g.trauma, Some((g.klg, g.symptomatic))))
            .or_default()
            .push(&r.id);
    }
    let mut out = Vec::new();
    for trauma in [TraumaGroup::NoInjuryOrSurgery, TraumaGroup::InjuryNoSurgery, TraumaGroup::Surgery] {
        let mut keys = vec![None];
        for klg in [KlgBin::G01, KlgBin::G2, KlgBin::G3] {
            for sym in [false, true] {
                keys.push(Some((klg, sym)));
            }
        }
        for key in keys {
            let ids = members.get(&(trauma, key)).cloned().unwrap_or_default();
            let mut aucs = Vec::new();
            let mut aps = Vec::new();
            for p in predictions.values() {
                let s: Vec<f64> = ids.iter().map(|id| p[*id].0).collect();
                let y: Vec<u8> = ids.iter().map(|id| p[*id].1).collect();
                aucs.push(roc_auc(&s, &y).ok());
                aps.push(calibrated_ap(&s, &y, SUBGROUP_PREVALENCE).ok());
            }
            let avg = |v: Vec<Option<f64>>| -> Option<f64> {
                let n = v.len() as f64;
                v.into_iter().sum::<Option<f64>>().map(|s| s / n)
            };
            out.push(SubgroupResult {
                trauma,
                klg: key.map(|k| k.0),
                symptomatic: key.map(|k| k.1),
                n: ids.len(),
                roc_auc: avg(aucs),
                calibrated_ap: avg(aps),
            });
        }
    }
    Ok(out)
}
