//! Subjects, progression labels, development/test splits and clinical
//! feature encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::imaging::Protocol;

pub const HORIZONS: [u32; 5] = [12, 24, 36, 48, 96];
pub const VISITS: [u32; 6] = [0, 12, 24, 36, 48, 96];
/// WOMAC total above this marks a subject as symptomatic.
pub const SYMPTOMATIC_WOMAC: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            _ => Err(contract(format!("unknown sex code {s:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub age: f64,
    pub sex: Sex,
    pub bmi: f64,
    pub womac_total: f64,
    pub prior_injury: bool,
    pub prior_surgery: bool,
    pub site: String,
    /// Month → KLG (0..=4); month 0 is the baseline.
    pub klg_by_visit: BTreeMap<u32, u8>,
    pub image_refs: BTreeMap<Protocol, String>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.klg_by_visit.values().any(|&g| g > 4) {
            return Err(contract(format!("{}: KLG grades must lie in 0..=4", self.id)));
        }
        if !self.klg_by_visit.contains_key(&0) {
            return Err(contract(format!("{}: baseline KLG (month 0) is required", self.id)));
        }
        if !(0.0..=96.0).contains(&self.womac_total) {
            return Err(contract(format!("{}: WOMAC total must lie in [0, 96]", self.id)));
        }
        if ![self.age, self.bmi].iter().all(|v| v.is_finite()) {
            return Err(contract(format!("{}: age and BMI must be finite", self.id)));
        }
        Ok(())
    }

    pub fn baseline_klg(&self) -> Result<u8> {
        self.klg_by_visit
            .get(&0)
            .copied()
            .ok_or_else(|| contract(format!("{}: baseline KLG (month 0) is required", self.id)))
    }

    pub fn symptomatic(&self) -> bool {
        self.womac_total > SYMPTOMATIC_WOMAC
    }
}

/// KLG with grades 0 and 1 merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PooledKlg {
    G01,
    G2,
    G3,
    G4,
}

impl PooledKlg {
    pub const ALL: [PooledKlg; 4] = [PooledKlg::G01, PooledKlg::G2, PooledKlg::G3, PooledKlg::G4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            PooledKlg::G01 => "01",
            PooledKlg::G2 => "2",
            PooledKlg::G3 => "3",
            PooledKlg::G4 => "4",
        }
    }
}

pub fn pool_klg(grade: u8) -> Result<PooledKlg> {
    match grade {
        0 | 1 => Ok(PooledKlg::G01),
        2 => Ok(PooledKlg::G2),
        3 => Ok(PooledKlg::G3),
        4 => Ok(PooledKlg::G4),
        g => Err(contract(format!("KLG grade {g} is outside 0..=4"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStatus {
    Control,
    Progressor,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    KlgDecrease,
    MissingFollowup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressionLabel {
    pub horizon_months: u32,
    pub status: LabelStatus,
    pub reason: Option<ExclusionReason>,
}

impl ProgressionLabel {
    fn new(horizon_months: u32, status: LabelStatus) -> Self {
        Self {
            horizon_months,
            status,
            reason: None,
        }
    }

    fn excluded(horizon_months: u32, reason: ExclusionReason) -> Self {
        Self {
            horizon_months,
            status: LabelStatus::Excluded,
            reason: Some(reason),
        }
    }

    /// 1 for progressors, 0 for controls, `None` when excluded.
    pub fn target(&self) -> Option<u8> {
        match self.status {
            LabelStatus::Control => Some(0),
            LabelStatus::Progressor => Some(1),
            LabelStatus::Excluded => None,
        }
    }
}

pub fn check_horizon(horizon: u32) -> Result<()> {
    if HORIZONS.contains(&horizon) {
        Ok(())
    } else {
        Err(contract(format!("horizon {horizon} is not one of {HORIZONS:?}")))
    }
}

/// Label from the visits in `(0, horizon]`.
///
/// A pooled-KLG decrease excludes the subject (except at the 96-month
/// horizon); otherwise any increase makes a progressor, even if the
/// horizon visit itself is missing. Without progression a visit at the
/// horizon month is required for a control.
pub fn derive_label(record: &SubjectRecord, horizon: u32) -> Result<ProgressionLabel> {
    let base = pool_klg(record.baseline_klg()?)?;
    let window: Vec<PooledKlg> = record
        .klg_by_visit
        .range(1..=horizon)
        .map(|(_, &g)| pool_klg(g))
        .collect::<Result<_>>()?;
    if horizon != 96 && window.iter().any(|&g| g < base) {
        return Ok(ProgressionLabel::excluded(horizon, ExclusionReason::KlgDecrease));
    }
    if window.iter().any(|&g| g > base) {
        return Ok(ProgressionLabel::new(horizon, LabelStatus::Progressor));
    }
    if !record.klg_by_visit.contains_key(&horizon) {
        return Ok(ProgressionLabel::excluded(horizon, ExclusionReason::MissingFollowup));
    }
    Ok(ProgressionLabel::new(horizon, LabelStatus::Control))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: u32,
    pub records: Vec<SubjectRecord>,
    /// 1 = progressor, aligned with `records`.
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn prevalence(&self) -> f64 {
        self.labels.iter().map(|&y| y as f64).sum::<f64>() / self.labels.len() as f64
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Records and labels for `ids`, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<(Vec<&SubjectRecord>, Vec<u8>)> {
        let lookup: BTreeMap<&str, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let mut recs = Vec::with_capacity(ids.len());
        let mut ys = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = lookup
                .get(id.as_str())
                .ok_or_else(|| contract(format!("subject {id} is not in the dataset")))?;
            recs.push(&self.records[i]);
            ys.push(self.labels[i]);
        }
        Ok((recs, ys))
    }
}

/// Labels every record and keeps the non-excluded ones.
pub fn assemble_dataset(records: &[SubjectRecord], horizon: u32) -> Result<Dataset> {
    check_horizon(horizon)?;
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        r.validate()?;
        if let Some(y) = derive_label(r, horizon)?.target() {
            kept.push(r.clone());
            labels.push(y);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no labelled subjects at the {horizon}-month horizon"
        )));
    }
    Ok(Dataset {
        horizon,
        records: kept,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub holdout_site: String,
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn development_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .flat_map(|f| f.val_ids.iter().cloned())
            .collect();
        ids.sort();
        ids
    }
}

/// Holdout site to test; the rest into `k` label-stratified folds.
pub fn make_split(dataset: &Dataset, holdout_site: &str, k: usize, seed: u64) -> Result<SplitPlan> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    if k < 2 {
        return Err(contract(format!("need at least 2 folds, got {k}")));
    }
    let mut test_ids = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (r, &y) in dataset.records.iter().zip(&dataset.labels) {
        if r.site == holdout_site {
            test_ids.push(r.id.clone());
        } else if y == 1 {
            pos.push(r.id.clone());
        } else {
            neg.push(r.id.clone());
        }
    }
    if pos.len() < k || neg.len() < k {
        return Err(Error::Stratification(format!(
            "development set has {} progressors and {} controls; {k} folds need at least {k} of each",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.sort();
    neg.sort();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in pos.iter().enumerate() {
        val[i % k].push(id.clone());
    }
    // continue the rotation so fold sizes stay within one of each other
    let offset = pos.len() % k;
    for (i, id) in neg.iter().enumerate() {
        val[(offset + i) % k].push(id.clone());
    }
    let order: BTreeMap<&str, usize> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    for v in &mut val {
        v.sort_by_key(|id| order[id.as_str()]);
    }
    let folds = (0..k)
        .map(|f| {
            let mut train: Vec<String> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| val[g].iter().cloned())
                .collect();
            train.sort_by_key(|id| order[id.as_str()]);
            Fold {
                train_ids: train,
                val_ids: val[f].clone(),
            }
        })
        .collect();
    Ok(SplitPlan {
        holdout_site: holdout_site.to_string(),
        seed,
        test_ids,
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableSet {
    C1,
    C2,
    C3,
    C4,
}

impl VariableSet {
    pub const ALL: [VariableSet; 4] = [VariableSet::C1, VariableSet::C2, VariableSet::C3, VariableSet::C4];

    fn has_klg(self) -> bool {
        matches!(self, VariableSet::C2 | VariableSet::C4)
    }

    fn has_history(self) -> bool {
        matches!(self, VariableSet::C3 | VariableSet::C4)
    }

    pub fn columns(self) -> Vec<&'static str> {
        let mut c = vec!["age_z", "bmi_z", "sex_F", "sex_M"];
        if self.has_history() {
            c.extend(["womac_z", "injury_no", "injury_yes", "surgery_no", "surgery_yes"]);
        }
        if self.has_klg() {
            c.extend(["klg_01", "klg_2", "klg_3", "klg_4"]);
        }
        c
    }

    pub fn dim(self) -> usize {
        self.columns().len()
    }

    /// Indices of the z-scored columns.
    pub fn continuous_columns(self) -> Vec<usize> {
        if self.has_history() {
            vec![0, 1, 4]
        } else {
            vec![0, 1]
        }
    }
}

impl FromStr for VariableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" => Ok(VariableSet::C1),
            "C2" => Ok(VariableSet::C2),
            "C3" => Ok(VariableSet::C3),
            "C4" => Ok(VariableSet::C4),
            _ => Err(contract(format!("unknown variable set {s:?}"))),
        }
    }
}

impl fmt::Display for VariableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub sd: f64,
}

impl ZScore {
    /// Population statistics; a zero spread falls back to sd = 1.
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            mean,
            sd: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Standardisation parameters and categorical levels seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalStats {
    pub age: ZScore,
    pub bmi: ZScore,
    pub womac: ZScore,
    pub sex_seen: [bool; 2],
    pub injury_seen: [bool; 2],
    pub surgery_seen: [bool; 2],
    pub klg_seen: [bool; 4],
}

impl ClinicalStats {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a SubjectRecord>) -> Result<Self> {
        let recs: Vec<&SubjectRecord> = train.into_iter().collect();
        if recs.is_empty() {
            return Err(Error::EmptyDataset("clinical statistics need training subjects".into()));
        }
        let mut s = Self {
            age: ZScore::fit(recs.iter().map(|r| r.age)),
            bmi: ZScore::fit(recs.iter().map(|r| r.bmi)),
            womac: ZScore::fit(recs.iter().map(|r| r.womac_total)),
            sex_seen: [false; 2],
            injury_seen: [false; 2],
            surgery_seen: [false; 2],
            klg_seen: [false; 4],
        };
        for r in &recs {
            s.sex_seen[r.sex as usize] = true;
            s.injury_seen[r.prior_injury as usize] = true;
            s.surgery_seen[r.prior_surgery as usize] = true;
            s.klg_seen[pool_klg(r.baseline_klg()?)?.index()] = true;
        }
        Ok(s)
    }
}

fn one_hot(out: &mut Vec<f64>, idx: usize, n: usize, seen: &[bool], what: &str, id: &str) -> Result<()> {
    if !seen[idx] {
        return Err(contract(format!(
            "{id}: {what} level {idx} was not seen in the training data"
        )));
    }
    out.extend((0..n).map(|i| if i == idx { 1.0 } else { 0.0 }));
    Ok(())
}

/// Feature vector in the column order of [`VariableSet::columns`].
pub fn encode_clinical(record: &SubjectRecord, stats: &ClinicalStats, set: VariableSet) -> Result<Vec<f64>> {
    let id = record.id.as_str();
    let mut x = vec![stats.age.apply(record.age), stats.bmi.apply(record.bmi)];
    one_hot(&mut x, record.sex as usize, 2, &stats.sex_seen, "sex", id)?;
    if set.has_history() {
        x.push(stats.womac.apply(record.womac_total));
        one_hot(&mut x, record.prior_injury as usize, 2, &stats.injury_seen, "injury", id)?;
        one_hot(&mut x, record.prior_surgery as usize, 2, &stats.surgery_seen, "surgery", id)?;
    }
    if set.has_klg() {
        let k = pool_klg(record.baseline_klg()?)?.index();
        one_hot(&mut x, k, 4, &stats.klg_seen, "KLG", id)?;
    }
    Ok(x)
}
