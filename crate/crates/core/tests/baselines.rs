use std::collections::BTreeMap;

use kneefuse::baselines::*;
use kneefuse::cohort::*;
use kneefuse::evaluation::roc_auc;

fn record(i: usize, site: &str, progress: bool, age: f64) -> SubjectRecord {
    SubjectRecord {
        id: format!("B{i:03}"),
        age,
        sex: if i % 2 == 0 { Sex::F } else { Sex::M },
        bmi: 24.0 + (i % 7) as f64,
        womac_total: (i % 20) as f64,
        prior_injury: i % 3 == 0,
        prior_surgery: i % 8 == 0,
        site: site.into(),
        klg_by_visit: [(0, 1 + (i % 3) as u8), (24, 1 + (i % 3) as u8 + progress as u8)].into_iter().collect(),
        image_refs: BTreeMap::new(),
    }
}

/// Progression is a deterministic function of age, so C1 separates it.
fn separable(n: usize) -> Vec<SubjectRecord> {
    (0..n)
        .map(|i| {
            let age = 45.0 + (i * 13 % 35) as f64;
            let site = if i % 5 == 0 { "D" } else { "A" };
            record(i, site, age > 70.0, age)
        })
        .collect()
}

#[test]
fn separable_age_signal_gives_perfect_holdout_auc() {
    let ds = assemble_dataset(&separable(150), 24).unwrap();
    let split = make_split(&ds, "D", 5, 0).unwrap();
    let cv = lr_fit_cv(&ds, &split, VariableSet::C1, &LrConfig::default()).unwrap();
    assert_eq!(cv.models.len(), 5);
    let (test, y) = ds.select(&split.test_ids).unwrap();
    let p: Vec<f64> = test.iter().map(|r| lr_predict_record(&cv.models, r).unwrap()).collect();
    assert_eq!(roc_auc(&p, &y).unwrap(), 1.0);
}

#[test]
fn validation_rows_do_not_touch_train_stats() {
    let ds = assemble_dataset(&separable(120), 24).unwrap();
    let split = make_split(&ds, "D", 5, 1).unwrap();
    let cv = lr_fit_cv(&ds, &split, VariableSet::C4, &LrConfig::default()).unwrap();
    let mut tampered = ds.clone();
    let val: Vec<&String> = split.folds[0].val_ids.iter().collect();
    for r in tampered.records.iter_mut().filter(|r| val.contains(&&r.id)) {
        r.age += 30.0;
        r.bmi *= 1.5;
    }
    let cv2 = lr_fit_cv(&tampered, &split, VariableSet::C4, &LrConfig::default()).unwrap();
    if cv.chosen == cv2.chosen {
        assert_eq!(cv.models[0].train_stats, cv2.models[0].train_stats);
        assert_eq!(cv.models[0].weights, cv2.models[0].weights);
    }
    let (train, y) = ds.select(&split.folds[0].train_ids).unwrap();
    let m = fit_lr_model(&train, &y, VariableSet::C4, ClassWeighting::None, &LrConfig::default()).unwrap();
    assert_eq!(m.train_stats, ClinicalStats::fit(train.iter().copied()).unwrap());
}

#[test]
fn balanced_equals_unweighted_when_classes_are_even() {
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let y: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    assert_eq!(balanced_weights(&y).unwrap(), [1.0, 1.0]);
    let cfg = LrConfig::default();
    let a = fit_logistic(&x, &y, ClassWeighting::None, &cfg).unwrap();
    let b = fit_logistic(&x, &y, ClassWeighting::Balanced, &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.bias, b.bias);
    assert!(a.grad_norm < 1e-8);
}

#[test]
fn fold_averaging() {
    let stats = ClinicalStats::fit(&separable(10)).unwrap();
    let m = |b: f64| LrModel {
        variable_set: VariableSet::C1,
        weights: vec![0.0; 4],
        bias: b,
        class_weighting: ClassWeighting::None,
        train_stats: stats.clone(),
    };
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let x = [0.2, -1.0, 1.0, 0.0];
    assert_eq!(lr_predict(&[m(0.0)], &x).unwrap(), 0.5);
    let p = lr_predict(&[m(logit(0.3)), m(logit(0.5))], &x).unwrap();
    assert!((p - 0.4).abs() < 1e-12);
    assert!(lr_predict(&[m(0.0)], &x[..3]).is_err());
}
