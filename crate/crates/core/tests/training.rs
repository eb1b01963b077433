use diffcore::Array;
use kneefuse::models::*;
use kneefuse::training::*;
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec() -> ArchSpec {
    let mut s = ArchSpec::desk(ArchKind::MR1);
    s.descriptor_dim = 8;
    s.trf_heads = 2;
    s.trf_layers = 1;
    s.head_hidden = 8;
    s.encoder_channels = vec![4];
    s.max_slices = 4;
    s.dropout_rate = 0.0;
    s
}

/// `n` random 3-slice 6×6 volumes; a quarter are positives.
fn toy_data(n: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array::from_shape_fn(IxDyn(&[n, 3, 6, 6]), |_| rng.random_range(-0.5..0.5));
    let mut batch = ModalityBatch::default();
    batch.mri.insert(kneefuse::imaging::Protocol::Dess, x);
    let labels = (0..n).map(|i| (i % 4 == 0) as u8).collect();
    TrainData::new((0..n).map(|i| format!("T{i:02}")).collect(), batch, labels).unwrap()
}

fn fast_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_budget: epochs,
        lr_start: 1e-3,
        lr_peak: 1e-2,
        warmup_epochs: 2.0,
        weight_decay: 0.0,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn memorizes_a_small_set() {
    let data = toy_data(32, 1);
    let all: Vec<usize> = (0..32).collect();
    let r = train_fold(&data, &all, &all, &toy_spec(), &fast_cfg(60), 0).unwrap();
    assert_eq!(r.best_val_ap(), Some(1.0), "{:?}", r.history.iter().map(|h| h.val_ap).collect::<Vec<_>>());
    let first = r.history.first().unwrap().train_loss;
    let last = r.history.last().unwrap().train_loss;
    assert!(last < first / 4.0, "{first} -> {last}");
}

#[test]
fn zero_epochs_returns_initial_model() {
    let data = toy_data(16, 2);
    let idx: Vec<usize> = (0..16).collect();
    let cfg = fast_cfg(0);
    let r = train_fold(&data, &idx, &idx, &toy_spec(), &cfg, 2).unwrap();
    assert!(r.history.is_empty() && r.best_epoch.is_none());
    let init = build_model(&toy_spec(), derive_seed(derive_seed(cfg.seed, 3), 0)).unwrap();
    assert_eq!(r.checkpoint, init);
}

#[test]
fn training_is_reproducible_and_keeps_the_best_epoch() {
    let data = toy_data(24, 4);
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..24).partition(|i| i % 3 != 0);
    let mut spec = toy_spec();
    spec.dropout_rate = 0.2;
    let a = train_fold(&data, &tr, &va, &spec, &fast_cfg(6), 1).unwrap();
    let b = train_fold(&data, &tr, &va, &spec, &fast_cfg(6), 1).unwrap();
    assert_eq!(checkpoint_bytes(&a.checkpoint), checkpoint_bytes(&b.checkpoint));
    assert_eq!(a.history, b.history);
    let max = a.history.iter().map(|h| h.val_ap).fold(f64::MIN, f64::max);
    assert_eq!(a.best_val_ap(), Some(max));
    let e = a.best_epoch.unwrap();
    assert!(a.history[..e].iter().all(|h| h.val_ap < max));
    let probs = predict_indices(&a.checkpoint, &data.batch, &va).unwrap();
    let labels: Vec<u8> = va.iter().map(|&i| data.labels[i]).collect();
    assert_eq!(kneefuse::evaluation::average_precision(&probs, &labels).unwrap(), max);
}

#[test]
fn single_class_fold_is_rejected() {
    let data = toy_data(8, 5);
    let neg: Vec<usize> = (0..8).filter(|i| i % 4 != 0).collect();
    assert!(train_fold(&data, &neg, &[0, 1], &toy_spec(), &fast_cfg(1), 0).is_err());
}

#[test]
fn adam_descends_random_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let n = rng.random_range(2..8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let loss = |x: &Array| x.iter().zip(&a).zip(&c).map(|((x, a), c)| 0.5 * a * (x - c).powi(2)).sum::<f64>();
        let mut params = vec![Array::zeros(IxDyn(&[n]))];
        let mut state = AdamState::new(&params);
        let start = loss(&params[0]);
        for _ in 0..500 {
            let g = Array::from_shape_fn(IxDyn(&[n]), |i| a[i[0]] * (params[0][[i[0]]] - c[i[0]]));
            adam_step(&mut params, &[g], &mut state, 0.05, 0.0).unwrap();
        }
        assert!(loss(&params[0]) < 1e-3 * start.max(1e-3), "{} -> {}", start, loss(&params[0]));
    }
}

#[test]
fn ensemble_averages_members() {
    let spec = toy_spec();
    let data = toy_data(5, 6);
    let models: Vec<Model> = (0..3).map(|s| build_model(&spec, s).unwrap()).collect();
    let e = ensemble_predict(&models, &data.batch).unwrap();
    let each: Vec<Vec<f64>> = models.iter().map(|m| m.predict_proba(&data.batch).unwrap()).collect();
    for i in 0..5 {
        let mean = (each[0][i] + each[1][i] + each[2][i]) / 3.0;
        assert!((e[i] - mean).abs() < 1e-15);
    }
}
