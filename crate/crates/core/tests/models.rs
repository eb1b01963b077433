use diffcore::{grad_check_with, Array, GradCheckOptions, Mode};
use kneefuse::imaging::Protocol;
use kneefuse::models::*;
use kneefuse::training::focal_loss_graph;
use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec(kind: ArchKind) -> ArchSpec {
    let mut s = ArchSpec::desk(kind);
    s.descriptor_dim = 8;
    s.trf_heads = 2;
    s.trf_layers = 1;
    s.head_hidden = 6;
    s.encoder_channels = vec![2, 3];
    s.max_slices = 8;
    if kind.uses_clinical() {
        s.clinical_dim = 5;
    }
    s
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-0.5..0.5))
}

fn toy_batch(spec: &ArchSpec, b: usize, slices: usize, seed: u64) -> ModalityBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = ModalityBatch::default();
    if spec.kind.uses_xr() {
        batch.xr = Some(rand_array(&mut rng, &[b, 1, 8, 8]));
    }
    for &p in &spec.mri {
        batch.mri.insert(p, rand_array(&mut rng, &[b, slices, 8, 8]));
    }
    if spec.kind.uses_clinical() {
        batch.clinical = Some(rand_array(&mut rng, &[b, spec.clinical_dim]));
    }
    batch
}

#[test]
fn desk_parameter_counts() {
    // frozen from the layout; a change here means the architecture moved
    let expected = [
        (ArchKind::XR1, 24442),
        (ArchKind::MR1, 129402),
        (ArchKind::XR1MR1, 149682),
        (ArchKind::MR2, 153778),
        (ArchKind::XR1MR2, 375722),
        (ArchKind::XR1MR2C1, 376426),
    ];
    for (kind, n) in expected {
        let m = build_model(&ArchSpec::desk(kind), 0).unwrap();
        assert_eq!(m.param_count(), n, "{kind}");
    }
}

#[test]
fn logits_shape_for_every_kind() {
    for kind in ArchKind::ALL {
        let spec = toy_spec(kind);
        let m = build_model(&spec, 1).unwrap();
        let out = m.forward(&toy_batch(&spec, 3, 4, 2), Mode::Eval, 0).unwrap();
        assert_eq!(out.shape(), &[3, 2], "{kind}");
        let p = class1_probability(&out);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn modality_embedding_only_for_fused_kinds() {
    for kind in ArchKind::ALL {
        let m = build_model(&toy_spec(kind), 0).unwrap();
        let has = m.params.get("fusion.modality").map(|a| a.shape()[0]);
        let expected = match kind {
            ArchKind::XR1 | ArchKind::MR1 => None,
            ArchKind::XR1MR1 | ArchKind::MR2 => Some(2),
            ArchKind::XR1MR2 => Some(3),
            ArchKind::XR1MR2C1 => Some(4),
        };
        assert_eq!(has, expected, "{kind}");
    }
}

#[test]
fn eval_forward_is_deterministic_and_batch_order_free() {
    for kind in ArchKind::ALL {
        let spec = toy_spec(kind);
        let m = build_model(&spec, 3).unwrap();
        let batch = toy_batch(&spec, 4, 3, 4);
        let a = m.predict_proba(&batch).unwrap();
        assert_eq!(a, m.predict_proba(&batch).unwrap());
        let rev = m.predict_proba(&batch.select(&[3, 2, 1, 0])).unwrap();
        let solo = m.predict_proba(&batch.select(&[2])).unwrap();
        for i in 0..4 {
            assert!((a[i] - rev[3 - i]).abs() < 1e-12, "{kind}");
        }
        assert!((a[2] - solo[0]).abs() < 1e-12, "{kind}");
    }
}

#[test]
fn permuting_slices_with_positions_is_invariant() {
    for kind in [ArchKind::MR1, ArchKind::XR1MR2] {
        let spec = toy_spec(kind);
        let m = build_model(&spec, 5).unwrap();
        let batch = toy_batch(&spec, 2, 5, 6);
        let base = m.predict_proba(&batch).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let mut shuffled = batch.clone();
        for (&p, a) in batch.mri.iter() {
            shuffled.mri.insert(p, a.select(Axis(1), &perm));
            shuffled.slice_positions.insert(p, perm.to_vec());
        }
        let got = m.predict_proba(&shuffled).unwrap();
        for (x, y) in base.iter().zip(&got) {
            assert!((x - y).abs() < 1e-10, "{kind}: {x} vs {y}");
        }
        // without positions the order is visible to the model
        let mut blind = shuffled.clone();
        blind.slice_positions.clear();
        assert_ne!(m.predict_proba(&blind).unwrap(), base);
    }
}

#[test]
fn zeroed_branch_ignores_its_input() {
    let spec = toy_spec(ArchKind::XR1MR1);
    let mut m = build_model(&spec, 7).unwrap();
    for name in m.params.names().to_vec() {
        if name.starts_with("xr.enc.proj") {
            m.params.get_mut(&name).unwrap().fill(0.0);
        }
    }
    let batch = toy_batch(&spec, 3, 3, 8);
    let mut other = batch.clone();
    other.xr = Some(toy_batch(&spec, 3, 3, 99).xr.unwrap());
    assert_eq!(m.predict_proba(&batch).unwrap(), m.predict_proba(&other).unwrap());
}

#[test]
fn masked_modality_uses_mean_tensor() {
    let spec = toy_spec(ArchKind::MR2);
    let m = build_model(&spec, 9).unwrap();
    let batch = toy_batch(&spec, 3, 3, 10);
    let mut masked = batch.clone();
    masked.means = batch.modality_means();
    masked.masked.insert(Modality::T2map);
    let mut manual = batch.clone();
    let mean = masked.means[&Modality::T2map].clone();
    manual
        .mri
        .insert(Protocol::T2map, mean.broadcast(batch.mri[&Protocol::T2map].raw_dim()).unwrap().to_owned());
    assert_eq!(m.predict_proba(&masked).unwrap(), m.predict_proba(&manual).unwrap());
}

#[test]
fn checkpoint_survives_every_kind() {
    for kind in ArchKind::ALL {
        let m = build_model(&toy_spec(kind), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(buf, checkpoint_bytes(&m));
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), m);
    }
}

fn to_diff(e: kneefuse::Error) -> diffcore::DiffError {
    match e {
        kneefuse::Error::Diff(d) => d,
        other => panic!("{other}"),
    }
}

#[test]
fn architecture_gradients_match_finite_differences() {
    for kind in ArchKind::ALL {
        let spec = toy_spec(kind);
        for seed in 0..10u64 {
            let model = build_model(&spec, seed).unwrap();
            let batch = toy_batch(&spec, 2, 3, 100 + seed);
            let targets = [0u8, 1];
            let inputs: Vec<(Array, bool)> = model.params.values().iter().map(|v| (v.clone(), true)).collect();
            let report = grad_check_with(
                |tape, vars| {
                    let logits = model.logits_graph(tape, vars, &batch).map_err(to_diff)?;
                    focal_loss_graph(tape, logits, &targets, 2.0).map_err(to_diff)
                },
                &inputs,
                GradCheckOptions {
                    eps: 1e-5,
                    mode: Mode::Eval,
                    seed,
                    max_coords_per_input: Some(2),
                    sample_seed: seed,
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind} seed {seed}: {report:?}");
            assert!(report.checked > 0);
        }
    }
}
