use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kneefuse::io::{read_vol1, write_vol1, ScalarType};
use ndarray::{Array4, IxDyn};

fn kneefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kneefuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kneefuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Noiseless mono-exponential phantom; T2 in [20, 80] ms, I0 in [500, 1500].
fn phantom(dir: &Path) -> (std::path::PathBuf, Vec<f64>) {
    let (nx, ny, nz, ne) = (5, 4, 3, 7);
    let delta = 10.0;
    let t2 = |i: usize, j: usize, k: usize| 20.0 + 60.0 * ((i * 12 + j * 3 + k) as f64) / 59.0;
    let i0 = |i: usize, j: usize, k: usize| 500.0 + 1000.0 * ((i + 2 * j + 5 * k) as f64 % 7.0) / 6.0;
    let data = Array4::from_shape_fn((nx, ny, nz, ne), |(i, j, k, e)| {
        i0(i, j, k) * (-((e + 1) as f64 * delta) / t2(i, j, k)).exp()
    });
    let mut truth = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                truth.push(t2(i, j, k));
            }
        }
    }
    let path = dir.join("me.vol");
    write_vol1(fs::File::create(&path).unwrap(), &data.into_dyn(), &[0.5, 0.5, 3.0, delta], ScalarType::F64).unwrap();
    (path, truth)
}

#[test]
fn fit_t2_recovers_noiseless_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let (input, truth) = phantom(dir.path());
    let out = dir.path().join("t2.vol");
    let report = dir.path().join("fit.json");
    ok(&["fit-t2", "--input", p(&input), "--out", p(&out), "--report", p(&report)]);
    let map = read_vol1(fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(map.data.shape(), &[5, 4, 3]);
    assert_eq!(map.spacing, vec![0.5, 0.5, 3.0]);
    for (got, want) in map.data.iter().zip(&truth) {
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(rep["result"]["valid_voxels"], 60);
}

#[test]
fn rank_picks_the_bundled_winner() {
    let out = ok(&["rank"]);
    assert_eq!(out.lines().next(), Some("F8"));
}

#[test]
fn exit_codes() {
    assert_eq!(kneefuse(&["--help"]).status.code(), Some(0));
    assert_eq!(kneefuse(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(kneefuse(&["synth"]).status.code(), Some(64));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.vol");
    let out = dir.path().join("x.vol");
    assert_eq!(kneefuse(&["fit-t2", "--input", p(&missing), "--out", p(&out)]).status.code(), Some(1));
    // a 3D volume is not a multi-echo acquisition
    let flat = dir.path().join("flat.vol");
    let v = ndarray::ArrayD::<f64>::ones(IxDyn(&[2, 2, 2]));
    write_vol1(fs::File::create(&flat).unwrap(), &v, &[1.0, 1.0, 1.0], ScalarType::F64).unwrap();
    assert_eq!(kneefuse(&["fit-t2", "--input", p(&flat), "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(kneefuse(&["synth", "--out", p(dir.path()), "--prevalence", "1.5"]).status.code(), Some(2));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d), "--n", "30", "--scale", "0.05", "--seed", "1"]);
    }
    let ta = tree(&a);
    assert!(ta.iter().any(|(n, _)| n == "cohort.csv"));
    assert!(ta.iter().any(|(n, _)| n.ends_with("_T2ME.vol")));
    assert_eq!(ta, tree(&b));
    let c = dir.path().join("c");
    ok(&["synth", "--out", p(&c), "--n", "30", "--scale", "0.05", "--seed", "2"]);
    assert_ne!(ta, tree(&c));
}
