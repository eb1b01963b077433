//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Array, Gradients, Mode, Tape, Var};

/// Runs `f` on a fresh tape holding `inputs` as leaves.
pub fn forward_eval<F>(f: F, inputs: &[(Array, bool)], mode: Mode, seed: u64) -> Result<(Var, Vec<Var>, Tape)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|(v, rg)| tape.input(v.clone(), *rg)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((out, vars, tape))
}

/// Forward then backward in one call.
pub fn backward_grad<F>(f: F, inputs: &[(Array, bool)], mode: Mode, seed: u64) -> Result<(f64, Vec<Option<Array>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (out, vars, mut tape) = forward_eval(f, inputs, mode, seed)?;
    let value = tape.scalar(out);
    let mut grads: Gradients = tape.backward(out)?;
    Ok((value, vars.iter().map(|v| grads.take(*v)).collect()))
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub mode: Mode,
    /// Dropout seed; reused for every evaluation so masks match.
    pub seed: u64,
    /// Check at most this many coordinates per input (uniformly sampled).
    pub max_coords_per_input: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            mode: Mode::Eval,
            seed: 0,
            max_coords_per_input: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |a - n| / max(1, |a|, |n|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps evaluations crossed a ReLU kink.
    pub skipped_kinks: usize,
}

/// Central-difference check of every `requires_grad` input of `f`.
pub fn grad_check<F>(f: F, inputs: &[(Array, bool)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[(Array, bool)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (out, vars, mut tape) = forward_eval(&f, inputs, opts.mode, opts.seed)?;
    let base_sig = tape.kink_signature();
    let mut grads = tape.backward(out)?;

    let eval = |vals: &[(Array, bool)]| -> Result<(f64, u64)> {
        let (o, _, t) = forward_eval(&f, vals, opts.mode, opts.seed)?;
        Ok((t.scalar(o), t.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut work: Vec<(Array, bool)> = inputs
        .iter()
        .map(|(a, rg)| (a.as_standard_layout().into_owned(), *rg))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };

    for (k, var) in vars.iter().enumerate() {
        if !inputs[k].1 {
            continue;
        }
        let analytic = grads.take(*var).expect("gradient for requires_grad input");
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let a_flat: Vec<f64> = analytic.iter().cloned().collect();
        for idx in coords {
            let orig = work[k].0.as_slice().unwrap()[idx];
            set_flat(&mut work[k].0, idx, orig + opts.eps);
            let (fp, sp) = eval(&work)?;
            set_flat(&mut work[k].0, idx, orig - opts.eps);
            let (fm, sm) = eval(&work)?;
            set_flat(&mut work[k].0, idx, orig);
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = a_flat[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn set_flat(a: &mut Array, idx: usize, v: f64) {
    a.as_slice_mut().expect("standard layout")[idx] = v;
}
