//! Voxel-wise monoexponential T2 fitting, `I(TE) = I0 · exp(-TE / T2)`.
//!
//! Each voxel is initialised by a weighted log-linear regression over its
//! strictly positive samples, then refined with damped Gauss-Newton
//! (Levenberg-Marquardt) on the nonlinear model using every echo.

use ndarray::{Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Raw multi-echo acquisition, indexed `[row, col, slice, echo]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEchoVolume {
    data: Array4<f64>,
    echo_times: Vec<f64>,
    spacing: [f64; 3],
}

impl MultiEchoVolume {
    pub fn new(data: Array4<f64>, echo_times: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        if echo_times.len() < 2 {
            return Err(contract("multi-echo volume needs at least 2 echoes"));
        }
        if data.shape()[3] != echo_times.len() {
            return Err(contract(format!(
                "echo axis has {} entries but {} echo times were given",
                data.shape()[3],
                echo_times.len()
            )));
        }
        if echo_times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(contract("echo times must be positive and finite"));
        }
        if echo_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract("echo times must be strictly increasing"));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(contract("spacing entries must be strictly positive"));
        }
        if data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(contract("multi-echo intensities must be finite and non-negative"));
        }
        Ok(Self {
            data,
            echo_times,
            spacing,
        })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn echo_times(&self) -> &[f64] {
        &self.echo_times
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence when every relative parameter change is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Range the stored T2 map is clipped to (milliseconds); `None` disables.
    pub clip_ms: Option<(f64, f64)>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            clip_ms: Some((0.0, 100.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub i0: f64,
    pub t2: f64,
    pub residual_rms: f64,
    pub valid: bool,
}

impl VoxelFit {
    const INVALID: VoxelFit = VoxelFit {
        i0: 0.0,
        t2: 0.0,
        residual_rms: 0.0,
        valid: false,
    };
}

const T2_MAX_MS: f64 = 1e4;

/// Least-squares (I0, T2) for one voxel.
pub fn fit_t2_voxel(signal: &[f64], echo_times: &[f64], config: &FitConfig) -> Result<VoxelFit> {
    if signal.len() != echo_times.len() {
        return Err(contract(format!(
            "signal has {} samples but {} echo times were given",
            signal.len(),
            echo_times.len()
        )));
    }
    if signal.len() < 2 {
        return Err(contract("at least 2 echoes are required"));
    }
    if signal.iter().chain(echo_times).any(|v| !v.is_finite()) {
        return Err(contract("signal and echo times must be finite"));
    }

    let Some((mut a, mut t2)) = log_linear_init(signal, echo_times) else {
        return Ok(VoxelFit::INVALID);
    };
    let a_max = 10.0 * signal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let in_bounds = |a: f64, t2: f64| (0.0..=a_max).contains(&a) && t2 > 0.0 && t2 <= T2_MAX_MS;
    if !in_bounds(a, t2) {
        return Ok(VoxelFit::INVALID);
    }

    let cost = |a: f64, t2: f64| -> f64 {
        signal
            .iter()
            .zip(echo_times)
            .map(|(&y, &t)| {
                let r = a * (-t / t2).exp() - y;
                r * r
            })
            .sum()
    };

    let mut current = cost(a, t2);
    let mut lambda = 1e-3;
    for _ in 0..config.max_iterations {
        // normal equations of the linearised residual
        let (mut jaa, mut jat, mut jtt, mut ga, mut gt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&y, &t) in signal.iter().zip(echo_times) {
            let e = (-t / t2).exp();
            let r = a * e - y;
            let da = e;
            let dt = a * e * t / (t2 * t2);
            jaa += da * da;
            jat += da * dt;
            jtt += dt * dt;
            ga += da * r;
            gt += dt * r;
        }
        let m11 = jaa * (1.0 + lambda);
        let m22 = jtt * (1.0 + lambda);
        let det = m11 * m22 - jat * jat;
        if !(det.abs() > 0.0) || !det.is_finite() {
            break;
        }
        let step_a = -(m22 * ga - jat * gt) / det;
        let step_t = -(m11 * gt - jat * ga) / det;

        let rel = (step_a.abs() / a.abs().max(f64::MIN_POSITIVE)).max(step_t.abs() / t2.abs());
        if rel < config.tolerance {
            break;
        }
        let (na, nt) = (a + step_a, t2 + step_t);
        let next = if nt > 0.0 { cost(na, nt) } else { f64::INFINITY };
        if next < current {
            if !in_bounds(na, nt) {
                return Ok(VoxelFit::INVALID);
            }
            a = na;
            t2 = nt;
            current = next;
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    if !(a.is_finite() && t2.is_finite()) {
        return Ok(VoxelFit::INVALID);
    }
    Ok(VoxelFit {
        i0: a,
        t2,
        residual_rms: (current / signal.len() as f64).sqrt(),
        valid: true,
    })
}

/// Weighted (w = y²) regression of ln y on TE over positive samples.
fn log_linear_init(signal: &[f64], echo_times: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = signal
        .iter()
        .zip(echo_times)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &t)| (t, y.ln(), y * y))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let tm = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let um = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - tm) * (p.0 - tm)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - tm) * (p.1 - um)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return None;
    }
    let t2 = -1.0 / slope;
    let a = (um - slope * tm).exp();
    (a.is_finite() && t2.is_finite()).then_some((a, t2))
}

/// Fitted parameter volumes sharing the source's spatial shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    pub i0: Array3<f64>,
    pub t2: Array3<f64>,
    pub residual_rms: Array3<f64>,
    pub valid_mask: Array3<bool>,
    pub spacing: [f64; 3],
}

/// Fits every voxel independently, then clips the T2 map.
pub fn fit_t2_volume(volume: &MultiEchoVolume, config: &FitConfig) -> ParameterMap {
    let [nr, nc, ns] = volume.spatial_shape();
    let te = volume.echo_times();
    let data = volume.data();
    let fits: Vec<VoxelFit> = (0..nr * nc * ns)
        .into_par_iter()
        .map(|flat| {
            let (r, rem) = (flat / (nc * ns), flat % (nc * ns));
            let (c, s) = (rem / ns, rem % ns);
            let signal: Vec<f64> = data.slice(ndarray::s![r, c, s, ..]).to_vec();
            fit_t2_voxel(&signal, te, config).unwrap_or(VoxelFit::INVALID)
        })
        .collect();

    let shape = (nr, nc, ns);
    let mut i0 = Array3::zeros(shape);
    let mut t2 = Array3::zeros(shape);
    let mut rms = Array3::zeros(shape);
    let mut valid = Array3::from_elem(shape, false);
    for (((f, a), t), (m, v)) in fits
        .iter()
        .zip(i0.iter_mut())
        .zip(t2.iter_mut())
        .zip(rms.iter_mut().zip(valid.iter_mut()))
    {
        if f.valid {
            *a = f.i0;
            *t = match config.clip_ms {
                Some((lo, hi)) => f.t2.clamp(lo, hi),
                None => f.t2,
            };
            *m = f.residual_rms;
            *v = true;
        }
    }
    ParameterMap {
        i0,
        t2,
        residual_rms: rms,
        valid_mask: valid,
        spacing: volume.spacing(),
    }
}

/// Noiseless decay curve, used by phantoms and tests.
pub fn monoexponential(i0: f64, t2: f64, echo_times: &[f64]) -> Vec<f64> {
    echo_times.iter().map(|&t| i0 * (-t / t2).exp()).collect()
}

/// The default acquisition: 7 echoes from 10 to 70 ms.
pub fn default_echo_times() -> Vec<f64> {
    (1..=7).map(|k| 10.0 * k as f64).collect()
}

impl ParameterMap {
    /// Number of voxels with a valid fit.
    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn slice_count(&self) -> usize {
        self.t2.len_of(Axis(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn noiseless_seven_echo_recovery() {
        let te = default_echo_times();
        let sig = monoexponential(1000.0, 40.0, &te);
        let f = fit_t2_voxel(&sig, &te, &FitConfig::default()).unwrap();
        assert!(f.valid);
        assert!(rel(f.i0, 1000.0) < 1e-6 && rel(f.t2, 40.0) < 1e-6, "{f:?}");
        assert!(f.residual_rms <= 1e-8 * 1000.0);
    }

    #[test]
    fn two_echo_closed_form() {
        let te = [10.0, 70.0];
        let sig = [778.8008, 173.7739];
        // independent closed form: T2 = dTE / ln(s1/s2), I0 = s1·exp(TE1/T2)
        let t2 = (70.0 - 10.0) / (778.8008f64 / 173.7739).ln();
        let i0 = 778.8008 * (10.0 / t2).exp();
        assert!((t2 - 40.0).abs() < 1e-4);
        assert!((i0 - 1000.0).abs() < 1e-2);
        let f = fit_t2_voxel(&sig, &te, &FitConfig::default()).unwrap();
        assert!(rel(f.t2, t2) < 1e-12, "{} vs {t2}", f.t2);
        assert!(rel(f.i0, i0) < 1e-12);
    }

    #[test]
    fn all_zero_voxel_is_invalid() {
        let te = default_echo_times();
        let f = fit_t2_voxel(&[0.0; 7], &te, &FitConfig::default()).unwrap();
        assert_eq!(f, VoxelFit::INVALID);
    }

    #[test]
    fn single_positive_sample_is_invalid() {
        let te = default_echo_times();
        let f = fit_t2_voxel(&[5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &te, &FitConfig::default()).unwrap();
        assert!(!f.valid);
    }

    #[test]
    fn rising_signal_is_invalid() {
        let te = [10.0, 20.0, 30.0];
        let f = fit_t2_voxel(&[1.0, 2.0, 4.0], &te, &FitConfig::default()).unwrap();
        assert!(!f.valid);
    }

    #[test]
    fn contract_violations() {
        let cfg = FitConfig::default();
        assert!(fit_t2_voxel(&[1.0, 2.0], &[10.0], &cfg).is_err());
        assert!(fit_t2_voxel(&[1.0], &[10.0], &cfg).is_err());
        assert!(fit_t2_voxel(&[1.0, f64::NAN], &[10.0, 20.0], &cfg).is_err());
        assert!(fit_t2_voxel(&[1.0, 0.5], &[10.0, f64::INFINITY], &cfg).is_err());
    }

    #[test]
    fn uses_non_positive_samples_in_refinement() {
        // last echo clamped to zero: init ignores it, refinement still sees it
        let te = default_echo_times();
        let mut sig = monoexponential(500.0, 30.0, &te);
        sig[6] = 0.0;
        let f = fit_t2_voxel(&sig, &te, &FitConfig::default()).unwrap();
        assert!(f.valid);
        assert!(f.residual_rms > 0.0);
    }

    #[test]
    fn volume_constructor_validates() {
        let data = Array4::zeros((2, 2, 1, 3));
        assert!(MultiEchoVolume::new(data.clone(), vec![10.0, 20.0], [1.0; 3]).is_err());
        assert!(MultiEchoVolume::new(data.clone(), vec![10.0, 10.0, 20.0], [1.0; 3]).is_err());
        assert!(MultiEchoVolume::new(data.clone(), vec![10.0, 20.0, 30.0], [1.0, 0.0, 1.0]).is_err());
        assert!(MultiEchoVolume::new(data, vec![10.0, 20.0, 30.0], [1.0; 3]).is_ok());
    }
}
