//! Spacing-aware volumes and the radiograph / MRI preprocessing chains.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// 2D `[row, col]` or 3D `[row, col, slice]` intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: ArrayD<f64>,
    spacing: Vec<f64>,
    dtype_bits: u32,
}

impl Volume {
    pub fn new(data: ArrayD<f64>, spacing: Vec<f64>, dtype_bits: u32) -> Result<Self> {
        if !(2..=3).contains(&data.ndim()) {
            return Err(contract(format!("volume must be 2D or 3D, got {}D", data.ndim())));
        }
        if spacing.len() != data.ndim() {
            return Err(contract(format!(
                "spacing has {} entries for a {}D volume",
                spacing.len(),
                data.ndim()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(contract("spacing entries must be strictly positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract("volume data must be finite"));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            dtype_bits,
        })
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn into_data(self) -> ArrayD<f64> {
        self.data
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn dtype_bits(&self) -> u32 {
        self.dtype_bits
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    fn with_data(&self, data: ArrayD<f64>) -> Self {
        Self {
            data,
            spacing: self.spacing.clone(),
            dtype_bits: self.dtype_bits,
        }
    }

    fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Zeroes the `n_bits` least significant bits of every (integer) value.
pub fn truncate_lsb(v: &Volume, n_bits: u32) -> Result<Volume> {
    if n_bits >= v.dtype_bits {
        return Err(contract(format!(
            "n_bits {n_bits} must be below the source bit depth {}",
            v.dtype_bits
        )));
    }
    if v.data.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(contract("truncate_lsb requires non-negative integer values"));
    }
    let mask = !((1u64 << n_bits) - 1);
    let mut out = v.with_data(v.data.mapv(|x| ((x as u64) & mask) as f64));
    out.dtype_bits -= n_bits;
    Ok(out)
}

/// Linear-interpolation percentile of already sorted values (`pct` in [0, 100]).
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn percentile_clip(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..100.0).contains(&lo_pct) || !(hi_pct > lo_pct && hi_pct <= 100.0) {
        return Err(contract(format!(
            "percentile range [{lo_pct}, {hi_pct}] must satisfy 0 <= lo < hi <= 100"
        )));
    }
    if v.data.is_empty() {
        return Err(contract("percentile_clip on an empty volume"));
    }
    let mut sorted: Vec<f64> = v.data.iter().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    Ok(v.with_data(v.data.mapv(|x| x.clamp(lo, hi))))
}

/// Clamps values into a fixed range.
pub fn value_clip(v: &Volume, lo: f64, hi: f64) -> Volume {
    v.with_data(v.data.mapv(|x| x.clamp(lo, hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Center,
    Random,
}

/// Trims `margin_trim` voxels from both ends of each axis, then extracts a
/// `size` window at the center (ties toward the lower index) or at random.
///
/// A slice axis that is exactly one voxel short after trimming is padded by
/// replicating its last slice; any other deficit is an error.
pub fn crop<R: Rng + ?Sized>(
    v: &Volume,
    size: &[usize],
    mode: CropMode,
    margin_trim: &[usize],
    rng: &mut R,
) -> Result<Volume> {
    let nd = v.ndim();
    if size.len() != nd || margin_trim.len() != nd {
        return Err(contract(format!(
            "crop size/trim need {nd} entries, got {}/{}",
            size.len(),
            margin_trim.len()
        )));
    }
    let mut data = v.data.clone();
    for ax in 0..nd {
        let len = data.len_of(Axis(ax));
        let trim = margin_trim[ax];
        let avail = len.checked_sub(2 * trim).unwrap_or(0);
        if size[ax] == 0 {
            return Err(contract(format!("crop size on axis {ax} must be positive")));
        }
        let pad = ax == 2 && avail + 1 == size[ax];
        if (avail < size[ax] && !pad) || len < 2 * trim || avail == 0 {
            return Err(contract(format!(
                "crop of {} (+{} trim per side) does not fit axis {ax} of length {len}",
                size[ax], trim
            )));
        }
        data = data
            .slice_axis(Axis(ax), Slice::from(trim..trim + avail))
            .to_owned();
        if pad {
            let last = data.index_axis(Axis(ax), avail - 1).insert_axis(Axis(ax)).to_owned();
            data = ndarray::concatenate(Axis(ax), &[data.view(), last.view()])
                .expect("matching shapes");
            continue;
        }
        let max_off = avail - size[ax];
        let off = match mode {
            CropMode::Center => max_off / 2,
            CropMode::Random => rng.random_range(0..=max_off),
        };
        data = data
            .slice_axis(Axis(ax), Slice::from(off..off + size[ax]))
            .to_owned();
    }
    Ok(v.with_data(data.as_standard_layout().into_owned()))
}

/// Bilinear sample of a 2D plane; positions outside the grid give 0.
fn sample_bilinear(plane: &ndarray::ArrayView2<f64>, r: f64, c: f64) -> f64 {
    const EDGE: f64 = 1e-6;
    let (h, w) = plane.dim();
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
    if r < -EDGE || c < -EDGE || r > hm + EDGE || c > wm + EDGE {
        return 0.0;
    }
    let r = r.clamp(0.0, hm);
    let c = c.clamp(0.0, wm);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = plane[[r0, c0]] * (1.0 - fc) + plane[[r0, c1]] * fc;
    let bot = plane[[r1, c0]] * (1.0 - fc) + plane[[r1, c1]] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Rotates every in-plane slice counter-clockwise (as displayed, rows down)
/// about the slice center.
pub fn rotate_inplane(v: &Volume, angle_deg: f64) -> Result<Volume> {
    if !angle_deg.is_finite() {
        return Err(contract("rotation angle must be finite"));
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let rotate_plane = |src: ndarray::ArrayView2<f64>, mut dst: ndarray::ArrayViewMut2<f64>| {
        let (h, w) = src.dim();
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for ((i, j), out) in dst.indexed_iter_mut() {
            let (dr, dc) = (i as f64 - cr, j as f64 - cc);
            let sc = dc * cos - dr * sin;
            let sr = dr * cos + dc * sin;
            *out = sample_bilinear(&src, cr + sr, cc + sc);
        }
    };
    let mut out = ArrayD::zeros(v.data.raw_dim());
    if v.ndim() == 2 {
        let src = v.data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dst = out.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        rotate_plane(src, dst);
    } else {
        for (src, dst) in v.data.axis_iter(Axis(2)).zip(out.axis_iter_mut(Axis(2))) {
            rotate_plane(
                src.into_dimensionality().unwrap(),
                dst.into_dimensionality().unwrap(),
            );
        }
    }
    Ok(v.with_data(out))
}

/// `x^gamma` on data already in [0, 1]; `0^0` is 1.
pub fn gamma_correct(v: &Volume, gamma: f64) -> Result<Volume> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(contract(format!("gamma must be >= 0, got {gamma}")));
    }
    if v.data.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(contract("gamma_correct requires values in [0, 1]"));
    }
    Ok(v.with_data(v.data.mapv(|x| if gamma == 0.0 { 1.0 } else { x.powf(gamma) })))
}

/// Separable linear resampling with pixel-center alignment.
pub fn resample(v: &Volume, target_shape: &[usize]) -> Result<Volume> {
    if target_shape.len() != v.ndim() {
        return Err(contract(format!(
            "target shape has {} axes, volume has {}",
            target_shape.len(),
            v.ndim()
        )));
    }
    if target_shape.iter().any(|&n| n == 0) {
        return Err(contract("target shape entries must be positive"));
    }
    let mut data = v.data.clone();
    let mut spacing = v.spacing.clone();
    for (ax, &n_out) in target_shape.iter().enumerate() {
        let n_in = data.len_of(Axis(ax));
        if n_in == n_out {
            continue;
        }
        let scale = n_in as f64 / n_out as f64;
        let taps: Vec<(usize, usize, f64)> = (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        let mut shape = data.shape().to_vec();
        shape[ax] = n_out;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (src, mut dst) in data.lanes(Axis(ax)).into_iter().zip(out.lanes_mut(Axis(ax))) {
            for (o, &(i0, i1, f)) in dst.iter_mut().zip(&taps) {
                *o = src[i0] * (1.0 - f) + src[i1] * f;
            }
        }
        data = out;
        spacing[ax] *= scale;
    }
    Ok(Volume {
        data,
        spacing,
        dtype_bits: v.dtype_bits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    UnitInterval,
    ZeroMeanUnitRange,
}

/// Constant volumes map to all zeros in both modes.
pub fn normalize(v: &Volume, mode: NormMode) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return v.with_data(ArrayD::zeros(v.data.raw_dim()));
    }
    let data = match mode {
        NormMode::UnitInterval => v.data.mapv(|x| (x - lo) / range),
        NormMode::ZeroMeanUnitRange => {
            let mean = v.data.mean().unwrap_or(0.0);
            v.data.mapv(|x| (x - mean) / range)
        }
    };
    v.with_data(data)
}

/// Square region of `size_mm` around `center` (row, col in pixels),
/// bilinearly resampled onto an isotropic grid of `out_spacing_mm`.
pub fn extract_roi(v: &Volume, center: [f64; 2], size_mm: f64, out_spacing_mm: f64) -> Result<Volume> {
    if v.ndim() != 2 {
        return Err(contract("ROI extraction expects a 2D radiograph"));
    }
    if !(size_mm > 0.0 && out_spacing_mm > 0.0) {
        return Err(contract("ROI size and spacing must be positive"));
    }
    let n = ((size_mm / out_spacing_mm).round() as usize).max(1);
    let plane = v.data.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let (sr, sc) = (v.spacing[0], v.spacing[1]);
    let half = (n as f64 - 1.0) / 2.0;
    let out = ndarray::Array2::from_shape_fn((n, n), |(i, j)| {
        let r = center[0] + (i as f64 - half) * out_spacing_mm / sr;
        let c = center[1] + (j as f64 - half) * out_spacing_mm / sc;
        sample_bilinear(&plane, r, c)
    });
    Ok(Volume {
        data: out.into_dyn(),
        spacing: vec![out_spacing_mm; 2],
        dtype_bits: v.dtype_bits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Xr,
    Dess,
    Tse,
    T2map,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Xr, Protocol::Dess, Protocol::Tse, Protocol::T2map];

    pub fn tag(self) -> &'static str {
        match self {
            Protocol::Xr => "XR",
            Protocol::Dess => "DESS",
            Protocol::Tse => "TSE",
            Protocol::T2map => "T2MAP",
        }
    }

    pub fn is_mri(self) -> bool {
        self != Protocol::Xr
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| contract(format!("unknown protocol tag {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Train,
    Eval,
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(PipelineMode::Train),
            "eval" => Ok(PipelineMode::Eval),
            _ => Err(contract(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub crop_mode: CropMode,
    pub apply_gamma: bool,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg_range: (-15.0, 15.0),
            gamma_range: (0.0, 2.0),
            crop_mode: CropMode::Random,
            apply_gamma: true,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.rotation_deg_range;
        let (g0, g1) = self.gamma_range;
        if !(r0 <= r1 && r0 >= -180.0 && r1 <= 180.0) {
            return Err(contract("rotation range must lie within [-180, 180]"));
        }
        if !(g0 <= g1 && g0 >= 0.0 && g1 <= 10.0) {
            return Err(contract("gamma range must lie within [0, 10]"));
        }
        Ok(())
    }
}

/// Physical and voxel constants of the full-size chains.
pub mod geometry {
    pub const XR_ROI_MM: f64 = 140.0;
    pub const XR_ROI_SPACING_MM: f64 = 0.195;
    pub const XR_CROP: usize = 700;
    pub const XR_OUT: usize = 350;
    pub const EDGE_TRIM: usize = 16;
    pub const LSB_BITS: u32 = 3;
    pub const DESS_BITS: u32 = 11;
    pub const TSE_BITS: u32 = 12;
    pub const DESS_CROP: [usize; 3] = [320, 320, 128];
    pub const TSE_CROP: [usize; 3] = [320, 320, 32];
    pub const T2_CROP: [usize; 3] = [320, 320, 25];
    pub const DESS_OUT: [usize; 3] = [160, 160, 64];
    pub const TSE_OUT: [usize; 3] = [160, 160, 32];
    pub const T2_OUT: [usize; 3] = [160, 160, 25];
    pub const T2_CLIP_MS: (f64, f64) = (0.0, 100.0);
    pub const PERCENTILE_CLIP: (f64, f64) = (0.0, 99.9);
}

/// Shrinks a full-scale voxel count, never below one.
pub fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Roi { size_mm: f64, spacing_mm: f64 },
    TruncateLsb { bits: u32 },
    PercentileClip { lo: f64, hi: f64 },
    ValueClip { lo: f64, hi: f64 },
    Crop { size: Vec<usize>, trim: Vec<usize>, mode: CropMode },
    Normalize(NormMode),
    Rotate { range: (f64, f64) },
    Gamma { range: (f64, f64) },
    Resample { shape: Vec<usize> },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Roi { .. } => "roi",
            Stage::TruncateLsb { .. } => "truncate_lsb",
            Stage::PercentileClip { .. } => "percentile_clip",
            Stage::ValueClip { .. } => "value_clip",
            Stage::Crop { .. } => "crop",
            Stage::Normalize(NormMode::UnitInterval) => "unit_interval",
            Stage::Normalize(NormMode::ZeroMeanUnitRange) => "zero_mean_unit_range",
            Stage::Rotate { .. } => "rotate",
            Stage::Gamma { .. } => "gamma",
            Stage::Resample { .. } => "resample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub protocol: Protocol,
    pub mode: PipelineMode,
    pub stages: Vec<Stage>,
    pub seed: u64,
}

pub fn build_pipeline(
    protocol: Protocol,
    mode: PipelineMode,
    scale: f64,
    augment: &AugmentConfig,
) -> Result<Pipeline> {
    use geometry::*;
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(contract(format!("scale must lie in (0, 1], got {scale}")));
    }
    augment.validate()?;
    let train = mode == PipelineMode::Train;
    let crop_mode = if train { augment.crop_mode } else { CropMode::Center };
    let s3 = |a: [usize; 3]| a.iter().map(|&n| scaled(n, scale)).collect::<Vec<_>>();
    let trim = scaled(EDGE_TRIM, scale);

    let mut stages = Vec::new();
    let (crop_size, trim_v, out) = match protocol {
        Protocol::Xr => {
            stages.push(Stage::Roi {
                size_mm: XR_ROI_MM,
                spacing_mm: XR_ROI_SPACING_MM / scale,
            });
            (vec![scaled(XR_CROP, scale); 2], vec![0, 0], vec![scaled(XR_OUT, scale); 2])
        }
        Protocol::Dess | Protocol::Tse => {
            stages.push(Stage::TruncateLsb { bits: LSB_BITS });
            stages.push(Stage::PercentileClip {
                lo: PERCENTILE_CLIP.0,
                hi: PERCENTILE_CLIP.1,
            });
            let (c, o) = if protocol == Protocol::Dess {
                (DESS_CROP, DESS_OUT)
            } else {
                (TSE_CROP, TSE_OUT)
            };
            (s3(c), vec![trim, trim, 0], s3(o))
        }
        Protocol::T2map => {
            stages.push(Stage::ValueClip {
                lo: T2_CLIP_MS.0,
                hi: T2_CLIP_MS.1,
            });
            (s3(T2_CROP), vec![trim, trim, 0], s3(T2_OUT))
        }
    };
    stages.push(Stage::Crop {
        size: crop_size,
        trim: trim_v,
        mode: crop_mode,
    });
    stages.push(Stage::Normalize(NormMode::UnitInterval));
    if train {
        stages.push(Stage::Rotate {
            range: augment.rotation_deg_range,
        });
        if augment.apply_gamma && protocol != Protocol::T2map {
            stages.push(Stage::Gamma {
                range: augment.gamma_range,
            });
        }
    }
    stages.push(Stage::Normalize(NormMode::ZeroMeanUnitRange));
    stages.push(Stage::Resample { shape: out });
    Ok(Pipeline {
        protocol,
        mode,
        stages,
        seed: augment.rng_seed,
    })
}

impl Pipeline {
    pub fn has_stage(&self, name: &str) -> bool {
        self.stages.iter().any(|s| s.name() == name)
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(Stage::name).collect()
    }

    /// Runs the chain with the pipeline's own seed; `knee_center` (pixels)
    /// defaults to the image center for radiographs.
    pub fn apply(&self, v: &Volume, knee_center: Option<[f64; 2]>) -> Result<Volume> {
        self.apply_seeded(v, knee_center, self.seed)
    }

    pub fn apply_seeded(&self, v: &Volume, knee_center: Option<[f64; 2]>, seed: u64) -> Result<Volume> {
        Ok(self.trace(v, knee_center, seed)?.pop().expect("non-empty chain").1)
    }

    /// Output after every stage, in order.
    pub fn trace(
        &self,
        v: &Volume,
        knee_center: Option<[f64; 2]>,
        seed: u64,
    ) -> Result<Vec<(&'static str, Volume)>> {
        let expected = if self.protocol == Protocol::Xr { 2 } else { 3 };
        if v.ndim() != expected {
            return Err(contract(format!(
                "{} pipeline expects a {expected}D volume, got {}D",
                self.protocol,
                v.ndim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = v.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = match stage {
                Stage::Roi { size_mm, spacing_mm } => {
                    let center = knee_center.unwrap_or_else(|| {
                        let s = cur.shape();
                        [(s[0] as f64 - 1.0) / 2.0, (s[1] as f64 - 1.0) / 2.0]
                    });
                    extract_roi(&cur, center, *size_mm, *spacing_mm)?
                }
                Stage::TruncateLsb { bits } => truncate_lsb(&cur, *bits)?,
                Stage::PercentileClip { lo, hi } => percentile_clip(&cur, *lo, *hi)?,
                Stage::ValueClip { lo, hi } => value_clip(&cur, *lo, *hi),
                Stage::Crop { size, trim, mode } => crop(&cur, size, *mode, trim, &mut rng)?,
                Stage::Normalize(m) => normalize(&cur, *m),
                Stage::Rotate { range } => {
                    let angle = uniform(&mut rng, *range);
                    rotate_inplane(&cur, angle)?
                }
                Stage::Gamma { range } => {
                    let g = uniform(&mut rng, *range);
                    let clamped = cur.with_data(cur.data.mapv(|x| x.clamp(0.0, 1.0)));
                    gamma_correct(&clamped, g)?
                }
                Stage::Resample { shape } => resample(&cur, shape)?,
            };
            out.push((stage.name(), cur.clone()));
        }
        Ok(out)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
