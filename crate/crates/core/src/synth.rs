//! Synthetic cohorts with phantom images.
//!
//! Each subject carries a latent joint-health score `h ~ N(0, 1)`, shifted
//! by `-effect_size` for progressors. The score only reaches the images:
//! radiographic joint-space width, cartilage shell thickness and intensity
//! in the structural MRI, and cartilage T2 in the multi-echo stack. Clinical
//! variables are drawn independently of the label.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{check_horizon, Sex, SubjectRecord, VISITS};
use crate::error::{contract, Result};
use crate::imaging::{geometry, scaled, Protocol, Volume};
use crate::relaxometry::{default_echo_times, fit_t2_volume, FitConfig, MultiEchoVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub prevalence: f64,
    /// Horizon at which the progressors' KLG increase is placed.
    pub horizon: u32,
    /// Site codes with sampling weights.
    pub sites: Vec<(String, f64)>,
    pub scale: f64,
    /// Latent-health shift of progressors, in standard deviations.
    pub effect_size: f64,
    /// Multiplier on all image noise; 0 gives noiseless phantoms.
    pub noise: f64,
    pub protocols: Vec<Protocol>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            prevalence: 0.15,
            horizon: 24,
            sites: ["A", "B", "C", "D", "E"]
                .iter()
                .map(|s| (s.to_string(), if *s == "D" { 0.25 } else { 0.1875 }))
                .collect(),
            scale: 0.1,
            effect_size: 3.0,
            noise: 1.0,
            protocols: Protocol::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectImages {
    pub volumes: BTreeMap<Protocol, Volume>,
    pub multi_echo: Option<MultiEchoVolume>,
    /// Knee center of the radiograph, (row, col) in pixels.
    pub knee_center: [f64; 2],
    pub latent_health: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub seed: u64,
    pub records: Vec<SubjectRecord>,
    pub images: Vec<SubjectImages>,
    /// Intended status at `config.horizon`, aligned with `records`.
    pub progressor: Vec<bool>,
}

/// Baseline KLG 0..3 frequencies of the reference cohort.
const BASELINE_KLG_WEIGHTS: [f64; 4] = [1555.0, 750.0, 1113.0, 549.0];

pub fn image_ref(id: &str, tag: &str) -> String {
    format!("volumes/{id}_{tag}.vol")
}

pub fn synth_cohort(config: &SynthConfig, seed: u64) -> Result<SynthCohort> {
    if !(config.prevalence > 0.0 && config.prevalence < 1.0) {
        return Err(contract(format!(
            "prevalence must lie in (0, 1), got {}",
            config.prevalence
        )));
    }
    if config.n == 0 {
        return Err(contract("cohort size must be positive"));
    }
    if !(config.scale > 0.0 && config.scale <= 1.0) {
        return Err(contract("scale must lie in (0, 1]"));
    }
    if config.sites.is_empty() || config.sites.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(contract("sites need non-negative weights"));
    }
    if !(config.effect_size.is_finite() && config.noise >= 0.0) {
        return Err(contract("effect size must be finite and noise non-negative"));
    }
    check_horizon(config.horizon)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (config.n as f64 * config.prevalence).round() as usize;
    let mut progressor: Vec<bool> = (0..config.n).map(|i| i < n_pos).collect();
    progressor.shuffle(&mut rng);

    let site_pick = WeightedIndex::new(config.sites.iter().map(|(_, w)| *w))
        .map_err(|e| contract(format!("site weights: {e}")))?;
    let klg_pick = WeightedIndex::new(BASELINE_KLG_WEIGHTS).expect("static weights");
    let age = Normal::<f64>::new(61.1, 9.2).unwrap();
    let bmi = Normal::<f64>::new(28.5, 4.8).unwrap();
    let womac = Exp::<f64>::new(1.0 / 9.8).unwrap();
    let round1 = |v: f64| (v * 10.0).round() / 10.0;

    let mut records = Vec::with_capacity(config.n);
    for (i, &prog) in progressor.iter().enumerate() {
        let id = format!("S{i:04}");
        let base = klg_pick.sample(&mut rng) as u8;
        let mut klg = BTreeMap::new();
        klg.insert(0, base);
        let event = if prog {
            let window: Vec<u32> = VISITS[1..].iter().copied().filter(|&m| m <= config.horizon).collect();
            Some(*window.choose(&mut rng).unwrap())
        } else {
            None
        };
        let raised = if base <= 1 { 2 } else { base + 1 };
        for &m in &VISITS[1..] {
            let g = match event {
                Some(e) if m >= e => raised,
                _ => base,
            };
            klg.insert(m, g);
        }
        let mut image_refs = BTreeMap::new();
        for &p in &config.protocols {
            image_refs.insert(p, image_ref(&id, p.tag()));
        }
        records.push(SubjectRecord {
            id,
            age: round1(age.sample(&mut rng).clamp(45.0, 79.0)),
            sex: if rng.random_bool(0.583) { Sex::F } else { Sex::M },
            bmi: round1(bmi.sample(&mut rng).clamp(16.0, 50.0)),
            womac_total: round1(womac.sample(&mut rng).min(96.0)),
            prior_injury: rng.random_bool(0.267),
            prior_surgery: rng.random_bool(0.107),
            site: config.sites[site_pick.sample(&mut rng)].0.clone(),
            klg_by_visit: klg,
            image_refs,
        });
    }

    let images = progressor
        .par_iter()
        .enumerate()
        .map(|(i, &prog)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            subject_images(config, prog, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthCohort {
        config: config.clone(),
        seed,
        records,
        images,
        progressor,
    })
}

/// Full-scale acquisition grid of each phantom: voxel counts and spacing (mm).
fn grid(p: Protocol) -> ([usize; 3], [f64; 3]) {
    match p {
        Protocol::Dess => ([384, 384, 160], [0.365, 0.365, 0.7]),
        Protocol::Tse => ([384, 384, 31], [0.357, 0.357, 3.3]),
        Protocol::T2map => ([384, 384, 27], [0.3125, 0.3125, 3.0]),
        Protocol::Xr => ([1200, 1200, 1], [0.15, 0.15, 1.0]),
    }
}

/// Grid at `scale` with the field of view preserved.
fn scaled_grid(p: Protocol, scale: f64) -> ([usize; 3], [f64; 3]) {
    let (n, s) = grid(p);
    let mut out_n = [0; 3];
    let mut out_s = [0.0; 3];
    for a in 0..3 {
        out_n[a] = scaled(n[a], scale);
        out_s[a] = s[a] * n[a] as f64 / out_n[a] as f64;
    }
    (out_n, out_s)
}

struct Joint {
    /// Ellipsoid center offset from the field center, mm.
    shift: [f64; 3],
    semi: [f64; 3],
    /// Cartilage shell thickness, mm.
    shell: f64,
}

impl Joint {
    /// 0 outside, 1 bone, 2 cartilage.
    fn tissue(&self, mm: [f64; 3]) -> u8 {
        let rho = (0..3)
            .map(|a| ((mm[a] - self.shift[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let outer = 1.0 + self.shell / self.semi.iter().cloned().fold(f64::INFINITY, f64::min);
        if rho < 1.0 {
            1
        } else if rho < outer {
            2
        } else {
            0
        }
    }
}

fn subject_images(config: &SynthConfig, progressor: bool, rng: &mut ChaCha8Rng) -> Result<SubjectImages> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let h = std_normal.sample(rng) - if progressor { config.effect_size } else { 0.0 };
    let mut jitter = |amp: f64| rng.random_range(-amp..=amp);
    let joint = Joint {
        shift: [jitter(4.0), jitter(4.0), jitter(4.0)],
        semi: [30.0 * (1.0 + jitter(0.1)), 45.0 * (1.0 + jitter(0.1)), 35.0 * (1.0 + jitter(0.1))],
        shell: (6.0 + 1.5 * h).clamp(1.0, 12.0),
    };
    let center_jitter = [jitter(10.0), jitter(10.0)];
    let noise = config.noise;

    let mut volumes = BTreeMap::new();
    let mut multi_echo = None;
    let mut knee_center = [0.0; 2];
    for &p in &config.protocols {
        match p {
            Protocol::Xr => {
                let (v, c) = radiograph(config.scale, h, center_jitter, noise, rng)?;
                volumes.insert(p, v);
                knee_center = c;
            }
            Protocol::Dess => {
                let levels = [40.0, 350.0, (900.0 + 80.0 * h).max(100.0)];
                volumes.insert(p, structural(p, config.scale, &joint, levels, 25.0 * noise, geometry::DESS_BITS, rng)?);
            }
            Protocol::Tse => {
                let levels = [60.0, 1200.0, (1800.0 + 150.0 * h).max(200.0)];
                volumes.insert(p, structural(p, config.scale, &joint, levels, 50.0 * noise, geometry::TSE_BITS, rng)?);
            }
            Protocol::T2map => {
                let me = multi_echo_phantom(config.scale, &joint, h, 8.0 * noise, rng)?;
                let map = fit_t2_volume(&me, &FitConfig::default());
                let sp = me.spacing().to_vec();
                volumes.insert(p, Volume::new(map.t2.into_dyn(), sp, 16)?);
                multi_echo = Some(me);
            }
        }
    }
    Ok(SubjectImages {
        volumes,
        multi_echo,
        knee_center,
        latent_health: h,
    })
}

/// Physical coordinate (mm, relative to the field center) of a voxel center.
fn voxel_mm(idx: [usize; 3], n: [usize; 3], sp: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = (idx[a] as f64 - (n[a] as f64 - 1.0) / 2.0) * sp[a];
    }
    out
}

fn structural(
    p: Protocol,
    scale: f64,
    joint: &Joint,
    levels: [f64; 3],
    noise_sd: f64,
    bits: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let (n, sp) = scaled_grid(p, scale);
    let max = ((1u32 << bits) - 1) as f64;
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Array3::zeros((n[0], n[1], n[2]));
    for ((r, c, s), v) in data.indexed_iter_mut() {
        let t = joint.tissue(voxel_mm([r, c, s], n, sp));
        let e = if noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = (levels[t as usize] + e).round().clamp(0.0, max);
    }
    Volume::new(data.into_dyn(), sp.to_vec(), bits)
}

fn multi_echo_phantom(scale: f64, joint: &Joint, h: f64, noise_sd: f64, rng: &mut ChaCha8Rng) -> Result<MultiEchoVolume> {
    let (n, sp) = scaled_grid(Protocol::T2map, scale);
    let te = default_echo_times();
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    // (I0, T2) of background, bone, cartilage
    let params = [(30.0, 50.0), (500.0, 25.0), (800.0, (40.0 + 5.0 * h).clamp(10.0, 90.0))];
    let mut data = Array4::zeros((n[0], n[1], n[2], te.len()));
    for r in 0..n[0] {
        for c in 0..n[1] {
            for s in 0..n[2] {
                let (i0, t2) = params[joint.tissue(voxel_mm([r, c, s], n, sp)) as usize];
                for (e, &t) in te.iter().enumerate() {
                    let eps = if noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
                    data[[r, c, s, e]] = (i0 * (-t / t2).exp() + eps).max(0.0);
                }
            }
        }
    }
    MultiEchoVolume::new(data, te, sp)
}

/// Femur condyle above and tibial plateau below a joint space whose width
/// tracks the latent health.
fn radiograph(
    scale: f64,
    h: f64,
    center_jitter_mm: [f64; 2],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, [f64; 2])> {
    let (n, sp) = scaled_grid(Protocol::Xr, scale);
    let jsw = (6.0 + 1.0 * h).clamp(0.5, 12.0);
    let cr = (n[0] as f64 - 1.0) / 2.0 + center_jitter_mm[0] / sp[0];
    let cc = (n[1] as f64 - 1.0) / 2.0 + center_jitter_mm[1] / sp[1];
    let max = ((1u32 << geometry::TSE_BITS) - 1) as f64;
    let pixel_noise = Normal::new(0.0, (0.02 * noise).max(f64::MIN_POSITIVE)).unwrap();
    let img = Array2::from_shape_fn((n[0], n[1]), |(r, c)| {
        let y = (r as f64 - cr) * sp[0];
        let x = (c as f64 - cc) * sp[1];
        let femur_c = -jsw / 2.0 - 25.0;
        let femur = ((y - femur_c) / 25.0).powi(2) + (x / 40.0).powi(2) < 1.0 || (y < femur_c && x.abs() < 22.0);
        let tibia = y > jsw / 2.0 && x.abs() < 40.0 && y < 60.0;
        let soft = x.abs() < 65.0;
        if femur || tibia {
            0.7 + 0.05 * (x * 0.8).sin() * (y * 0.8).cos()
        } else if soft {
            0.25
        } else {
            0.05
        }
    });
    let data = img.mapv(|v| {
        let e = if noise > 0.0 { pixel_noise.sample(rng) } else { 0.0 };
        ((v + e) * max).round().clamp(0.0, max)
    });
    Ok((Volume::new(data.into_dyn(), sp[..2].to_vec(), geometry::TSE_BITS)?, [cr, cc]))
}
