//! Procedural MRI-like phantoms with analytic ground truth.
//!
//! A phantom is an elliptic body cylinder along z: a thin skin shell, a
//! subcutaneous fat rim, a central bone cylinder (cortex plus a darker
//! interior) and a ring of ellipsoidal muscle compartments between the two.
//! The ground-truth mask is the union of the ellipsoids, sampled at voxel
//! centres. All randomness comes from [`CounterRng`], so every output is a
//! pure function of the configuration.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::{SeriesMetadata, Sex, View};
use crate::preprocess::{extract_slices, minmax_normalize, stack_slices, SliceAxis};
use crate::rng::CounterRng;
use crate::volume::{BinaryMask, ProbabilityVolume, ScalarVolume, VolumeGeometry};

pub const MIN_DIM: usize = 16;
pub const MAX_NOISE_SIGMA: f64 = 0.5;
/// Intensities are multiples of this (fat in the T1-like profile).
pub const DYNAMIC_RANGE: f64 = 1000.0;

const STREAM_LAYOUT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_META: u64 = 3;
const STREAM_PROBABILITY: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastProfile {
    #[default]
    T1Like,
    T2fsLike,
}

impl ContrastProfile {
    fn intensities(self) -> TissueIntensities {
        match self {
            Self::T1Like => {
                TissueIntensities { air: 0.0, skin: 0.2, fat: 1.0, muscle: 0.45, cortex: 0.02, marrow: 0.1 }
            }
            // Fat suppressed; the skin shell is the bright reference so
            // per-slice normalisation always has the same ceiling.
            Self::T2fsLike => {
                TissueIntensities { air: 0.0, skin: 1.0, fat: 0.12, muscle: 0.4, cortex: 0.02, marrow: 0.08 }
            }
        }
    }

    /// Normalised intensity at the centre of the muscle band.
    pub fn muscle_center(self) -> f64 {
        let t = self.intensities();
        (t.muscle - t.air) / (t.fat.max(t.skin) - t.air)
    }

    pub fn series_description(self) -> &'static str {
        match self {
            Self::T1Like => "AX T1",
            Self::T2fsLike => "AX T2 FS",
        }
    }
}

impl FromStr for ContrastProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t1-like" | "t1" => Ok(Self::T1Like),
            "t2fs-like" | "t2fs" => Ok(Self::T2fsLike),
            other => Err(format!("unknown contrast profile '{other}'")),
        }
    }
}

struct TissueIntensities {
    air: f64,
    skin: f64,
    fat: f64,
    muscle: f64,
    cortex: f64,
    marrow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Voxel edge lengths in mm.
    pub spacing: [f64; 3],
    pub n_muscle_lobes: usize,
    /// Noise standard deviation as a fraction of the dynamic range.
    pub noise_sigma: f64,
    pub contrast_profile: ContrastProfile,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            n_muscle_lobes: 4,
            noise_sigma: 0.0,
            contrast_profile: ContrastProfile::T1Like,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let invalid = |m: String| Err(PhantomError::InvalidConfig(m));
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return invalid(format!("dims {:?} must be at least {MIN_DIM} per axis", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return invalid(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma) {
            return invalid(format!("noise_sigma {} outside [0, {MAX_NOISE_SIGMA}]", self.noise_sigma));
        }
        Ok(())
    }
}

/// An ellipsoid with one semi-axis pointing radially (rotated by `angle`
/// about z), in millimetres relative to the volume centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub angle: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, h] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / h).powi(2) <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes.iter().product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ScalarVolume,
    pub mask: BinaryMask,
    pub metadata: SeriesMetadata,
    pub lobes: Vec<Ellipsoid>,
}

/// Physical layout shared by every voxel.
struct Layout {
    half: [f64; 3],
    body: [f64; 2],
    fat_inner: f64,
    skin_inner: f64,
    bone_radius: f64,
    marrow_radius: f64,
    lobes: Vec<Ellipsoid>,
}

fn layout(config: &PhantomConfig) -> Layout {
    let rng = CounterRng::new(config.seed, STREAM_LAYOUT);
    let extent: Vec<f64> = (0..3).map(|a| config.dims[a] as f64 * config.spacing[a]).collect();
    let half = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];
    let body = [0.45 * extent[0] * rng.range_at(0, 0.95, 1.0), 0.40 * extent[1] * rng.range_at(1, 0.95, 1.0)];
    let min_in_plane_voxels = (body[0] / config.spacing[0]).min(body[1] / config.spacing[1]);
    // Normalised elliptic radius where the skin shell starts: at least a
    // voxel and a bit wide so every slice samples it.
    let skin_inner = 1.0 - (1.2 / min_in_plane_voxels).max(0.04);
    let fat_inner = skin_inner - 0.12;
    let bone_radius = 0.12 * body[0].min(body[1]);
    let marrow_radius = 0.65 * bone_radius;

    let n = config.n_muscle_lobes;
    let phase = rng.range_at(2, 0.0, TAU);
    let lobes = (0..n as u64)
        .map(|k| {
            let base = 16 + 8 * k;
            let angle = phase + TAU * k as f64 / n as f64;
            let (s, c) = angle.sin_cos();
            // Distance to the inner fat boundary along this direction.
            let boundary = fat_inner / ((c / body[0]).powi(2) + (s / body[1]).powi(2)).sqrt();
            let r_in = 1.3 * bone_radius;
            let r_out = 0.9 * boundary;
            let a = 0.4 * (r_out - r_in) * rng.range_at(base, 0.8, 1.0);
            let rc = r_in + (r_out - r_in) / 2.0;
            let mut b = a * rng.range_at(base + 1, 0.7, 1.0);
            if n > 1 {
                b = b.min(0.85 * rc * (PI / n as f64).sin());
            }
            let h = 0.35 * extent[2] * rng.range_at(base + 2, 0.9, 1.0);
            let z = extent[2] * rng.range_at(base + 3, -0.05, 0.05);
            Ellipsoid { center: [rc * c, rc * s, z], semi_axes: [a, b, h], angle }
        })
        .collect();
    Layout { half, body, fat_inner, skin_inner, bone_radius, marrow_radius, lobes }
}

/// Voxel-centre position in mm relative to the volume centre.
fn voxel_center(config: &PhantomConfig, half: &[f64; 3], i: usize) -> [f64; 3] {
    let [nx, ny, _] = config.dims;
    let idx = [i % nx, (i / nx) % ny, i / (nx * ny)];
    std::array::from_fn(|a| (idx[a] as f64 + 0.5) * config.spacing[a] - half[a])
}

const LOCATIONS: [&str; 6] = [
    "MRI thigh left",
    "MRI hip right with and without contrast",
    "MRI knee left",
    "MRI lower leg right",
    "MRI shoulder left",
    "MRI humerus right",
];
const RACES: [&str; 4] = ["Asian", "Black", "Other", "White"];

fn synthesize_metadata(config: &PhantomConfig) -> SeriesMetadata {
    let rng = CounterRng::new(config.seed, STREAM_META);
    let id = config.seed;
    SeriesMetadata {
        patient_id: format!("P{id:05}"),
        exam_id: format!("E{id:05}"),
        series_id: format!("S{id:05}"),
        series_description: config.contrast_profile.series_description().to_string(),
        protocol_description: LOCATIONS[rng.index_at(0, LOCATIONS.len())].to_string(),
        view: View::Axial,
        age: (18 + rng.index_at(1, 72)) as f64,
        sex: if rng.uniform_at(2) < 0.5 { Sex::Female } else { Sex::Male },
        race: RACES[rng.index_at(3, RACES.len())].to_string(),
        height_m: Some((rng.range_at(4, 1.5, 1.95) * 100.0).round() / 100.0),
        year: Some(2016 + rng.index_at(5, 5) as i32),
    }
}

pub fn generate_phantom(config: &PhantomConfig) -> Result<Phantom, PhantomError> {
    config.validate()?;
    let geometry = VolumeGeometry::from_spacing(config.dims, config.spacing)
        .map_err(|e| PhantomError::InvalidConfig(e.to_string()))?;
    let lay = layout(config);
    let tissue = config.contrast_profile.intensities();
    let noise = CounterRng::new(config.seed, STREAM_NOISE);
    let sigma = config.noise_sigma * DYNAMIC_RANGE;

    let (voxels, labels): (Vec<f32>, Vec<u8>) = (0..geometry.voxel_count())
        .into_par_iter()
        .map(|i| {
            let p = voxel_center(config, &lay.half, i);
            let rho = ((p[0] / lay.body[0]).powi(2) + (p[1] / lay.body[1]).powi(2)).sqrt();
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let muscle = lay.lobes.iter().any(|e| e.contains(p));
            let level = if rho >= 1.0 {
                tissue.air
            } else if muscle {
                tissue.muscle
            } else if rho >= lay.skin_inner {
                tissue.skin
            } else if r <= lay.marrow_radius {
                tissue.marrow
            } else if r <= lay.bone_radius {
                tissue.cortex
            } else {
                // Subcutaneous rim (rho >= fat_inner) and intermuscular fat.
                tissue.fat
            };
            let mut value = level * DYNAMIC_RANGE;
            if sigma > 0.0 {
                value += sigma * noise.normal_at(i as u64);
            }
            (value as f32, u8::from(muscle))
        })
        .unzip();
    debug_assert!(lay.fat_inner < lay.skin_inner);

    Ok(Phantom {
        image: ScalarVolume::new(geometry.clone(), voxels).expect("finite intensities"),
        mask: BinaryMask::new(geometry, labels).expect("0/1 labels"),
        metadata: synthesize_metadata(config),
        lobes: lay.lobes,
    })
}

/// One pass of a 3-tap box filter along `axis`, edges replicated.
fn box_pass(values: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    (0..values.len())
        .into_par_iter()
        .map(|i| {
            let pos = (i / stride) % len;
            let prev = if pos == 0 { i } else { i - stride };
            let next = if pos + 1 == len { i } else { i + stride };
            (values[prev] + values[i] + values[next]) / 3.0
        })
        .collect()
}

/// Corrupts a mask into a model-like probability map: `blur_iters` passes
/// of 3×3×3 box smoothing, then N(0, σ) noise, then clamping to [0, 1].
pub fn simulate_probability_map(gt: &BinaryMask, blur_iters: usize, noise_sigma: f64, seed: u64) -> ProbabilityVolume {
    let dims = gt.geometry().dims();
    let mut values: Vec<f64> = gt.labels().iter().map(|&l| l as f64).collect();
    for _ in 0..blur_iters {
        for axis in 0..3 {
            values = box_pass(&values, dims, axis);
        }
    }
    let rng = CounterRng::new(seed, STREAM_PROBABILITY);
    let probabilities = values
        .into_par_iter()
        .enumerate()
        .map(|(i, v)| {
            let noisy = if noise_sigma > 0.0 { v + noise_sigma * rng.normal_at(i as u64) } else { v };
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    ProbabilityVolume::new(gt.geometry().clone(), probabilities).expect("clamped to [0, 1]")
}

const BAND_HALF_WIDTH: f64 = 0.12;
const BAND_SOFTNESS: f64 = 0.02;

/// A classical intensity-window segmenter: per-slice min-max normalisation
/// followed by a logistic on the distance from the profile's muscle band.
pub fn reference_segment(volume: &ScalarVolume, profile: ContrastProfile) -> ProbabilityVolume {
    let axis = SliceAxis::Third;
    let center = profile.muscle_center();
    let slices: Vec<_> = extract_slices(volume, axis, "reference")
        .par_iter()
        .map(|s| {
            let n = minmax_normalize(s);
            let values = n
                .values()
                .iter()
                .map(|&v| {
                    let d = (v as f64 / 255.0 - center).abs();
                    (1.0 / (1.0 + ((d - BAND_HALF_WIDTH) / BAND_SOFTNESS).exp())) as f32
                })
                .collect();
            n.with_values(n.height(), n.width(), values)
        })
        .collect();
    let stacked = stack_slices(&slices, volume.geometry(), axis).expect("slices come from this volume");
    ProbabilityVolume::new(volume.geometry().clone(), stacked).expect("logistic output lies in [0, 1]")
}

/// Configuration for the `index`-th case of a synthetic cohort: the lobe
/// count cycles so muscle volumes vary across cases.
pub fn cohort_case_config(base: &PhantomConfig, seed: u64) -> PhantomConfig {
    PhantomConfig { seed, n_muscle_lobes: 2 + (seed % 5) as usize, ..base.clone() }
}

/// Seed for the `model`-th simulated prediction of a case.
pub fn model_seed(case_seed: u64, model: u64) -> u64 {
    CounterRng::new(case_seed, 0x6d6f_6465_6c00 + model).u64_at(0)
}
