//! Ensembling, muscle biomarkers and the two statistical tests used in the
//! evaluation: Pearson correlation and the Wilcoxon signed-rank test.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::volume::{BinaryMask, ProbabilityVolume};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_M: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("ensemble needs at least 2 maps, got {0}")]
    TooFewMaps(usize),
    #[error("geometry mismatch between inputs")]
    GeometryMismatch,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("height must be positive, got {0} m")]
    NonPositiveHeight(f64),
    #[error("need at least 3 paired points, got {0}")]
    TooFewPoints(usize),
    #[error("paired sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input sequence is constant")]
    ConstantInput,
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("every paired difference is zero")]
    AllZeroDifferences,
    #[error("no differences supplied")]
    EmptyInput,
}

// ---------------------------------------------------------------------------
// Ensembling and binarisation
// ---------------------------------------------------------------------------

/// Voxelwise arithmetic mean of two or more probability maps.
///
/// Each voxel's inputs are sorted before summation so the result does not
/// depend on argument order at all, not even in the last bit.
pub fn ensemble_mean(maps: &[ProbabilityVolume]) -> Result<ProbabilityVolume, AnalysisError> {
    if maps.len() < 2 {
        return Err(AnalysisError::TooFewMaps(maps.len()));
    }
    let geometry = maps[0].geometry();
    if maps.iter().any(|m| !m.geometry().matches(geometry)) {
        return Err(AnalysisError::GeometryMismatch);
    }
    let k = maps.len();
    let mean: Vec<f32> = (0..geometry.voxel_count())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(k),
            |values: &mut Vec<f32>, i| {
                values.clear();
                values.extend(maps.iter().map(|m| m.probabilities()[i]));
                values.sort_by(f32::total_cmp);
                let sum: f64 = values.iter().map(|&v| v as f64).sum();
                ((sum / k as f64) as f32).clamp(0.0, 1.0)
            },
        )
        .collect();
    Ok(ProbabilityVolume::new(geometry.clone(), mean).expect("mean of probabilities is a probability"))
}

pub(crate) fn check_threshold(threshold: f64) -> Result<(), AnalysisError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::InvalidThreshold(threshold))
    }
}

/// Foreground where `p >= threshold`; exact ties go to foreground.
pub fn binarize(map: &ProbabilityVolume, threshold: f64) -> Result<BinaryMask, AnalysisError> {
    check_threshold(threshold)?;
    let labels = map.probabilities().iter().map(|&p| u8::from(p as f64 >= threshold)).collect();
    Ok(BinaryMask::new(map.geometry().clone(), labels).expect("labels are 0/1"))
}

// ---------------------------------------------------------------------------
// Biomarkers
// ---------------------------------------------------------------------------

/// Skeletal muscle volume kept as a voxel count, so sums over disjoint
/// masks are exact integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletalMuscleVolume {
    pub voxel_count: u64,
    pub voxel_volume_mm3: f64,
}

impl SkeletalMuscleVolume {
    pub fn mm3(&self) -> f64 {
        self.voxel_count as f64 * self.voxel_volume_mm3
    }

    pub fn ml(&self) -> f64 {
        self.mm3() / 1000.0
    }

    /// Volume of the union of two disjoint masks on the same grid.
    pub fn try_add(self, other: Self) -> Result<Self, AnalysisError> {
        if self.voxel_volume_mm3 != other.voxel_volume_mm3 {
            return Err(AnalysisError::GeometryMismatch);
        }
        Ok(Self { voxel_count: self.voxel_count + other.voxel_count, voxel_volume_mm3: self.voxel_volume_mm3 })
    }
}

impl fmt::Display for SkeletalMuscleVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} mL", self.ml())
    }
}

pub fn compute_smv(mask: &BinaryMask) -> SkeletalMuscleVolume {
    SkeletalMuscleVolume {
        voxel_count: mask.foreground_count() as u64,
        voxel_volume_mm3: mask.geometry().voxel_volume_mm3(),
    }
}

/// SMV divided linearly by height (mL/m).
pub fn compute_smi(smv_ml: f64, height_m: f64) -> Result<f64, AnalysisError> {
    if height_m <= 0.0 || !height_m.is_finite() {
        return Err(AnalysisError::NonPositiveHeight(height_m));
    }
    Ok(smv_ml / height_m)
}

/// The conventional body-composition variant, SMV / height² (mL/m²).
pub fn compute_smi_height_squared(smv_ml: f64, height_m: f64) -> Result<f64, AnalysisError> {
    compute_smi(smv_ml, height_m).map(|v| v / height_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiomarkerResult {
    pub smv_ml: f64,
    pub smi: Option<f64>,
}

pub fn biomarkers(
    mask: &BinaryMask,
    height_m: Option<f64>,
    height_squared: bool,
) -> Result<BiomarkerResult, AnalysisError> {
    let smv_ml = compute_smv(mask).ml();
    let smi = match height_m {
        None => None,
        Some(h) if height_squared => Some(compute_smi_height_squared(smv_ml, h)?),
        Some(h) => Some(compute_smi(smv_ml, h)?),
    };
    Ok(BiomarkerResult { smv_ml, smi })
}

// ---------------------------------------------------------------------------
// Pearson
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p_two_sided: f64,
    pub n: usize,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<PearsonResult, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    // One square root of the product keeps exactly linear data at |r| = 1.
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p_two_sided = if r.abs() == 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(PearsonResult { r, p_two_sided, n })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    Greater,
    Less,
    TwoSided,
}

impl std::str::FromStr for Alternative {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            "two-sided" => Ok(Self::TwoSided),
            other => Err(format!("unknown alternative '{other}'")),
        }
    }
}

/// Which p-value path to take. `Auto` is exact up to [`EXACT_MAX_M`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    /// W+, the rank sum of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_effective: usize,
}

/// Ranks of `|d|` with mid-ranks for ties, returned doubled so they stay
/// integral; also the tie-group sizes.
fn doubled_midranks(abs: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1; doubled mean is i+j+2.
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of sign assignments giving each doubled rank sum.
fn signed_rank_distribution(doubled_ranks: &[u64]) -> Vec<u64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

pub fn wilcoxon_signed_rank(diffs: &[f64], alternative: Alternative) -> Result<TestResult, AnalysisError> {
    wilcoxon_signed_rank_with(diffs, alternative, Method::Auto)
}

pub fn wilcoxon_signed_rank_with(
    diffs: &[f64],
    alternative: Alternative,
    method: Method,
) -> Result<TestResult, AnalysisError> {
    if diffs.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let kept: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if kept.is_empty() {
        return Err(AnalysisError::AllZeroDifferences);
    }
    let m = kept.len();
    let abs: Vec<f64> = kept.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let w_plus_doubled: u64 = kept.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus_doubled as f64 / 2.0;

    let exact = match method {
        Method::Auto => m <= EXACT_MAX_M,
        Method::Exact => true,
        Method::Normal => false,
    };
    let (p_greater, p_less) = if exact {
        let dist = signed_rank_distribution(&ranks);
        let total = 2f64.powi(m as i32);
        let at = w_plus_doubled as usize;
        let ge: u64 = dist[at..].iter().sum();
        let le: u64 = dist[..=at].iter().sum();
        (ge as f64 / total, le as f64 / total)
    } else {
        let mf = m as f64;
        let mean = mf * (mf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term).sqrt();
        let normal = Normal::standard();
        let z_greater = (statistic - mean - 0.5) / sd;
        let z_less = (statistic - mean + 0.5) / sd;
        (normal.sf(z_greater), normal.cdf(z_less))
    };
    let p = match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => 2.0 * p_greater.min(p_less),
    };
    Ok(TestResult {
        statistic,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        method: if exact { TestMethod::Exact } else { TestMethod::NormalApproximation },
        n_effective: m,
    })
}
