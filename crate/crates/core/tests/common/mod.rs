//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls into the library's
//! metric or statistics code.

#![allow(dead_code)]

use std::path::PathBuf;

use muscle_eval::rng::CounterRng;
use muscle_eval::{BinaryMask, ScalarVolume, VolumeGeometry};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Counts and ratios computed voxel by voxel with no shared helpers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteScore {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub dsc: f64,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub hss: Option<f64>,
}

pub fn brute_score(pred: &[u8], gt: &[u8]) -> BruteScore {
    assert_eq!(pred.len(), gt.len());
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        match (pred[i] == 1, gt[i] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let dsc = if tp + fp + fn_ == 0 { 1.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
    let se = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let sp = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
    let hss = match (se, sp) {
        (Some(a), Some(b)) if a + b > 0.0 => Some(2.0 * a * b / (a + b)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    BruteScore { tp, fp, fn_, tn, dsc, se, sp, hss }
}

/// One-sided P(W+ ≥ observed) by walking all 2^m sign patterns of the
/// midranked absolute differences. Zeros are dropped first.
pub fn enumerate_wilcoxon_greater(diffs: &[f64]) -> f64 {
    let kept: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let m = kept.len();
    assert!(m > 0 && m <= 20);
    // Midranks by pairwise comparison: rank = 1 + #smaller + #equal-others / 2.
    let ranks: Vec<f64> = kept
        .iter()
        .map(|d| {
            let a = d.abs();
            let smaller = kept.iter().filter(|o| o.abs() < a).count() as f64;
            let equal = kept.iter().filter(|o| o.abs() == a).count() as f64;
            smaller + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = kept.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let mut hits = 0u64;
    for pattern in 0u64..(1 << m) {
        let w: f64 = (0..m).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << m) as f64
}

pub fn random_mask_pair(rng: &CounterRng, k: u64) -> (BinaryMask, BinaryMask) {
    let mut c = k * 10_000;
    let mut next = || {
        c += 1;
        c
    };
    let dims = [1 + rng.index_at(next(), 16), 1 + rng.index_at(next(), 16), 1 + rng.index_at(next(), 16)];
    let n = dims.iter().product::<usize>();
    let density_p = rng.uniform_at(next());
    let density_g = rng.uniform_at(next());
    let pred: Vec<u8> = (0..n).map(|_| (rng.uniform_at(next()) < density_p) as u8).collect();
    let gt: Vec<u8> = (0..n).map(|_| (rng.uniform_at(next()) < density_g) as u8).collect();
    let g = VolumeGeometry::from_spacing(dims, [1.0, 1.0, 1.0]).unwrap();
    (BinaryMask::new(g.clone(), pred).unwrap(), BinaryMask::new(g, gt).unwrap())
}

pub fn random_volume(rng: &CounterRng, k: u64, dtype: i16) -> ScalarVolume {
    let mut c = k * 100_000;
    let mut next = || {
        c += 1;
        c
    };
    let dims = [1 + rng.index_at(next(), 12), 1 + rng.index_at(next(), 12), 1 + rng.index_at(next(), 12)];
    let spacing = [rng.range_at(next(), 0.3, 4.0), rng.range_at(next(), 0.3, 4.0), rng.range_at(next(), 0.5, 6.0)];
    let n = dims.iter().product::<usize>();
    let voxels: Vec<f32> = (0..n)
        .map(|_| match dtype {
            2 => rng.index_at(next(), 256) as f32,
            4 => rng.index_at(next(), 65536) as f32 - 32768.0,
            _ => (rng.normal_at(next()) * 1e3) as f32,
        })
        .collect();
    ScalarVolume::new(VolumeGeometry::from_spacing(dims, spacing).unwrap(), voxels).unwrap()
}
