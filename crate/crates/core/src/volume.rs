//! Voxel-grid geometry and the three volume flavours used throughout the
//! pipeline: raw intensities, binary labels and foreground probabilities.
//!
//! All volumes store voxels in x-fastest order: the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

use thiserror::Error;

/// Relative tolerance used when comparing spacings between grids and
/// against affine column norms.
pub const SPACING_REL_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("expected {expected} voxels, got {actual}")]
    VoxelCount { expected: usize, actual: usize },
    #[error("non-finite voxel value at index {0}")]
    NonFinite(usize),
    #[error("label {value} at index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: f32 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    InvalidProbability { index: usize, value: f32 },
}

/// Row-major 4×4 voxel-to-world matrix.
pub type Affine = [[f64; 4]; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
}

// Every field is validated finite on construction.
impl Eq for VolumeGeometry {}

impl VolumeGeometry {
    /// Builds a geometry, checking dims, spacing and the affine against
    /// each other.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(VolumeError::InvalidGeometry(format!("voxel count overflows for {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGeometry(format!("non-positive spacing {spacing:?}")));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::InvalidGeometry("non-finite affine entry".into()));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::InvalidGeometry(format!(
                "affine last row must be (0, 0, 0, 1), got {:?}",
                affine[3]
            )));
        }
        for (col, &s) in spacing.iter().enumerate() {
            let norm = (0..3).map(|row| affine[row][col].powi(2)).sum::<f64>().sqrt();
            if (norm - s).abs() > SPACING_REL_TOL * s {
                return Err(VolumeError::InvalidGeometry(format!(
                    "affine column {col} has norm {norm}, spacing is {s}"
                )));
            }
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Geometry with a diagonal affine built from the spacing.
    pub fn from_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, diagonal_affine(spacing))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel volume in cubic millimetres.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// True when dims are identical and spacings agree within
    /// [`SPACING_REL_TOL`].
    pub fn matches(&self, other: &VolumeGeometry) -> bool {
        self.dims == other.dims && self.spacing.iter().zip(other.spacing.iter()).all(|(a, b)| spacing_close(*a, *b))
    }
}

pub(crate) fn spacing_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= SPACING_REL_TOL * a.abs().max(b.abs())
}

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    [[spacing[0], 0.0, 0.0, 0.0], [0.0, spacing[1], 0.0, 0.0], [0.0, 0.0, spacing[2], 0.0], [0.0, 0.0, 0.0, 1.0]]
}

/// Anything that can be written out as a NIFTI payload.
pub trait VoxelGrid {
    fn geometry(&self) -> &VolumeGeometry;
    fn value_at(&self, index: usize) -> f32;
}

fn check_count(geometry: &VolumeGeometry, actual: usize) -> Result<(), VolumeError> {
    let expected = geometry.voxel_count();
    if expected != actual {
        return Err(VolumeError::VoxelCount { expected, actual });
    }
    Ok(())
}

/// MRI intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: VolumeGeometry,
    voxels: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: VolumeGeometry, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        check_count(&geometry, voxels.len())?;
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    /// Smallest and largest voxel value.
    pub fn range(&self) -> (f32, f32) {
        value_range(&self.voxels)
    }
}

pub(crate) fn value_range(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl VoxelGrid for ScalarVolume {
    fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    fn value_at(&self, index: usize) -> f32 {
        self.voxels[index]
    }
}

/// Muscle / non-muscle labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    geometry: VolumeGeometry,
    labels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(geometry: VolumeGeometry, labels: Vec<u8>) -> Result<Self, VolumeError> {
        check_count(&geometry, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(VolumeError::InvalidLabel { index: i, value: labels[i] as f32 });
        }
        Ok(Self { geometry, labels })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        let n = geometry.voxel_count();
        Self { geometry, labels: vec![0; n] }
    }

    /// Reinterprets an intensity volume whose voxels are all exactly 0 or 1.
    pub fn from_scalar(volume: &ScalarVolume) -> Result<Self, VolumeError> {
        let labels = volume
            .voxels()
            .iter()
            .enumerate()
            .map(|(index, &value)| match value {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                value => Err(VolumeError::InvalidLabel { index, value }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { geometry: volume.geometry().clone(), labels })
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn to_probability(&self) -> ProbabilityVolume {
        ProbabilityVolume {
            geometry: self.geometry.clone(),
            probabilities: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        ScalarVolume { geometry: self.geometry.clone(), voxels: self.labels.iter().map(|&l| l as f32).collect() }
    }
}

impl VoxelGrid for BinaryMask {
    fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    fn value_at(&self, index: usize) -> f32 {
        self.labels[index] as f32
    }
}

/// Per-voxel foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    geometry: VolumeGeometry,
    probabilities: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn new(geometry: VolumeGeometry, probabilities: Vec<f32>) -> Result<Self, VolumeError> {
        check_count(&geometry, probabilities.len())?;
        if let Some(i) = probabilities.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(VolumeError::InvalidProbability { index: i, value: probabilities[i] });
        }
        Ok(Self { geometry, probabilities })
    }

    /// Accepts an intensity volume whose voxels already lie in `[0, 1]`.
    pub fn from_scalar(volume: ScalarVolume) -> Result<Self, VolumeError> {
        let ScalarVolume { geometry, voxels } = volume;
        Self::new(geometry, voxels)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn probabilities(&self) -> &[f32] {
        &self.probabilities
    }
}

impl VoxelGrid for ProbabilityVolume {
    fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    fn value_at(&self, index: usize) -> f32 {
        self.probabilities[index]
    }
}
