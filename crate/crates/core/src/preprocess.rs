//! Volume → model-space slices and back.
//!
//! Volumes are cut into 2D slices along one axis, each slice is min-max
//! normalised to `[0, 255]` on its own and resized to the model's input
//! size. Predictions made in model space are resized back to the native
//! in-plane grid and restacked.
//!
//! Resizing uses pixel-center alignment: output pixel `d` samples source
//! coordinate `(d + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{value_range, ProbabilityVolume, ScalarVolume, VolumeError, VolumeGeometry};

/// Model input edge length.
pub const MODEL_SIZE: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("invalid target size {height}x{width}")]
    InvalidSize { height: usize, width: usize },
    #[error("expected {expected} slices along the slice axis, got {actual}")]
    SliceCountMismatch { expected: usize, actual: usize },
    #[error("slice {index} is {height}x{width}, expected {expected_height}x{expected_width}")]
    SliceShapeMismatch { index: usize, height: usize, width: usize, expected_height: usize, expected_width: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    First,
    Second,
    #[default]
    Third,
}

impl SliceAxis {
    pub fn index(self) -> usize {
        match self {
            Self::First => 0,
            Self::Second => 1,
            Self::Third => 2,
        }
    }

    /// In-plane axes as `(column axis, row axis)`, in increasing order.
    pub fn plane(self) -> (usize, usize) {
        match self {
            Self::First => (1, 2),
            Self::Second => (0, 2),
            Self::Third => (0, 1),
        }
    }
}

impl std::str::FromStr for SliceAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "first" | "0" | "x" => Ok(Self::First),
            "second" | "1" | "y" => Ok(Self::Second),
            "third" | "2" | "z" => Ok(Self::Third),
            other => Err(format!("unknown slice axis '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceProvenance {
    pub volume_id: String,
    pub axis: SliceAxis,
    pub index: usize,
}

/// A row-major 2D image cut from a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub provenance: SliceProvenance,
}

impl Slice2D {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f32>,
        provenance: SliceProvenance,
    ) -> Result<Self, PreprocessError> {
        if height == 0 || width == 0 {
            return Err(PreprocessError::InvalidSize { height, width });
        }
        if values.len() != height * width {
            return Err(VolumeError::VoxelCount { expected: height * width, actual: values.len() }.into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i).into());
        }
        Ok(Self { height, width, values, provenance })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub(crate) fn with_values(&self, height: usize, width: usize, values: Vec<f32>) -> Self {
        Self { height, width, values, provenance: self.provenance.clone() }
    }
}

/// Cuts a volume into `dims[axis]` slices in ascending index order.
pub fn extract_slices(volume: &ScalarVolume, axis: SliceAxis, volume_id: &str) -> Vec<Slice2D> {
    let geometry = volume.geometry();
    let dims = geometry.dims();
    let (col_axis, row_axis) = axis.plane();
    let (width, height) = (dims[col_axis], dims[row_axis]);
    let voxels = volume.voxels();
    (0..dims[axis.index()])
        .map(|k| {
            let mut values = Vec::with_capacity(width * height);
            for row in 0..height {
                for col in 0..width {
                    values.push(voxels[plane_index(geometry, axis, k, row, col)]);
                }
            }
            Slice2D {
                height,
                width,
                values,
                provenance: SliceProvenance { volume_id: volume_id.to_string(), axis, index: k },
            }
        })
        .collect()
}

fn plane_index(geometry: &VolumeGeometry, axis: SliceAxis, k: usize, row: usize, col: usize) -> usize {
    match axis {
        SliceAxis::First => geometry.index(k, col, row),
        SliceAxis::Second => geometry.index(col, k, row),
        SliceAxis::Third => geometry.index(col, row, k),
    }
}

/// Inverse of [`extract_slices`]: stacks slices along `axis` into a grid
/// with the given geometry.
pub fn stack_slices(
    slices: &[Slice2D],
    geometry: &VolumeGeometry,
    axis: SliceAxis,
) -> Result<Vec<f32>, PreprocessError> {
    let dims = geometry.dims();
    let depth = dims[axis.index()];
    if slices.len() != depth {
        return Err(PreprocessError::SliceCountMismatch { expected: depth, actual: slices.len() });
    }
    let (col_axis, row_axis) = axis.plane();
    let (width, height) = (dims[col_axis], dims[row_axis]);
    let mut out = vec![0.0f32; geometry.voxel_count()];
    for (k, slice) in slices.iter().enumerate() {
        if slice.height != height || slice.width != width {
            return Err(PreprocessError::SliceShapeMismatch {
                index: k,
                height: slice.height,
                width: slice.width,
                expected_height: height,
                expected_width: width,
            });
        }
        for row in 0..height {
            for col in 0..width {
                out[plane_index(geometry, axis, k, row, col)] = slice.get(row, col);
            }
        }
    }
    Ok(out)
}

/// Maps a slice linearly onto `[0, 255]`; constant slices become zero.
pub fn minmax_normalize(slice: &Slice2D) -> Slice2D {
    let (lo, hi) = value_range(&slice.values);
    let values = if hi > lo {
        let (lo, range) = (lo as f64, hi as f64 - lo as f64);
        slice.values.iter().map(|&v| ((v as f64 - lo) / range * 255.0) as f32).collect()
    } else {
        vec![0.0; slice.values.len()]
    };
    slice.with_values(slice.height, slice.width, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Source coordinate for output index `dst` under pixel-center alignment.
fn source_coord(dst: usize, input: usize, output: usize) -> f64 {
    let src = (dst as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    src.clamp(0.0, (input - 1) as f64)
}

/// Nearest source index; exact halves go to the smaller index.
fn nearest_index(src: f64, input: usize) -> usize {
    ((src - 0.5).ceil().max(0.0) as usize).min(input - 1)
}

struct Taps {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(dst: usize, input: usize, output: usize) -> Taps {
    let src = source_coord(dst, input, output);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    Taps { lo, hi, t: src - lo as f64 }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn resize(slice: &Slice2D, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Slice2D, PreprocessError> {
    if out_h == 0 || out_w == 0 {
        return Err(PreprocessError::InvalidSize { height: out_h, width: out_w });
    }
    if out_h == slice.height && out_w == slice.width {
        return Ok(slice.clone());
    }
    let (in_h, in_w) = (slice.height, slice.width);
    let mut values = Vec::with_capacity(out_h * out_w);
    match mode {
        ResizeMode::Nearest => {
            let cols: Vec<usize> = (0..out_w).map(|c| nearest_index(source_coord(c, in_w, out_w), in_w)).collect();
            for r in 0..out_h {
                let row = nearest_index(source_coord(r, in_h, out_h), in_h);
                values.extend(cols.iter().map(|&c| slice.get(row, c)));
            }
        }
        ResizeMode::Bilinear => {
            let cols: Vec<Taps> = (0..out_w).map(|c| taps(c, in_w, out_w)).collect();
            for r in 0..out_h {
                let rt = taps(r, in_h, out_h);
                for ct in &cols {
                    let a = slice.get(rt.lo, ct.lo) as f64;
                    let b = slice.get(rt.lo, ct.hi) as f64;
                    let c = slice.get(rt.hi, ct.lo) as f64;
                    let d = slice.get(rt.hi, ct.hi) as f64;
                    let v = lerp(lerp(a, b, ct.t), lerp(c, d, ct.t), rt.t);
                    // Rounding must not push the result outside the four taps.
                    let lo = a.min(b).min(c).min(d);
                    let hi = a.max(b).max(c).max(d);
                    values.push(v.clamp(lo, hi) as f32);
                }
            }
        }
    }
    Ok(slice.with_values(out_h, out_w, values))
}

/// Extract → per-slice normalise → bilinear resize to `MODEL_SIZE²`.
pub fn to_model_space(volume: &ScalarVolume, axis: SliceAxis, volume_id: &str) -> Vec<Slice2D> {
    to_model_space_sized(volume, axis, volume_id, MODEL_SIZE).expect("MODEL_SIZE is non-zero")
}

/// [`to_model_space`] with a configurable square output size.
pub fn to_model_space_sized(
    volume: &ScalarVolume,
    axis: SliceAxis,
    volume_id: &str,
    size: usize,
) -> Result<Vec<Slice2D>, PreprocessError> {
    extract_slices(volume, axis, volume_id)
        .into_par_iter()
        .map(|s| resize(&minmax_normalize(&s), size, size, ResizeMode::Bilinear))
        .collect()
}

/// Resizes model-space probability slices back to the native in-plane
/// grid of `target` and restacks them.
pub fn from_model_space(
    pred_slices: &[Slice2D],
    target: &VolumeGeometry,
    axis: SliceAxis,
) -> Result<ProbabilityVolume, PreprocessError> {
    let dims = target.dims();
    let depth = dims[axis.index()];
    if pred_slices.len() != depth {
        return Err(PreprocessError::SliceCountMismatch { expected: depth, actual: pred_slices.len() });
    }
    let (col_axis, row_axis) = axis.plane();
    let native: Vec<Slice2D> = pred_slices
        .par_iter()
        .map(|s| {
            let mut r = resize(s, dims[row_axis], dims[col_axis], ResizeMode::Bilinear)?;
            r.values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Ok(r)
        })
        .collect::<Result<_, PreprocessError>>()?;
    let values = stack_slices(&native, target, axis)?;
    Ok(ProbabilityVolume::new(target.clone(), values)?)
}
