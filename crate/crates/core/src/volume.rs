//! Image volumes and label masks stored as ordered slice stacks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of label classes: background, LV, RV, Myo.
pub const NUM_CLASSES: usize = 4;

/// Class codes of [`LabelMask`].
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV: u8 = 1;
    pub const RV: u8 = 2;
    pub const MYO: u8 = 3;
}

/// Voxel size in millimetres. Equality is bitwise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Spacing {
    /// In-plane row pitch.
    pub row: f64,
    /// In-plane column pitch.
    pub col: f64,
    /// Slice thickness.
    pub slice: f64,
}

impl Spacing {
    pub fn new(row: f64, col: f64, slice: f64) -> Result<Self> {
        let s = Self { row, col, slice };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic_2d(pitch: f64) -> Self {
        Self {
            row: pitch,
            col: pitch,
            slice: pitch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("row", self.row), ("col", self.col), ("slice", self.slice)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("spacing {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.row, self.col, self.slice]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            row: self.row * factor,
            col: self.col * factor,
            slice: self.slice * factor,
        }
    }
}

/// Acquisition domain of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Bssfp,
    T2,
    Lge,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Bssfp, Domain::T2, Domain::Lge];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Bssfp => "bssfp",
            Domain::T2 => "t2",
            Domain::Lge => "lge",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Domain::Bssfp => 0,
            Domain::T2 => 1,
            Domain::Lge => 2,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dimensions of a slice stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.slices * self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_dims(dims: Dims, len: usize) -> Result<()> {
    if dims.slices == 0 || dims.height == 0 || dims.width == 0 {
        return Err(Error::shape(format!("volume dimensions must be positive: {dims:?}")));
    }
    if dims.len() != len {
        return Err(Error::shape(format!(
            "volume {dims:?} needs {} voxels, got {len}",
            dims.len()
        )));
    }
    Ok(())
}

/// Intensity volume; values are in `[0, 1]` on ingest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    dims: Dims,
    data: Vec<f32>,
    pub spacing: Spacing,
    pub subject_id: String,
    pub domain: Domain,
}

impl ImageVolume {
    pub fn new(
        dims: Dims,
        data: Vec<f32>,
        spacing: Spacing,
        subject_id: impl Into<String>,
        domain: Domain,
    ) -> Result<Self> {
        check_dims(dims, data.len())?;
        spacing.validate()?;
        Ok(Self {
            dims,
            data,
            spacing,
            subject_id: subject_id.into(),
            domain,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.dims.slice_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Replace voxel data and in-plane size, keeping metadata.
    pub fn with_data(&self, dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_dims(dims, data.len())?;
        Ok(Self {
            dims,
            data,
            spacing: self.spacing,
            subject_id: self.subject_id.clone(),
            domain: self.domain,
        })
    }
}

/// Integer class map per slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    data: Vec<u8>,
    pub spacing: Spacing,
}

impl PartialEq for Spacing {
    fn eq(&self, other: &Self) -> bool {
        self.row.to_bits() == other.row.to_bits()
            && self.col.to_bits() == other.col.to_bits()
            && self.slice.to_bits() == other.slice.to_bits()
    }
}
impl Eq for Spacing {}

impl LabelMask {
    pub fn new(dims: Dims, data: Vec<u8>, spacing: Spacing) -> Result<Self> {
        check_dims(dims, data.len())?;
        spacing.validate()?;
        Ok(Self { dims, data, spacing })
    }

    /// A single-slice mask from rows of class codes.
    pub fn from_rows(rows: &[&[u8]], spacing: Spacing) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged mask rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(
            Dims {
                slices: 1,
                height,
                width,
            },
            data,
            spacing,
        )
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            data: vec![0; dims.len()],
            spacing,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [u8] {
        let n = self.dims.slice_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, slice: usize, row: usize, col: usize) -> u8 {
        self.data[(slice * self.dims.height + row) * self.dims.width + col]
    }

    /// Check that every class code is below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        let d = self.dims;
        if let Some(i) = self.data.iter().position(|&v| v as usize >= num_classes) {
            let (s, r, c) = (i / d.slice_len(), (i / d.width) % d.height, i % d.width);
            return Err(Error::Label(format!(
                "class {} at (slice {s}, row {r}, col {c}) is outside 0..{num_classes}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }
}
