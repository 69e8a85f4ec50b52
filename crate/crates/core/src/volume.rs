//! Voxel grids shared by phantoms, propagators and metrics.
//!
//! Storage is x-fastest: voxel `(x, y, z)` lives at `x + W * (y + H * z)`, so
//! each axial slice is one contiguous `H * W` run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize, depth: usize) -> Self {
        Dims { height, width, depth }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.plane() * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    /// Inverse of [`Dims::index`].
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.width, (i / self.width) % self.height, i / self.plane())
    }
}

/// Dense 3D grid with physical voxel spacing in millimetres
/// (`[row, column, slice]` order, matching `height, width, depth`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<T>,
}

pub type Volume3D = Grid3<f32>;
pub type MaskVolume = Grid3<u8>;

impl<T: Copy> Grid3<T> {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape("grid", format!("{dims:?} vs {} voxels", data.len())));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Grid3 { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: [f32; 3], value: T) -> Self {
        Grid3 { dims, spacing, data: vec![value; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let p = self.dims.plane();
        &self.data[z * p..(z + 1) * p]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let p = self.dims.plane();
        &mut self.data[z * p..(z + 1) * p]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 { dims: self.dims, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_shape<U>(&self, other: &Grid3<U>) -> bool {
        self.dims == other.dims
    }
}

impl Volume3D {
    /// Checks the intensity range and minimum depth expected of input volumes.
    pub fn validate_intensities(&self) -> Result<()> {
        if self.dims.depth < 3 {
            return Err(Error::InvalidArgument(format!("volume depth {} < 3", self.dims.depth)));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Thresholds a soft mask: `v >= 0.5` becomes foreground.
    pub fn threshold(&self) -> MaskVolume {
        self.map(|v| u8::from(v >= 0.5))
    }
}

impl MaskVolume {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice_count(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&v| v != 0).count()
    }

    pub fn to_soft(&self) -> Volume3D {
        self.map(|v| if v != 0 { 1.0 } else { 0.0 })
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}
