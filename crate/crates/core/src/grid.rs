//! Voxel lattice geometry shared by every volume type.
//!
//! Voxels are stored with x varying fastest and z slowest, so the linear
//! index of `(x, y, z)` is `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

/// Voxel counts `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_axis(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.0[0];
        let ny = self.0[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Per-axis ceil division by two; axes of size 1 stay 1.
    pub fn halved(&self) -> Dims {
        Dims(self.0.map(|n| n.div_ceil(2)))
    }

    /// Linear stride of one step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }

    /// Iterates `(linear index, [x, y, z])` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let d = *self;
        (0..d.len()).map(move |i| (i, d.coords(i)))
    }
}

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const UNIT: Spacing = Spacing([1.0; 3]);

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn doubled(&self) -> Spacing {
        Spacing(self.0.map(|s| s * 2.0))
    }

    pub fn halved(&self) -> Spacing {
        Spacing(self.0.map(|s| s * 0.5))
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::UNIT
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for (i, [x, y, z]) in d.iter() {
            assert_eq!(d.index(x, y, z), i);
        }
        assert_eq!(d.index(1, 0, 0) - d.index(0, 0, 0), d.stride(0));
        assert_eq!(d.index(0, 1, 0) - d.index(0, 0, 0), d.stride(1));
        assert_eq!(d.index(0, 0, 1) - d.index(0, 0, 0), d.stride(2));
    }

    #[test]
    fn halving_uses_ceil() {
        assert_eq!(Dims::new(3, 2, 1).halved(), Dims::new(2, 1, 1));
        assert_eq!(Dims::cube(160).halved(), Dims::cube(80));
    }
}
