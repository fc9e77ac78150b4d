//! Grid-aligned value types shared by every other module.
//!
//! All buffers are stored in x-fastest order: the voxel `(i, j, k)` lives at
//! `i + dims[0] * (j + dims[1] * k)`.

use std::collections::BTreeSet;

use crate::error::{OfgError, Result};

/// Smallest admissible extent along any axis.
pub const MIN_DIM: usize = 4;

/// A regular 3D voxel grid. Spacing is carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f32; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3])
    }

    pub fn with_spacing(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if let Some(d) = dims.iter().find(|&&d| d < MIN_DIM) {
            return Err(OfgError::InvalidGrid(format!(
                "every dimension must be >= {MIN_DIM}, got {d} in {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(OfgError::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Cube-shaped grid with unit spacing.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new([n; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same dims (spacing is ignored: it never enters the math).
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(OfgError::GridMismatch {
                left: self.dims,
                right: other.dims,
            })
        }
    }

    #[inline]
    pub(crate) fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub(crate) fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Iterates all voxel coordinates in storage order.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
    }
}

/// Checked linear index of voxel `(i, j, k)`.
pub fn linear_index(grid: &Grid, i: usize, j: usize, k: usize) -> Result<usize> {
    let dims = grid.dims();
    if i >= dims[0] || j >= dims[1] || k >= dims[2] {
        return Err(OfgError::OutOfBounds {
            coords: [i, j, k],
            dims,
        });
    }
    Ok(grid.index(i, j, k))
}

/// Inverse of [`linear_index`].
pub fn voxel_coords(grid: &Grid, idx: usize) -> Result<[usize; 3]> {
    if idx >= grid.len() {
        return Err(OfgError::OutOfBounds {
            coords: [idx, 0, 0],
            dims: grid.dims(),
        });
    }
    Ok(grid.coords(idx))
}

fn check_len(grid: &Grid, actual: usize) -> Result<()> {
    if grid.len() != actual {
        return Err(OfgError::LengthMismatch {
            expected: grid.len(),
            actual,
        });
    }
    Ok(())
}

/// Scalar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: Grid,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        check_len(&grid, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(OfgError::NonFinite {
                what: "scalar volume",
                index,
            });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        assert!(value.is_finite());
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self> {
        let data = grid.voxels().map(&mut f).collect();
        Self::new(grid, data)
    }

    /// Builds a volume from 64-bit values, rounding to storage precision.
    pub(crate) fn from_f64(grid: Grid, data: &[f64]) -> Result<Self> {
        Self::new(grid, data.iter().map(|&v| v as f32).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, [i, j, k]: [usize; 3]) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Element-wise affine combination `a * self + b * other`.
    pub fn combine(&self, a: f32, other: &ScalarVolume, b: f32) -> Result<ScalarVolume> {
        self.grid.ensure_same(&other.grid)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        ScalarVolume::new(self.grid, data)
    }
}

/// Rescales intensities to `[0, 1]`; a constant volume maps to all zeros.
pub fn normalize(v: &ScalarVolume) -> Result<ScalarVolume> {
    let (lo, hi) = v.min_max();
    if !lo.is_finite() || !hi.is_finite() {
        return Err(OfgError::NonFinite {
            what: "normalize input",
            index: 0,
        });
    }
    if lo == hi {
        return Ok(ScalarVolume::zeros(v.grid));
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - lo) / range) as f32)
        .collect();
    ScalarVolume::new(v.grid, data)
}

/// Per-voxel displacement `u`, in voxel units; the warp is `x -> x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    data: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn new(grid: Grid, data: Vec<[f32; 3]>) -> Result<Self> {
        check_len(&grid, data.len())?;
        if let Some(index) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(OfgError::NonFinite {
                what: "displacement field",
                index,
            });
        }
        Ok(Self { grid, data })
    }

    /// The identity warp.
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn constant(grid: Grid, u: [f32; 3]) -> Self {
        assert!(u.iter().all(|c| c.is_finite()));
        Self {
            grid,
            data: vec![u; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> [f32; 3]) -> Result<Self> {
        let data = grid.voxels().map(&mut f).collect();
        Self::new(grid, data)
    }

    pub(crate) fn from_f64(grid: Grid, data: &[[f64; 3]]) -> Result<Self> {
        Self::new(
            grid,
            data.iter()
                .map(|v| [v[0] as f32, v[1] as f32, v[2] as f32])
                .collect(),
        )
    }

    /// Builds a field from a flat interleaved buffer `[u0x, u0y, u0z, u1x, ...]`.
    pub fn from_interleaved(grid: Grid, flat: &[f32]) -> Result<Self> {
        check_len(&grid, flat.len() / 3)?;
        if !flat.len().is_multiple_of(3) {
            return Err(OfgError::LengthMismatch {
                expected: grid.len() * 3,
                actual: flat.len(),
            });
        }
        Self::new(
            grid,
            flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        )
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn get(&self, [i, j, k]: [usize; 3]) -> [f32; 3] {
        self.data[self.grid.index(i, j, k)]
    }

    /// Flat view over all scalar components.
    pub fn components(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().flatten().copied()
    }

    pub fn num_components(&self) -> usize {
        self.data.len() * 3
    }

    pub(crate) fn to_f64(&self) -> Vec<[f64; 3]> {
        self.data
            .iter()
            .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
            .collect()
    }

    /// Largest Euclidean displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(norm).fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.data.iter().map(norm).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_component(&self) -> f32 {
        self.components().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &DisplacementField, scale: f32) -> Result<DisplacementField> {
        self.grid.ensure_same(&other.grid)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| std::array::from_fn(|c| a[c] + scale * b[c]))
            .collect();
        DisplacementField::new(self.grid, data)
    }
}

fn norm(v: &[f32; 3]) -> f64 {
    v.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt()
}

/// Integer segmentation; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>) -> Result<Self> {
        check_len(&grid, data.len())?;
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> u16) -> Self {
        let data = grid.voxels().map(&mut f).collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, [i, j, k]: [usize; 3]) -> u16 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Distinct non-background label ids, ascending.
    pub fn label_ids(&self) -> Vec<u16> {
        self.data
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// A registration task: align `moving` onto `fixed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    pub fixed_labels: Option<LabelVolume>,
    pub moving_labels: Option<LabelVolume>,
    /// Synthetic ground-truth field that produced `moving` from `fixed`.
    /// Evaluation only.
    pub truth_field: Option<DisplacementField>,
}

impl ImagePair {
    pub fn new(fixed: ScalarVolume, moving: ScalarVolume) -> Result<Self> {
        fixed.grid().ensure_same(moving.grid())?;
        Ok(Self {
            fixed,
            moving,
            fixed_labels: None,
            moving_labels: None,
            truth_field: None,
        })
    }

    pub fn with_labels(mut self, fixed: LabelVolume, moving: LabelVolume) -> Result<Self> {
        self.grid().ensure_same(fixed.grid())?;
        self.grid().ensure_same(moving.grid())?;
        self.fixed_labels = Some(fixed);
        self.moving_labels = Some(moving);
        Ok(self)
    }

    pub fn with_truth(mut self, truth: DisplacementField) -> Result<Self> {
        self.grid().ensure_same(truth.grid())?;
        self.truth_field = Some(truth);
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        self.fixed.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_rejects_small_dims() {
        assert!(Grid::new([3, 8, 8]).is_err());
        assert!(Grid::new([4, 4, 4]).is_ok());
        assert!(Grid::with_spacing([8; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn linear_index_examples() {
        let g = Grid::cube(4).unwrap();
        assert_eq!(linear_index(&g, 0, 0, 0).unwrap(), 0);
        assert_eq!(linear_index(&g, 1, 2, 3).unwrap(), 57);
        assert!(matches!(
            linear_index(&g, 4, 0, 0),
            Err(OfgError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn linear_index_bijective_exhaustive() {
        let g = Grid::new([5, 6, 7]).unwrap();
        let mut seen = vec![false; g.len()];
        for [i, j, k] in g.voxels() {
            let idx = linear_index(&g, i, j, k).unwrap();
            assert!(!seen[idx]);
            seen[idx] = true;
            assert_eq!(voxel_coords(&g, idx).unwrap(), [i, j, k]);
        }
        assert!(seen.iter().all(|&s| s));
        assert!(voxel_coords(&g, g.len()).is_err());
    }

    #[test]
    fn normalize_constant_is_zero() {
        let g = Grid::cube(4).unwrap();
        let v = ScalarVolume::filled(g, 7.0);
        assert!(normalize(&v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_affine_rescale() {
        let g = Grid::cube(4).unwrap();
        let mut data = vec![5.0; g.len()];
        data[0] = 0.0;
        data[1] = 10.0;
        let n = normalize(&ScalarVolume::new(g, data).unwrap()).unwrap();
        assert_eq!(&n.data()[..3], &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn non_finite_rejected() {
        let g = Grid::cube(4).unwrap();
        let mut data = vec![0.0; g.len()];
        data[5] = f32::NAN;
        assert!(matches!(
            ScalarVolume::new(g, data),
            Err(OfgError::NonFinite { index: 5, .. })
        ));
        let mut f = vec![[0.0; 3]; g.len()];
        f[2][1] = f32::INFINITY;
        assert!(DisplacementField::new(g, f).is_err());
    }

    #[test]
    fn length_checked() {
        let g = Grid::cube(4).unwrap();
        assert!(ScalarVolume::new(g, vec![0.0; 10]).is_err());
        assert!(LabelVolume::new(g, vec![0; 65]).is_err());
    }

    #[test]
    fn pair_requires_shared_grid() {
        let a = ScalarVolume::zeros(Grid::cube(4).unwrap());
        let b = ScalarVolume::zeros(Grid::cube(5).unwrap());
        assert!(ImagePair::new(a, b).is_err());
    }

    #[test]
    fn label_ids_exclude_background() {
        let g = Grid::cube(4).unwrap();
        let l = LabelVolume::from_fn(g, |[i, _, _]| [0, 3, 1, 3][i]);
        assert_eq!(l.label_ids(), vec![1, 3]);
    }

    proptest! {
        #[test]
        fn normalize_bounds_and_idempotence(data in prop::collection::vec(-100.0f32..100.0, 64)) {
            let g = Grid::cube(4).unwrap();
            let n = normalize(&ScalarVolume::new(g, data).unwrap()).unwrap();
            let (lo, hi) = n.min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
            if hi > lo {
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
                prop_assert_eq!(normalize(&n).unwrap(), n);
            }
        }
    }
}
