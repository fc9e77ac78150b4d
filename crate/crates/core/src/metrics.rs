//! Registration quality metrics: label overlap (Dice) and the share of
//! voxels where the warp folds (non-positive Jacobian determinant).

use crate::energy::{local_ncc, EnergyConfig};
use crate::error::{OfgError, Result};
use crate::volume::{DisplacementField, Grid, LabelVolume, ScalarVolume};
use crate::warp::{warp_nearest, warp_trilinear};

/// Intensity threshold that separates foreground from background on
/// normalized images.
pub const DEFAULT_FOREGROUND_THRESHOLD: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// `(label, dice)`; `None` when the label is absent from both volumes.
    pub per_label: Vec<(u16, Option<f64>)>,
    /// Mean over labels present in at least one volume.
    pub mean: f64,
}

/// Per-label Dice `2|A∩B| / (|A|+|B|)`, background excluded.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: &[u16]) -> Result<DiceReport> {
    a.grid().ensure_same(b.grid())?;
    let labels: Vec<u16> = labels.iter().copied().filter(|&l| l != 0).collect();
    if labels.is_empty() {
        return Err(OfgError::InvalidConfig(
            "dice needs at least one foreground label".into(),
        ));
    }
    let max = *labels.iter().max().unwrap() as usize;
    let (mut na, mut nb, mut both) = (
        vec![0u64; max + 1],
        vec![0u64; max + 1],
        vec![0u64; max + 1],
    );
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as usize, y as usize);
        if x <= max {
            na[x] += 1;
        }
        if y <= max {
            nb[y] += 1;
        }
        if x == y && x <= max {
            both[x] += 1;
        }
    }
    let per_label: Vec<(u16, Option<f64>)> = labels
        .iter()
        .map(|&l| {
            let l_ = l as usize;
            let total = na[l_] + nb[l_];
            (l, (total > 0).then(|| 2.0 * both[l_] as f64 / total as f64))
        })
        .collect();
    let present: Vec<f64> = per_label.iter().filter_map(|(_, d)| *d).collect();
    if present.is_empty() {
        return Err(OfgError::InvalidConfig(format!(
            "none of the labels {labels:?} occur in either volume"
        )));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Central-difference Jacobian determinant of `x -> x + u(x)` in 64-bit.
/// One-sided differences at the boundary.
pub(crate) fn jacobian_det_f64(field: &DisplacementField) -> Vec<f64> {
    let grid = field.grid();
    let dims = grid.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let u = field.data();
    grid.voxels()
        .enumerate()
        .map(|(idx, x)| {
            // j[c][a] = d(x_c + u_c) / d x_a
            let mut j = [[0.0f64; 3]; 3];
            for a in 0..3 {
                let (lo, hi, span) = if x[a] == 0 {
                    (idx, idx + strides[a], 1.0)
                } else if x[a] == dims[a] - 1 {
                    (idx - strides[a], idx, 1.0)
                } else {
                    (idx - strides[a], idx + strides[a], 2.0)
                };
                for c in 0..3 {
                    j[c][a] = (u[hi][c] as f64 - u[lo][c] as f64) / span;
                }
                j[a][a] += 1.0;
            }
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        })
        .collect()
}

pub fn jacobian_det(field: &DisplacementField) -> ScalarVolume {
    ScalarVolume::from_f64(*field.grid(), &jacobian_det_f64(field))
        .expect("determinant of a finite field is finite")
}

/// Boolean voxel selection used to restrict metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    grid: Grid,
    data: Vec<bool>,
}

impl VoxelMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(OfgError::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn all(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![true; grid.len()],
        }
    }

    /// Voxels at least one step away from every face.
    pub fn interior(grid: Grid) -> Self {
        let d = grid.dims();
        let data = grid
            .voxels()
            .map(|x| (0..3).all(|a| x[a] > 0 && x[a] + 1 < d[a]))
            .collect();
        Self { grid, data }
    }

    /// Non-background voxels: intensity strictly above `threshold`.
    pub fn foreground(image: &ScalarVolume, threshold: f32) -> Self {
        Self {
            grid: *image.grid(),
            data: image.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        Self {
            grid: *labels.grid(),
            data: labels.data().iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Percentage of masked voxels whose Jacobian determinant is `<= 0`.
pub fn pct_nondiffeo(field: &DisplacementField, mask: &VoxelMask) -> Result<f64> {
    field.grid().ensure_same(&mask.grid)?;
    let n = mask.count();
    if n == 0 {
        return Err(OfgError::InvalidConfig(
            "jacobian mask selects no voxels".into(),
        ));
    }
    let folded = jacobian_det_f64(field)
        .iter()
        .zip(&mask.data)
        .filter(|(&d, &m)| m && d <= 0.0)
        .count();
    Ok(100.0 * folded as f64 / n as f64)
}

/// Quality of one registration result.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_label_dice: Vec<(u16, Option<f64>)>,
    pub mean_dice: f64,
    pub pct_nondiffeo: f64,
    pub mean_ncc: f64,
    pub max_magnitude: f64,
    pub mean_magnitude: f64,
    /// Mean endpoint error against a reference field, when one is known.
    pub endpoint_error: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dice,ncc,jac_pct,max_mag,mean_mag,epe";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mean_dice,
            self.mean_ncc,
            self.pct_nondiffeo,
            self.max_magnitude,
            self.mean_magnitude,
            self.endpoint_error
                .map(|e| e.to_string())
                .unwrap_or_default()
        )
    }
}

/// Mean Euclidean distance between two fields.
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            (0..3)
                .map(|c| (x[c] as f64 - y[c] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(sum / a.grid().len() as f64)
}

/// Evaluates `field` as the registration of `moving` onto `fixed`.
/// Dice uses the fixed labels' ids; the Jacobian count uses the fixed
/// image's foreground.
pub fn evaluate(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    fixed_labels: &LabelVolume,
    moving_labels: &LabelVolume,
    field: &DisplacementField,
    ncc: &EnergyConfig,
    reference: Option<&DisplacementField>,
) -> Result<MetricsReport> {
    let warped_labels = warp_nearest(moving_labels, field)?;
    let mut ids = fixed_labels.label_ids();
    ids.extend(moving_labels.label_ids());
    ids.sort_unstable();
    ids.dedup();
    let d = dice(fixed_labels, &warped_labels, &ids)?;
    let (warped, _) = warp_trilinear(moving, field)?;
    let (mean_ncc, _) = local_ncc(fixed, &warped, ncc)?;
    let mut mask = VoxelMask::foreground(fixed, DEFAULT_FOREGROUND_THRESHOLD);
    if mask.count() == 0 {
        mask = VoxelMask::all(*fixed.grid());
    }
    Ok(MetricsReport {
        per_label_dice: d.per_label,
        mean_dice: d.mean,
        pct_nondiffeo: pct_nondiffeo(field, &mask)?,
        mean_ncc,
        max_magnitude: field.max_magnitude(),
        mean_magnitude: field.mean_magnitude(),
        endpoint_error: reference.map(|r| endpoint_error(field, r)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube_labels(g: Grid, x0: usize) -> LabelVolume {
        LabelVolume::from_fn(g, |[i, j, k]| {
            u16::from((x0..x0 + 4).contains(&i) && (2..6).contains(&j) && (2..6).contains(&k))
        })
    }

    #[test]
    fn dice_shifted_cube_is_half() {
        let g = Grid::cube(8).unwrap();
        let r = dice(&cube_labels(g, 1), &cube_labels(g, 3), &[1]).unwrap();
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let g = Grid::cube(8).unwrap();
        let a = LabelVolume::from_fn(g, |[i, j, _]| ((i / 2 + j) % 3) as u16);
        let r = dice(&a, &a, &[1, 2]).unwrap();
        assert!(r.per_label.iter().all(|(_, d)| *d == Some(1.0)));
        let left = LabelVolume::from_fn(g, |[i, _, _]| u16::from(i < 4));
        let right = LabelVolume::from_fn(g, |[i, _, _]| u16::from(i >= 4));
        assert_eq!(dice(&left, &right, &[1]).unwrap().mean, 0.0);
    }

    #[test]
    fn dice_absent_label_excluded_and_errors() {
        let g = Grid::cube(4).unwrap();
        let a = LabelVolume::from_fn(g, |[i, _, _]| u16::from(i < 2));
        let r = dice(&a, &a, &[1, 7]).unwrap();
        assert_eq!(r.per_label[1], (7, None));
        assert_eq!(r.mean, 1.0);
        assert!(dice(&a, &a, &[]).is_err());
        assert!(dice(&a, &a, &[0]).is_err());
    }

    #[test]
    fn jacobian_identity_translation_linear() {
        let g = Grid::cube(6).unwrap();
        for f in [
            DisplacementField::zeros(g),
            DisplacementField::constant(g, [1.5, -2.0, 0.25]),
        ] {
            assert!(jacobian_det(&f).data().iter().all(|&d| d == 1.0));
            assert_eq!(pct_nondiffeo(&f, &VoxelMask::all(g)).unwrap(), 0.0);
        }
        let a = -2.0;
        let lin = DisplacementField::from_fn(g, |[i, _, _]| [a * i as f32, 0.0, 0.0]).unwrap();
        let det = jacobian_det_f64(&lin);
        for (idx, x) in g.voxels().enumerate() {
            if (0..3).all(|k| x[k] > 0 && x[k] < 5) {
                assert!((det[idx] - (1.0 + a as f64)).abs() < 1e-6);
            }
        }
        assert_eq!(pct_nondiffeo(&lin, &VoxelMask::interior(g)).unwrap(), 100.0);
    }

    #[test]
    fn empty_mask_rejected() {
        let g = Grid::cube(4).unwrap();
        let m = VoxelMask::new(g, vec![false; g.len()]).unwrap();
        assert!(pct_nondiffeo(&DisplacementField::zeros(g), &m).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric(seed in prop::collection::vec(0u16..4, 64), other in prop::collection::vec(0u16..4, 64)) {
            let g = Grid::cube(4).unwrap();
            let a = LabelVolume::new(g, seed).unwrap();
            let b = LabelVolume::new(g, other).unwrap();
            match (dice(&a, &b, &[1, 2, 3]), dice(&b, &a, &[1, 2, 3])) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x.mean, y.mean);
                    prop_assert!((0.0..=1.0).contains(&x.mean));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn translations_never_fold(t in prop::array::uniform3(-5.0f32..5.0)) {
            let g = Grid::cube(5).unwrap();
            let f = DisplacementField::constant(g, t);
            prop_assert_eq!(pct_nondiffeo(&f, &VoxelMask::all(g)).unwrap(), 0.0);
        }
    }
}
