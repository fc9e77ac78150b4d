//! Synthetic registration tasks with known deformations, and the on-disk
//! containers for volumes, fields and label maps.

mod io;
mod phantom;

pub use io::{
    load_pairs, read_field, read_labels, read_volume, save_pairs, write_field, write_labels,
    write_volume, DatasetManifest, MAGIC_FIELD, MAGIC_LABELS, MAGIC_VOLUME,
};
pub(crate) use io::{read_bytes, write_bytes, ByteReader};
pub use phantom::{gaussian_smooth, gen_phantom, gen_smooth_field, FieldSpec, PhantomSpec};

use crate::error::Result;
use crate::volume::ImagePair;
use crate::warp::{warp_nearest, warp_trilinear};

/// Mixes a stream id into a seed (splitmix64 finalizer) so that related
/// generators draw from unrelated streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A phantom and its copy deformed by a smooth random field.
///
/// `fixed` is the phantom; `moving = fixed` warped by `truth_field`, with
/// labels warped by nearest neighbour. The truth field is kept for
/// evaluation only.
pub fn make_pair(phantom: &PhantomSpec, field: &FieldSpec, seed: u64) -> Result<ImagePair> {
    let (fixed, labels) = gen_phantom(phantom, derive_seed(seed, 0))?;
    let spec = FieldSpec {
        seed: derive_seed(seed ^ field.seed, 1),
        ..*field
    };
    let truth = gen_smooth_field(*fixed.grid(), &spec)?;
    let (moving, _) = warp_trilinear(&fixed, &truth)?;
    let moving_labels = warp_nearest(&labels, &truth)?;
    ImagePair::new(fixed, moving)?
        .with_labels(labels, moving_labels)?
        .with_truth(truth)
}

/// Train/validation split of registration tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl Dataset {
    /// `n_train + n_val` synthetic pairs; pair `i` uses seed `derive_seed(seed, 100 + i)`.
    pub fn synthetic(
        phantom: &PhantomSpec,
        field: &FieldSpec,
        n_train: usize,
        n_val: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut pairs = (0..n_train + n_val)
            .map(|i| make_pair(phantom, field, derive_seed(seed, 100 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let val = pairs.split_off(n_train);
        Ok(Self { train: pairs, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice, pct_nondiffeo, VoxelMask};
    use crate::volume::Grid;

    #[test]
    fn zero_amplitude_pair_is_aligned() {
        let spec = PhantomSpec {
            dims: [16; 3],
            ..PhantomSpec::default()
        };
        let field = FieldSpec {
            amplitude: 0.0,
            ..FieldSpec::default()
        };
        let p = make_pair(&spec, &field, 3).unwrap();
        assert_eq!(p.fixed, p.moving);
        let (a, b) = (p.fixed_labels.unwrap(), p.moving_labels.unwrap());
        assert_eq!(dice(&a, &b, &a.label_ids()).unwrap().mean, 1.0);
    }

    #[test]
    fn moving_is_warp_of_fixed() {
        let spec = PhantomSpec {
            dims: [16; 3],
            ..PhantomSpec::default()
        };
        let p = make_pair(&spec, &FieldSpec::default(), 4).unwrap();
        let truth = p.truth_field.as_ref().unwrap();
        assert_eq!(warp_trilinear(&p.fixed, truth).unwrap().0, p.moving);
        assert!((truth.max_magnitude() - 3.0).abs() < 1e-4);
    }

    #[test]
    fn generation_is_pure() {
        let spec = PhantomSpec {
            dims: [16; 3],
            ..PhantomSpec::default()
        };
        let a = Dataset::synthetic(&spec, &FieldSpec::default(), 2, 1, 9).unwrap();
        let b = Dataset::synthetic(&spec, &FieldSpec::default(), 2, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0], a.train[1]);
    }

    #[test]
    fn default_fields_rarely_fold() {
        let g = Grid::cube(32).unwrap();
        for seed in 0..20 {
            let f = gen_smooth_field(
                g,
                &FieldSpec {
                    seed,
                    ..FieldSpec::default()
                },
            )
            .unwrap();
            let pct = pct_nondiffeo(&f, &VoxelMask::all(g)).unwrap();
            assert!(pct < 1.0, "seed {seed}: {pct}%");
        }
    }
}
