//! Random Cartesian column masks in the style of the fastMRI random mask
//! function: a fully sampled low-frequency band plus independently drawn
//! outer columns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::fourier::{mask_columns_inplace, KSpace};

pub const DEFAULT_CENTER_FRACTION_4X: f64 = 0.08;
pub const DEFAULT_CENTER_FRACTION_8X: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub acceleration: u32,
    pub center_fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    /// fastMRI default center fraction for the given acceleration.
    pub fn for_acceleration(acceleration: u32, seed: u64) -> Self {
        let center_fraction = if acceleration >= 8 {
            DEFAULT_CENTER_FRACTION_8X
        } else {
            DEFAULT_CENTER_FRACTION_4X
        };
        Self {
            acceleration,
            center_fraction,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.acceleration < 1 {
            return Err(ReconError::InvalidConfig("acceleration must be at least 1".into()));
        }
        if !(self.center_fraction > 0.0 && self.center_fraction < 1.0) {
            return Err(ReconError::InvalidConfig(format!(
                "center_fraction must lie in (0, 1), got {}",
                self.center_fraction
            )));
        }
        Ok(())
    }

    /// Number of fully sampled center columns, rounded half away from zero.
    pub fn center_columns(&self, width: usize) -> usize {
        (self.center_fraction * width as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    columns: Vec<bool>,
    spec: Option<MaskSpec>,
}

impl SamplingMask {
    pub fn from_columns(columns: Vec<bool>) -> Result<Self> {
        if columns.is_empty() {
            return Err(ReconError::InvalidConfig("mask width must be positive".into()));
        }
        Ok(Self { columns, spec: None })
    }

    pub fn full(width: usize) -> Self {
        Self {
            columns: vec![true; width],
            spec: None,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn spec(&self) -> Option<&MaskSpec> {
        self.spec.as_ref()
    }

    pub fn is_sampled(&self, column: usize) -> bool {
        self.columns[column]
    }

    pub fn sampled_columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns.iter().enumerate().filter(|(_, &s)| s).map(|(j, _)| j)
    }

    pub fn num_sampled(&self) -> usize {
        self.columns.iter().filter(|&&s| s).count()
    }

    pub fn is_full(&self) -> bool {
        self.columns.iter().all(|&s| s)
    }

    /// Column values as 0/1 floats.
    pub fn as_f64(&self) -> Vec<f64> {
        self.columns.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
    }
}

/// First column of the center band, matching fastMRI's `(W - n + 1) // 2`.
pub fn center_band_start(width: usize, center: usize) -> usize {
    (width - center + 1) / 2
}

pub fn generate_mask(spec: &MaskSpec, width: usize) -> Result<SamplingMask> {
    spec.validate()?;
    if width < 8 {
        return Err(ReconError::InvalidConfig(format!("mask width must be at least 8, got {width}")));
    }
    let center = spec.center_columns(width);
    if center < 1 {
        return Err(ReconError::InvalidConfig(format!(
            "center band of fraction {} is empty at width {width}",
            spec.center_fraction
        )));
    }
    let budget = width as f64 / spec.acceleration as f64;
    if center as f64 > budget {
        return Err(ReconError::InfeasibleMask { center, budget });
    }
    let outer = width - center;
    let prob = if outer == 0 {
        0.0
    } else {
        ((budget - center as f64) / outer as f64).clamp(0.0, 1.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut columns: Vec<bool> = (0..width).map(|_| rng.random::<f64>() < prob).collect();
    let start = center_band_start(width, center);
    columns[start..start + center].fill(true);
    Ok(SamplingMask {
        columns,
        spec: Some(*spec),
    })
}

pub fn apply_mask(ksp: &KSpace, mask: &SamplingMask) -> Result<KSpace> {
    if mask.width() != ksp.width() {
        return Err(ReconError::shape("apply_mask", &[ksp.width()], &[mask.width()]));
    }
    let mut data = ksp.data().clone();
    mask_columns_inplace(&mut data, mask);
    Ok(KSpace::from_raw(data))
}

/// Per-slice mask seed derived from the volume id, slice index and global seed.
pub fn slice_seed(volume_id: &str, slice_index: usize, global_seed: u64) -> u64 {
    // FNV-1a over the id, then splitmix to mix in the index and seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in volume_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h ^ splitmix(slice_index as u64 ^ splitmix(global_seed)))
}

/// SplitMix64 output function, used to derive independent seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn center_band_for_320_at_4x() {
        let spec = MaskSpec::for_acceleration(4, 1);
        assert_eq!(spec.center_columns(320), 26);
        let mask = generate_mask(&spec, 320).unwrap();
        let start = center_band_start(320, 26);
        assert_eq!(start, 147);
        assert!(mask.columns()[start..start + 26].iter().all(|&s| s));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = MaskSpec::for_acceleration(8, 42);
        assert_eq!(generate_mask(&spec, 128).unwrap(), generate_mask(&spec, 128).unwrap());
        assert_ne!(
            generate_mask(&spec, 128).unwrap().columns(),
            generate_mask(&spec.with_seed(43), 128).unwrap().columns()
        );
    }

    #[test]
    fn no_acceleration_is_full() {
        for cf in [0.04, 0.3, 0.9] {
            let spec = MaskSpec {
                acceleration: 1,
                center_fraction: cf,
                seed: 5,
            };
            assert!(generate_mask(&spec, 64).unwrap().is_full());
        }
    }

    #[test]
    fn infeasible_and_invalid_specs() {
        let spec = MaskSpec {
            acceleration: 8,
            center_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(generate_mask(&spec, 64), Err(ReconError::InfeasibleMask { .. })));
        assert!(generate_mask(&MaskSpec::for_acceleration(4, 0), 4).is_err());
        let bad = MaskSpec {
            center_fraction: 1.2,
            ..MaskSpec::for_acceleration(4, 0)
        };
        assert!(generate_mask(&bad, 64).is_err());
    }

    #[test]
    fn mean_sampled_columns_matches_budget() {
        let spec = MaskSpec::for_acceleration(4, 0);
        let n = 2000;
        let total: usize = (0..n)
            .map(|s| generate_mask(&spec.with_seed(s), 320).unwrap().num_sampled())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 80.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn apply_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((6, 10), |_| Complex64::new(rng.random(), rng.random()));
        let k = KSpace::new(data.clone()).unwrap();
        assert_eq!(apply_mask(&k, &SamplingMask::full(10)).unwrap(), k);
        let none = SamplingMask::from_columns(vec![false; 10]).unwrap();
        assert!(apply_mask(&k, &none).unwrap().data().iter().all(|z| z.norm() == 0.0));

        let cols: Vec<bool> = (0..10).map(|_| rng.random_bool(0.4)).collect();
        let masked = apply_mask(&k, &SamplingMask::from_columns(cols.clone()).unwrap()).unwrap();
        for i in 0..6 {
            for j in 0..10 {
                let m = if cols[j] { 1.0 } else { 0.0 };
                assert_eq!(masked.data()[[i, j]], data[[i, j]] * m);
            }
        }
        assert!(apply_mask(&k, &SamplingMask::full(8)).is_err());
    }

    #[test]
    fn slice_seeds_differ() {
        assert_ne!(slice_seed("vol", 0, 1), slice_seed("vol", 1, 1));
        assert_ne!(slice_seed("vol", 0, 1), slice_seed("vol", 0, 2));
        assert_ne!(slice_seed("a", 0, 1), slice_seed("b", 0, 1));
        assert_eq!(slice_seed("vol", 3, 9), slice_seed("vol", 3, 9));
    }

    proptest! {
        #[test]
        fn center_band_always_sampled(seed in any::<u64>(), width in 16usize..400, accel in prop::sample::select(vec![4u32, 8])) {
            let spec = MaskSpec::for_acceleration(accel, seed);
            let center = spec.center_columns(width);
            prop_assume!(center >= 1);
            let mask = generate_mask(&spec, width).unwrap();
            let start = center_band_start(width, center);
            prop_assert!(mask.columns()[start..start + center].iter().all(|&s| s));
            prop_assert_eq!(mask.width(), width);
        }
    }
}
