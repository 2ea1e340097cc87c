use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use pcrnn::cs::{tv, tv_prox};
use pcrnn::fourier::{data_consistency, fft2c, ifft2c, zero_filled, ComplexImage, KSpace};
use pcrnn::objectives::{nmse, ssim, SsimConfig};
use pcrnn::sampling::{center_band_start, generate_mask, MaskSpec, SamplingMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((h, w), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

/// Dense centered unitary DFT, written out from the definition.
fn dense_fft2c(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    Array2::from_shape_fn((h, w), |(u, v)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for ((r, c), val) in x.indexed_iter() {
            let phase = -2.0 * PI * ((u as f64 - ch) * (r as f64 - ch) / h as f64 + (v as f64 - cw) * (c as f64 - cw) / w as f64);
            acc += val * Complex64::from_polar(1.0, phase);
        }
        acc * scale
    })
}

fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize) -> SamplingMask {
    let mut cols: Vec<bool> = (0..w).map(|_| rng.random_bool(0.4)).collect();
    cols[w / 2] = true;
    SamplingMask::from_columns(cols).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fft2c_matches_dense_dft(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_grid(&mut rng, h, w);
        let k = fft2c(&ComplexImage::new(x.clone()).unwrap()).unwrap();
        prop_assert!(max_diff(k.data(), &dense_fft2c(&x)) < 1e-10);
    }

    #[test]
    fn fft_round_trip_and_energy(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_grid(&mut rng, h, w);
        let img = ComplexImage::new(x.clone()).unwrap();
        let k = fft2c(&img).unwrap();
        let back = ifft2c(&k).unwrap();
        prop_assert!(max_diff(back.data(), &x) < 1e-12);
        let e_img: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let e_k: f64 = k.data().iter().map(|v| v.norm_sqr()).sum();
        prop_assert!((e_img - e_k).abs() <= 1e-12 * e_img.max(1.0));
    }

    #[test]
    fn data_consistency_keeps_measured_columns(seed in any::<u64>(), h in 2usize..16, w in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, w);
        let mut y = random_grid(&mut rng, h, w);
        for c in 0..w {
            if !mask.is_sampled(c) {
                y.column_mut(c).fill(Complex64::new(0.0, 0.0));
            }
        }
        let y = KSpace::new(y).unwrap();
        let net = ComplexImage::new(random_grid(&mut rng, h, w)).unwrap();
        let out = data_consistency(&net, &y, &mask).unwrap();
        let k_out = fft2c(&out).unwrap();
        let k_net = fft2c(&net).unwrap();
        for c in 0..w {
            let expected = if mask.is_sampled(c) { y.data().column(c).to_owned() } else { k_net.data().column(c).to_owned() };
            for r in 0..h {
                prop_assert!((k_out.data()[[r, c]] - expected[r]).norm() < 1e-12);
            }
        }
        let again = data_consistency(&out, &y, &mask).unwrap();
        prop_assert!(max_diff(again.data(), out.data()) < 1e-12);
        let zf = zero_filled(&y, &mask).unwrap();
        let dc_zero = data_consistency(&ComplexImage::zeros(h, w), &y, &mask).unwrap();
        prop_assert!(max_diff(zf.data(), dc_zero.data()) < 1e-12);
    }

    #[test]
    fn masks_are_deterministic_and_keep_the_center(seed in any::<u64>(), w in 16usize..400, accel in prop::sample::select(vec![4u32, 8])) {
        let spec = MaskSpec::for_acceleration(accel, seed);
        let a = generate_mask(&spec, w).unwrap();
        let b = generate_mask(&spec, w).unwrap();
        prop_assert_eq!(a.columns(), b.columns());
        let center = spec.center_columns(w);
        let start = center_band_start(w, center);
        prop_assert!((start..start + center).all(|c| a.is_sampled(c)));
    }

    #[test]
    fn nmse_and_ssim_identities(seed in any::<u64>(), h in 8usize..20, w in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let noise = Array2::from_shape_fn((h, w), |_| rng.random_range(-0.1..0.1));
        let x_hat = &x + &noise;
        let norm = x.iter().map(|v| v * v).sum::<f64>();
        prop_assert_eq!(nmse(&x, &x, norm).unwrap(), 0.0);
        prop_assert!(nmse(&x_hat, &x, norm).unwrap() > 0.0);
        let cfg = SsimConfig::default();
        prop_assert!((ssim(x.view(), x.view(), &cfg).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(x_hat.view(), x.view(), &cfg).unwrap();
        prop_assert!(s < 1.0 && s > -1.0);
    }

    #[test]
    fn tv_prox_does_not_increase_total_variation(seed in any::<u64>(), weight in 1e-3f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ComplexImage::new(random_grid(&mut rng, 12, 12)).unwrap();
        let p = tv_prox(&x, weight).unwrap();
        prop_assert!(tv(p.data()) <= tv(x.data()) + 1e-9);
    }
}
