//! Independent checks of the true distortion mappings. Each function panics
//! on a violated property; shared by the core tests and the acceptance run.
#![allow(dead_code)]

use distadapt_core::distortions::*;
use distadapt_core::scenes::generate_scenes;
use distadapt_core::{psnr, Image, RandomSource};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal as StatNormal};

pub const BLUR_GRID: [f64; 4] = [1.0, 2.0, 3.0, 5.0];
pub const AWGN_GRID: [f64; 3] = [10.0, 25.0, 50.0];
pub const BLOCK_DCT_GRID: [u32; 4] = [10, 30, 50, 90];
pub const WAVELET_GRID: [f64; 3] = [28.0, 34.0, 40.0];
pub const VARBLOCK_GRID: [u32; 3] = [22, 34, 46];

pub fn corpus() -> Vec<Image> {
    generate_scenes(20, 4, 64, &RandomSource::new(99, "corpus"))
        .unwrap()
        .samples
        .into_iter()
        .map(|s| s.image)
        .collect()
}

pub fn mean_psnr(imgs: &[Image], f: impl Fn(&Image) -> Image) -> f64 {
    imgs.iter().map(|i| psnr(i, &f(i)).unwrap()).sum::<f64>() / imgs.len() as f64
}

pub fn noise_texture(size: usize, seed: u64) -> Image {
    let smooth = Image::from_fn(size, size, |c, y, x| {
        0.5 + 0.25 * ((x as f64 / 9.0 + c as f64).sin() * (y as f64 / 13.0).cos())
    });
    awgn(&smooth, 12.0, &mut RandomSource::new(seed, "texture")).quantized()
}

/// Largest deviation of a blurred constant image from the constant.
pub fn blur_constant_invariance() -> f64 {
    let img = Image::filled(17, 23, 0.42);
    let mut worst: f64 = 0.0;
    for sigma in [0.5, 1.0, 3.3, 10.0] {
        let out = gaussian_blur(&img, sigma);
        for (a, b) in out.data().iter().zip(img.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-12, "constant image changed by {worst}");
    worst
}

/// Largest deviation of the blurred impulse from a directly summed,
/// normalized 2-D Gaussian truncated at 3σ.
pub fn blur_impulse_response() -> f64 {
    let (n, c) = (41usize, 20usize);
    let mut worst: f64 = 0.0;
    for sigma in [0.8f64, 2.0, 3.0] {
        let mut img = Image::new(n, n);
        for ch in 0..3 {
            img.set(ch, c, c, 1.0);
        }
        let out = gaussian_blur(&img, sigma);
        let r = (3.0 * sigma).ceil() as i64;
        let g = |i: i64, j: i64| (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
        let mut z = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                z += g(i, j);
            }
        }
        for ch in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as i64 - c as i64, x as i64 - c as i64);
                    let expected = if dy.abs() <= r && dx.abs() <= r { g(dy, dx) / z } else { 0.0 };
                    worst = worst.max((out.get(ch, y, x) - expected).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-10, "impulse response off by {worst}");
    worst
}

/// Two-sided p-values of the mean and variance tests on AWGN residuals of
/// a mid-grey image (no clipping at σ_n = 25.5).
pub fn awgn_moments() -> (f64, f64) {
    let img = Image::filled(512, 512, 0.5);
    let mut rng = RandomSource::new(5, "awgn");
    let out = awgn(&img, 25.5, &mut rng);
    let res: Vec<f64> = out.data().iter().zip(img.data()).map(|(o, i)| o - i).collect();
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = mean / (0.1 / n.sqrt());
    let pz = 2.0 * (1.0 - StatNormal::new(0.0, 1.0).unwrap().cdf(z.abs()));
    let chi = ChiSquared::new(n - 1.0).unwrap();
    let stat = (n - 1.0) * var / 0.01;
    let pv = 2.0 * chi.cdf(stat).min(1.0 - chi.cdf(stat));
    assert!(pz > 0.01, "mean test p {pz}");
    assert!(pv > 0.01, "variance test p {pv}");
    (pz, pv)
}

fn strictly_falling(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[0] > w[1])
}

/// Mean PSNR over the corpus along each documented grid, ordered from mild
/// to severe; every curve must fall strictly.
pub fn codec_monotonicity() -> Vec<(&'static str, Vec<f64>)> {
    let imgs = corpus();
    let mut dct: Vec<u32> = BLOCK_DCT_GRID.to_vec();
    dct.reverse();
    let curves = vec![
        ("blur", BLUR_GRID.iter().map(|&s| mean_psnr(&imgs, |i| gaussian_blur(i, s))).collect::<Vec<_>>()),
        (
            "block_dct",
            dct.iter().map(|&cl| mean_psnr(&imgs, |i| block_dct_codec(i, cl).unwrap())).collect(),
        ),
        (
            "wavelet_psnr",
            WAVELET_GRID
                .iter()
                .rev()
                .map(|&t| mean_psnr(&imgs, |i| wavelet_codec_at_psnr(i, t).unwrap().0))
                .collect(),
        ),
        (
            "varblock_qp",
            VARBLOCK_GRID.iter().map(|&qp| mean_psnr(&imgs, |i| varblock_codec(i, qp).unwrap())).collect(),
        ),
    ];
    for (name, c) in &curves {
        assert!(strictly_falling(c), "{name}: {c:?}");
    }
    curves
}

/// Largest |achieved − target| over 20 images and the wavelet grid.
pub fn wavelet_targeting() -> f64 {
    let imgs = corpus();
    assert_eq!(imgs.len(), 20);
    let mut worst: f64 = 0.0;
    for img in &imgs {
        for &t in &WAVELET_GRID {
            let (out, achieved) = wavelet_codec_at_psnr(img, t).unwrap();
            assert_eq!(psnr(img, &out).unwrap(), achieved);
            worst = worst.max((achieved - t).abs());
        }
    }
    assert!(worst <= 0.5, "wavelet target missed by {worst} dB");
    worst
}
