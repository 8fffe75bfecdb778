//! The true pristine-to-distorted mappings: Gaussian blur, additive white
//! Gaussian noise, and three transform-coding emulators (fixed 8×8 block DCT,
//! PSNR-targeted Haar wavelet, quadtree variable-block DCT).

use std::fmt;
use std::sync::OnceLock;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{clip_slice, psnr, quantize, Image, RandomSource, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Blur,
    Awgn,
    BlockDct,
    WaveletPsnr,
    VarblockQp,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Blur,
        DistortionKind::Awgn,
        DistortionKind::BlockDct,
        DistortionKind::WaveletPsnr,
        DistortionKind::VarblockQp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Blur => "blur",
            DistortionKind::Awgn => "awgn",
            DistortionKind::BlockDct => "block_dct",
            DistortionKind::WaveletPsnr => "wavelet_psnr",
            DistortionKind::VarblockQp => "varblock_qp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Human-readable valid level range.
    pub fn range(self) -> &'static str {
        match self {
            DistortionKind::Blur => "sigma_b in [0, 50] pixels",
            DistortionKind::Awgn => "sigma_n in [0, 255] (8-bit scale)",
            DistortionKind::BlockDct => "integer CL in [1, 100]",
            DistortionKind::WaveletPsnr => "target PSNR in (0, 300] dB",
            DistortionKind::VarblockQp => "integer QP in [0, 51]",
        }
    }

    /// True when a larger level means a stronger distortion.
    pub fn level_increases_severity(self) -> bool {
        matches!(self, DistortionKind::Blur | DistortionKind::Awgn | DistortionKind::VarblockQp)
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A true distortion mapping: kind plus its control parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: f64) -> Self {
        Self { kind, level, seed: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.level;
        let integral = l.fract() == 0.0;
        let ok = l.is_finite()
            && match self.kind {
                DistortionKind::Blur => (0.0..=50.0).contains(&l),
                DistortionKind::Awgn => (0.0..=255.0).contains(&l),
                DistortionKind::BlockDct => integral && (1.0..=100.0).contains(&l),
                DistortionKind::WaveletPsnr => l > 0.0 && l <= 300.0,
                DistortionKind::VarblockQp => integral && (0.0..=51.0).contains(&l),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLevel {
                kind: self.kind.name(),
                level: l,
                range: self.kind.range(),
            })
        }
    }

    /// Filesystem-safe label such as `blur_2.5`.
    pub fn label(&self) -> String {
        format!("{}_{}", self.kind, self.level)
    }

    /// Whether the mapping is the identity on every input.
    pub fn is_identity(&self) -> bool {
        matches!(self.kind, DistortionKind::Blur | DistortionKind::Awgn) && self.level == 0.0
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.level)
    }
}

/// Applies the mapping described by `spec`. Only `awgn` consumes `rng`, and
/// only when the spec carries no seed of its own.
pub fn apply(spec: &DistortionSpec, img: &Image, rng: &mut RandomSource) -> Result<Image> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::Blur => Ok(gaussian_blur(img, spec.level)),
        DistortionKind::Awgn => Ok(match spec.seed {
            Some(seed) => awgn(img, spec.level, &mut RandomSource::new(seed, "awgn")),
            None => awgn(img, spec.level, rng),
        }),
        DistortionKind::BlockDct => block_dct_codec(img, spec.level as u32),
        DistortionKind::WaveletPsnr => wavelet_codec_at_psnr(img, spec.level).map(|(out, _)| out),
        DistortionKind::VarblockQp => varblock_codec(img, spec.level as u32),
    }
}

// ---------------------------------------------------------------- blur

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Mirror index without edge repetition, periodic for offsets beyond one length.
fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Separable Gaussian convolution with reflected borders; `sigma = 0` is
/// the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = img.dims();
    let mut out = img.data().to_vec();
    let mut tmp = vec![0.0; h * w];
    for c in 0..CHANNELS {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * row[reflect_index(x as i64 + t as i64 - r, w)];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * tmp[reflect_index(y as i64 + t as i64 - r, h) * w + x];
                }
                plane[y * w + x] = s;
            }
        }
    }
    Image::from_planar(h, w, out).expect("same dimensions")
}

// ---------------------------------------------------------------- noise

/// Adds i.i.d. `N(0, (σ_n/255)²)` per pixel and channel, then clips.
pub fn awgn(img: &Image, sigma_n: f64, rng: &mut RandomSource) -> Image {
    if sigma_n <= 0.0 {
        return img.clone();
    }
    let dist = Normal::new(0.0, sigma_n / 255.0).expect("finite sigma");
    img.map_planar(|d| {
        for v in d {
            *v += dist.sample(rng);
        }
    })
}

// ---------------------------------------------------------------- DCT helpers

/// Orthonormal DCT-II basis, `basis[k * n + i]`.
fn dct_basis(n: usize) -> &'static [f64] {
    static B8: OnceLock<Vec<f64>> = OnceLock::new();
    static B16: OnceLock<Vec<f64>> = OnceLock::new();
    static B32: OnceLock<Vec<f64>> = OnceLock::new();
    let cell = match n {
        8 => &B8,
        16 => &B16,
        32 => &B32,
        _ => panic!("unsupported DCT size {n}"),
    };
    cell.get_or_init(|| {
        let mut b = vec![0.0; n * n];
        for k in 0..n {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                b[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        b
    })
}

/// In-place 2-D DCT (`inverse = false`) or its inverse on an `n×n` block.
fn dct2(block: &mut [f64], n: usize, inverse: bool) {
    let b = dct_basis(n);
    let mut tmp = vec![0.0; n * n];
    // rows
    for y in 0..n {
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += if inverse { b[i * n + k] * block[y * n + i] } else { b[k * n + i] * block[y * n + i] };
            }
            tmp[y * n + k] = s;
        }
    }
    // columns
    for x in 0..n {
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += if inverse { b[i * n + k] * tmp[i * n + x] } else { b[k * n + i] * tmp[i * n + x] };
            }
            block[k * n + x] = s;
        }
    }
}

/// Planes on the 0–255 scale, edge-replicated up to multiples of `multiple`.
fn padded_planes(img: &Image, multiple: usize) -> (Vec<Vec<f64>>, usize, usize) {
    let (h, w) = img.dims();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let planes = (0..CHANNELS)
        .map(|c| {
            let mut p = vec![0.0; ph * pw];
            for y in 0..ph {
                for x in 0..pw {
                    p[y * pw + x] = img.get(c, y.min(h - 1), x.min(w - 1)) * 255.0;
                }
            }
            p
        })
        .collect();
    (planes, ph, pw)
}

fn unpad(planes: &[Vec<f64>], pw: usize, h: usize, w: usize) -> Image {
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for p in planes {
        for y in 0..h {
            for x in 0..w {
                data.push(p[y * pw + x] / 255.0);
            }
        }
    }
    clip_slice(&mut data);
    Image::from_planar(h, w, data).expect("same dimensions")
}

fn code_block(plane: &mut [f64], pw: usize, y0: usize, x0: usize, n: usize, step: impl Fn(usize) -> f64) {
    let mut block = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            block[y * n + x] = plane[(y0 + y) * pw + x0 + x] - 128.0;
        }
    }
    dct2(&mut block, n, false);
    for (i, v) in block.iter_mut().enumerate() {
        let q = step(i);
        *v = (*v / q).round() * q;
    }
    dct2(&mut block, n, true);
    for y in 0..n {
        for x in 0..n {
            plane[(y0 + y) * pw + x0 + x] = block[y * n + x] + 128.0;
        }
    }
}

// ---------------------------------------------------------------- block DCT (JPEG-like)

/// Standard luminance quantization table (JPEG Annex K), row-major.
pub const LUMA_BASE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table: `s = cl < 50 ? 5000/cl : 200 - 2cl`,
/// `q = clamp((base·s + 50) / 100, 1, 255)` in integer arithmetic.
pub fn quant_table(cl: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&cl) {
        return Err(Error::InvalidLevel {
            kind: "block_dct",
            level: f64::from(cl),
            range: DistortionKind::BlockDct.range(),
        });
    }
    let s = if cl < 50 { 5000 / cl } else { 200 - 2 * cl };
    let mut t = [0u16; 64];
    for (q, &b) in t.iter_mut().zip(&LUMA_BASE_TABLE) {
        *q = ((u32::from(b) * s + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(t)
}

/// 8×8 block DCT with the quality-scaled table on every channel. Distortion
/// only: coefficients are quantized and reconstructed, no bitstream.
pub fn block_dct_codec(img: &Image, cl: u32) -> Result<Image> {
    let table = quant_table(cl)?;
    let (h, w) = img.dims();
    let (mut planes, ph, pw) = padded_planes(img, 8);
    for plane in planes.iter_mut() {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                code_block(plane, pw, by, bx, 8, |i| f64::from(table[i]));
            }
        }
    }
    Ok(unpad(&planes, pw, h, w))
}

// ---------------------------------------------------------------- Haar wavelet

pub const WAVELET_LEVELS: usize = 3;
const BISECTION_ITERATIONS: usize = 60;
const PSNR_TOLERANCE: f64 = 0.5;
const MAX_STEP: f64 = 65536.0;

fn haar_forward(v: &mut [i64]) {
    let n = v.len();
    let m = n / 2;
    let mut low = Vec::with_capacity(n - m);
    let mut high = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        let d = b - a;
        high.push(d);
        low.push(a + d.div_euclid(2));
    }
    if n % 2 == 1 {
        low.push(v[n - 1]);
    }
    v[..low.len()].copy_from_slice(&low);
    v[low.len()..].copy_from_slice(&high);
}

fn haar_inverse(v: &mut [i64]) {
    let n = v.len();
    let m = n / 2;
    let nl = n - m;
    let mut out = vec![0; n];
    for i in 0..m {
        let (s, d) = (v[i], v[nl + i]);
        let a = s - d.div_euclid(2);
        out[2 * i] = a;
        out[2 * i + 1] = d + a;
    }
    if n % 2 == 1 {
        out[n - 1] = v[nl - 1];
    }
    v.copy_from_slice(&out);
}

/// Sizes of the low band at each level, starting with the full plane.
fn level_sizes(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![(h, w)];
    for _ in 0..WAVELET_LEVELS {
        let (lh, lw) = *sizes.last().unwrap();
        sizes.push((lh.div_ceil(2), lw.div_ceil(2)));
    }
    sizes
}

fn haar2_forward(plane: &mut [i64], w: usize, sizes: &[(usize, usize)]) {
    for &(lh, lw) in &sizes[..WAVELET_LEVELS] {
        for y in 0..lh {
            haar_forward(&mut plane[y * w..y * w + lw]);
        }
        let mut col = vec![0; lh];
        for x in 0..lw {
            for y in 0..lh {
                col[y] = plane[y * w + x];
            }
            haar_forward(&mut col);
            for y in 0..lh {
                plane[y * w + x] = col[y];
            }
        }
    }
}

fn haar2_inverse(plane: &mut [i64], w: usize, sizes: &[(usize, usize)]) {
    for &(lh, lw) in sizes[..WAVELET_LEVELS].iter().rev() {
        let mut col = vec![0; lh];
        for x in 0..lw {
            for y in 0..lh {
                col[y] = plane[y * w + x];
            }
            haar_inverse(&mut col);
            for y in 0..lh {
                plane[y * w + x] = col[y];
            }
        }
        for y in 0..lh {
            haar_inverse(&mut plane[y * w..y * w + lw]);
        }
    }
}

/// Integer Haar coefficients of an image, precomputed once per rate search.
pub struct HaarCoefficients {
    height: usize,
    width: usize,
    planes: Vec<Vec<i64>>,
}

impl HaarCoefficients {
    /// Transform of the 8-bit quantized image.
    pub fn new(img: &Image) -> Self {
        let (h, w) = img.dims();
        let sizes = level_sizes(h, w);
        let planes = (0..CHANNELS)
            .map(|c| {
                let mut p: Vec<i64> = img.plane(c).iter().map(|&v| i64::from(quantize(v))).collect();
                haar2_forward(&mut p, w, &sizes);
                p
            })
            .collect();
        Self {
            height: h,
            width: w,
            planes,
        }
    }

    /// Reconstruction after dead-zone quantization of the detail bands with
    /// step `step`; steps `<= 1` are lossless.
    pub fn reconstruct(&self, step: f64) -> Image {
        self.reconstruct_mixed(step, step, 0)
    }

    /// Number of detail coefficients over all channels.
    pub fn detail_count(&self) -> usize {
        let (llh, llw) = level_sizes(self.height, self.width)[WAVELET_LEVELS];
        CHANNELS * (self.height * self.width - llh * llw)
    }

    /// As [`reconstruct`](Self::reconstruct), but the first `switched`
    /// detail coefficients (channel-major raster order) use `coarse` and the
    /// rest use `fine`.
    pub fn reconstruct_mixed(&self, fine: f64, coarse: f64, switched: usize) -> Image {
        let (h, w) = (self.height, self.width);
        let sizes = level_sizes(h, w);
        let (llh, llw) = sizes[WAVELET_LEVELS];
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        let mut index = 0usize;
        for plane in &self.planes {
            let mut p = plane.clone();
            for y in 0..h {
                for x in 0..w {
                    if y < llh && x < llw {
                        continue;
                    }
                    let step = if index < switched { coarse } else { fine };
                    index += 1;
                    if step <= 1.0 {
                        continue;
                    }
                    let c = p[y * w + x];
                    let q = (c.unsigned_abs() as f64 / step).floor();
                    p[y * w + x] = if q == 0.0 {
                        0
                    } else {
                        (c.signum() as f64 * (q + 0.5) * step).round() as i64
                    };
                }
            }
            haar2_inverse(&mut p, w, &sizes);
            data.extend(p.iter().map(|&v| v as f64 / 255.0));
        }
        clip_slice(&mut data);
        Image::from_planar(h, w, data).expect("same dimensions")
    }
}

/// 3-level Haar codec whose detail step is bisected until the
/// reconstruction PSNR is within ±0.5 dB of `target`. If the PSNR curve
/// jumps over the target, a prefix of the coefficients takes the coarser of
/// the two bracketing steps. Targets above the finest lossy PSNR yield the
/// lossless reconstruction.
pub fn wavelet_codec_at_psnr(img: &Image, target: f64) -> Result<(Image, f64)> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidLevel {
            kind: "wavelet_psnr",
            level: target,
            range: DistortionKind::WaveletPsnr.range(),
        });
    }
    let coeffs = HaarCoefficients::new(img);
    let eval = |step: f64| -> (Image, f64) {
        let out = coeffs.reconstruct(step);
        let p = psnr(img, &out).expect("same dimensions");
        (out, p)
    };
    let (mut lo, mut hi) = (1.0 + 1e-9, MAX_STEP);
    let (finest, finest_psnr) = eval(lo);
    if finest_psnr.is_finite() && target > finest_psnr + PSNR_TOLERANCE {
        let lossless = coeffs.reconstruct(1.0);
        let p = psnr(img, &lossless)?;
        return Ok((lossless, p));
    }
    let (coarsest, coarsest_psnr) = eval(hi);
    if coarsest_psnr.is_infinite() {
        // Nothing to quantize: every step reproduces the input.
        return Err(Error::NonConvergent {
            target,
            iterations: 0,
        });
    }
    if target < coarsest_psnr - PSNR_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "target {target} dB is below the strongest achievable {coarsest_psnr:.2} dB"
        )));
    }
    let mut best: Option<(Image, f64)> = None;
    for (out, p) in [(finest, finest_psnr), (coarsest, coarsest_psnr)] {
        if (p - target).abs() <= PSNR_TOLERANCE {
            best = Some((out, p));
        }
    }
    for _ in 0..BISECTION_ITERATIONS {
        let mid = (lo * hi).sqrt();
        let (out, p) = eval(mid);
        let err = (p - target).abs();
        if err <= PSNR_TOLERANCE && best.as_ref().is_none_or(|(_, bp)| err < (bp - target).abs()) {
            best = Some((out, p));
        }
        if err < 0.05 {
            break;
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    // The PSNR curve jumps across the target where many coefficients share
    // a magnitude. Switch a growing prefix of the detail coefficients from
    // the finer to the coarser bracketing step.
    let (mut k_lo, mut k_hi) = (0usize, coeffs.detail_count());
    while k_hi - k_lo > 1 {
        let mid = k_lo + (k_hi - k_lo) / 2;
        let out = coeffs.reconstruct_mixed(lo, hi, mid);
        let p = psnr(img, &out)?;
        if (p - target).abs() <= PSNR_TOLERANCE {
            return Ok((out, p));
        }
        if p > target {
            k_lo = mid;
        } else {
            k_hi = mid;
        }
    }
    Err(Error::NonConvergent {
        target,
        iterations: BISECTION_ITERATIONS,
    })
}

// ---------------------------------------------------------------- quadtree variable-block DCT (HEIF-like)

pub const SPLIT_VARIANCE: f64 = 10.0;
pub const MAX_BLOCK: usize = 32;
pub const MIN_BLOCK: usize = 8;

/// H.26x quantizer step on the 0–255 coefficient scale.
pub fn qp_step(qp: u32) -> f64 {
    2f64.powf((f64::from(qp) - 4.0) / 6.0)
}

fn block_variance(planes: &[Vec<f64>], pw: usize, y0: usize, x0: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for p in planes {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for y in y0..y0 + n {
            for &v in &p[y * pw + x0..y * pw + x0 + n] {
                s += v;
                s2 += v * v;
            }
        }
        let cnt = (n * n) as f64;
        let mean = s / cnt;
        total += (s2 / cnt - mean * mean).max(0.0);
    }
    total / planes.len() as f64
}

/// Leaf blocks `(y, x, size)` of the variance-driven quadtree.
pub fn quadtree_partition(img: &Image) -> Vec<(usize, usize, usize)> {
    let (planes, ph, pw) = padded_planes(img, MAX_BLOCK);
    let mut leaves = Vec::new();
    let mut stack = Vec::new();
    for by in (0..ph).step_by(MAX_BLOCK).rev() {
        for bx in (0..pw).step_by(MAX_BLOCK).rev() {
            stack.push((by, bx, MAX_BLOCK));
        }
    }
    while let Some((y, x, n)) = stack.pop() {
        if n > MIN_BLOCK && block_variance(&planes, pw, y, x, n) > SPLIT_VARIANCE {
            let h = n / 2;
            stack.extend([(y + h, x + h, h), (y + h, x, h), (y, x + h, h), (y, x, h)]);
        } else {
            leaves.push((y, x, n));
        }
    }
    leaves
}

/// Quadtree (32→8) block DCT with uniform step `2^((qp-4)/6)`.
pub fn varblock_codec(img: &Image, qp: u32) -> Result<Image> {
    if qp > 51 {
        return Err(Error::InvalidLevel {
            kind: "varblock_qp",
            level: f64::from(qp),
            range: DistortionKind::VarblockQp.range(),
        });
    }
    let step = qp_step(qp);
    let (h, w) = img.dims();
    let leaves = quadtree_partition(img);
    let (mut planes, _, pw) = padded_planes(img, MAX_BLOCK);
    for plane in planes.iter_mut() {
        for &(y, x, n) in &leaves {
            code_block(plane, pw, y, x, n, |_| step);
        }
    }
    Ok(unpad(&planes, pw, h, w))
}
