//! Compact instance segmenter. A small U-Net predicts per-pixel class logits
//! (background plus `classes`) and a normalized offset to the pixel's
//! instance centroid. Instances are decoded by clustering centroid votes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use distadapt_core::evaluation::Prediction;
use distadapt_core::imagecore::{Image, RandomSource};
use distadapt_core::par::parallel_map;
use distadapt_core::scenes::{DatasetSplit, Mask, Sample};
use distadapt_nn::{normal_tensor, Bound, Checkpoint, Graph, ParamId, ParamStore, Scalar, Sgd, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convert::{batch_to_tensor, image_to_tensor};
use crate::error::{ModelError, Result};

const MOMENTUM: f64 = 0.9;
const WEIGHT_DECAY: f64 = 1e-4;
/// Weight of the offset L1 term relative to cross-entropy.
pub const OFFSET_WEIGHT: f64 = 10.0;
/// Clusters with fewer pixels are discarded.
pub const MIN_PIXELS: usize = 16;
/// Vote clustering radius at a 128-pixel image side; scaled linearly.
pub const R_CLUSTER_AT_128: f64 = 5.0;
const MEAN_SHIFT_ITERATIONS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegArch {
    /// Channels at full resolution; doubled per level.
    pub base_filters: usize,
    /// Number of stride-2 levels. Depth 0 is a single hidden conv.
    pub depth: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            base_filters: 16,
            depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub lr_initial: f64,
    pub lr_drop_at: usize,
    pub lr_after_drop: f64,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub arch: SegArch,
    /// Random horizontal flips of training samples.
    #[serde(default = "yes")]
    pub flip: bool,
}

fn yes() -> bool {
    true
}

impl SegConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 4,
            max_iterations: 24000,
            lr_initial: 0.01,
            lr_drop_at: 18000,
            lr_after_drop: 0.001,
            classes: 3,
            seed: 0,
            arch: SegArch::default(),
            flip: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            max_iterations: 2000,
            lr_initial: 0.02,
            lr_drop_at: 1500,
            lr_after_drop: 0.002,
            // Toy scenes encode the class in stripe orientation, which a
            // mirror changes.
            flip: false,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.batch_size == 0 || self.max_iterations == 0 || self.classes == 0 || self.arch.base_filters == 0 {
            return bad("batch_size, max_iterations, classes and base_filters must be at least 1".into());
        }
        if !(self.lr_after_drop > 0.0 && self.lr_after_drop < self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!(
                "need 0 < lr_after_drop < lr_initial, got {} and {}",
                self.lr_after_drop, self.lr_initial
            ));
        }
        // A single-iteration run has no valid drop point; it runs at lr_initial.
        let drop_ok = self.lr_drop_at > 0 && (self.lr_drop_at < self.max_iterations || self.max_iterations == 1);
        if !drop_ok {
            return bad(format!(
                "need 0 < lr_drop_at < max_iterations, got {} and {}",
                self.lr_drop_at, self.max_iterations
            ));
        }
        Ok(())
    }

    /// Step schedule: `lr_initial` before `lr_drop_at`, `lr_after_drop` from then on.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_at {
            self.lr_initial
        } else {
            self.lr_after_drop
        }
    }
}

/// U-Net with a shared encoder and separate decoders for the class logits
/// (`classes + 1` channels) and the `(dy, dx)` offsets, concatenated in that
/// order. Hidden convs are followed by instance normalization and ReLU; the
/// 1×1 heads have biases.
#[derive(Clone, Debug)]
pub struct SegNet<T> {
    pub params: ParamStore<T>,
    pub arch: SegArch,
    pub classes: usize,
}

fn conv_layer<T: Scalar>(p: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    p.add(format!("{name}.w"), normal_tensor([cout, cin, k, k], std, rng));
}

impl<T: Scalar> SegNet<T> {
    pub fn new(arch: SegArch, classes: usize, rng: &mut impl Rng) -> Self {
        let b = arch.base_filters;
        let mut p = ParamStore::new();
        conv_layer(&mut p, "enc0.a", b, 3, 3, rng);
        if arch.depth > 0 {
            conv_layer(&mut p, "enc0.b", b, b, 3, rng);
        }
        for l in 1..=arch.depth {
            let w = b << l;
            conv_layer(&mut p, &format!("enc{l}.a"), w, w / 2, 3, rng);
            conv_layer(&mut p, &format!("enc{l}.b"), w, w, 3, rng);
        }
        for (branch, out) in [("cls", classes + 1), ("off", 2)] {
            for l in (0..arch.depth).rev() {
                let w = b << l;
                // Transposed conv weight is [cin, cout, k, k]; each output
                // sees about a quarter of the taps.
                let std = (2.0 / (2 * w * 9) as f64 * 4.0).sqrt();
                p.add(format!("{branch}.up{l}.w"), normal_tensor([2 * w, w, 3, 3], std, rng));
                conv_layer(&mut p, &format!("{branch}.dec{l}"), w, 2 * w, 3, rng);
            }
            p.add(format!("{branch}.head.w"), normal_tensor([out, b, 1, 1], (1.0 / b as f64).sqrt(), rng));
            p.add(format!("{branch}.head.b"), Tensor::zeros([out, 1, 1, 1]));
        }
        Self {
            params: p,
            arch,
            classes,
        }
    }

    /// Input sides must be multiples of `2^depth`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut next = 0;
        let mut take = || {
            let v = bound.var(ParamId(next));
            next += 1;
            v
        };
        let mut conv = |g: &mut Graph<T>, h: Var, stride: usize, pad: usize| -> Result<Var> {
            let c = g.conv2d(h, take(), None, stride, pad)?;
            Ok(norm_relu(g, c))
        };
        let mut h = conv(g, x, 1, 1)?;
        let mut skips = Vec::with_capacity(self.arch.depth);
        if self.arch.depth > 0 {
            h = conv(g, h, 1, 1)?;
        }
        for _ in 1..=self.arch.depth {
            skips.push(h);
            h = conv(g, h, 2, 1)?;
            h = conv(g, h, 1, 1)?;
        }
        // Each decoder branch and its head consume the remaining
        // parameters in order.
        let mut rest = next;
        let mut take = || {
            let v = bound.var(ParamId(rest));
            rest += 1;
            v
        };
        let mut outs = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut d = h;
            for skip in skips.iter().rev() {
                let u = g.conv_transpose2d(d, take(), None, 2, 1, 1)?;
                let u = norm_relu(g, u);
                let cat = g.concat(u, *skip)?;
                let c = g.conv2d(cat, take(), None, 1, 1)?;
                d = norm_relu(g, c);
            }
            let (w, b) = (take(), take());
            outs.push(g.conv2d(d, w, Some(b), 1, 0)?);
        }
        Ok(g.concat(outs[0], outs[1])?)
    }

    pub fn multiple(&self) -> usize {
        1 << self.arch.depth
    }
}

fn norm_relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.instance_norm(x);
    g.relu(n)
}

/// Per-pixel training targets of one sample.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `class_id + 1` inside instances, 0 elsewhere.
    pub labels: Vec<u32>,
    /// `[dy/H, dx/W]` planes pointing to the instance centroid.
    pub offsets: Vec<f64>,
    pub foreground: Vec<bool>,
}

impl Targets {
    pub fn from_sample(sample: &Sample, flip: bool) -> Self {
        let (h, w) = sample.image.dims();
        let mut t = Targets {
            labels: vec![0; h * w],
            offsets: vec![0.0; 2 * h * w],
            foreground: vec![false; h * w],
        };
        for a in &sample.annotations {
            let px: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| a.mask.get(y, if flip { w - 1 - x } else { x }))
                .collect();
            if px.is_empty() {
                continue;
            }
            let n = px.len() as f64;
            let cy = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            for &(y, x) in &px {
                let i = y * w + x;
                t.labels[i] = a.class_id + 1;
                t.foreground[i] = true;
                t.offsets[i] = (cy - y as f64) / h as f64;
                t.offsets[h * w + i] = (cx - x as f64) / w as f64;
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub r_cluster: f64,
    pub min_pixels: usize,
}

impl DecodeParams {
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            r_cluster: R_CLUSTER_AT_128 * height.max(width) as f64 / 128.0,
            min_pixels: MIN_PIXELS,
        }
    }
}

/// Turns per-pixel probabilities `[K, H, W]` (K = classes + 1, index 0 is
/// background) and normalized offsets `[2, H, W]` into instances.
///
/// Foreground pixels vote for `pixel + offset`. Vote cells with at least
/// `min_pixels` votes nearby are visited by decreasing density; each one not
/// yet within `r_cluster` of a center is moved by mean shift (flat kernel of
/// radius `r_cluster` over the votes) and kept as a new center unless it
/// lands within `r_cluster` of an existing one. Pixels join the nearest
/// center; class is the majority label (ties to the lower id) and score the
/// mean probability of that class over the instance.
pub fn decode(probs: &[f64], offsets: &[f64], height: usize, width: usize, params: DecodeParams) -> Vec<Prediction> {
    let hw = height * width;
    assert!(hw > 0 && probs.len() % hw == 0 && offsets.len() == 2 * hw, "decode: shape mismatch");
    let k = probs.len() / hw;
    let label = |p: usize| (1..k).fold(0, |best, c| if probs[c * hw + p] > probs[best * hw + p] { c } else { best });
    let mut fg: Vec<(usize, usize, f64, f64)> = Vec::new(); // pixel, label, vote y, vote x
    for p in 0..hw {
        let l = label(p);
        if l == 0 {
            continue;
        }
        let (y, x) = ((p / width) as f64, (p % width) as f64);
        let vy = y + offsets[p] * height as f64;
        let vx = x + offsets[hw + p] * width as f64;
        if vy.is_finite() && vx.is_finite() {
            fg.push((p, l, vy, vx));
        }
    }
    if fg.is_empty() {
        return Vec::new();
    }
    let cell = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let mut votes = vec![0usize; hw];
    for &(_, _, vy, vx) in &fg {
        votes[cell(vy, height) * width + cell(vx, width)] += 1;
    }
    // Summed-area table for box densities.
    let mut sat = vec![0usize; (height + 1) * (width + 1)];
    for y in 0..height {
        for x in 0..width {
            sat[(y + 1) * (width + 1) + x + 1] =
                votes[y * width + x] + sat[y * (width + 1) + x + 1] + sat[(y + 1) * (width + 1) + x] - sat[y * (width + 1) + x];
        }
    }
    let r = params.r_cluster.max(0.0);
    let ri = r.floor() as usize;
    let density = |p: usize| {
        let (y, x) = (p / width, p % width);
        let (y0, y1) = (y.saturating_sub(ri), (y + ri + 1).min(height));
        let (x0, x1) = (x.saturating_sub(ri), (x + ri + 1).min(width));
        sat[y1 * (width + 1) + x1] + sat[y0 * (width + 1) + x0] - sat[y0 * (width + 1) + x1] - sat[y1 * (width + 1) + x0]
    };
    let mut cells: Vec<(usize, usize)> = (0..hw).filter(|&p| votes[p] > 0).map(|p| (density(p), p)).collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let min_density = params.min_pixels.max(1);
    let shift = |mut cy: f64, mut cx: f64| {
        for _ in 0..MEAN_SHIFT_ITERATIONS {
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
            for &(_, _, vy, vx) in &fg {
                if (vy - cy).powi(2) + (vx - cx).powi(2) <= r * r {
                    sy += vy;
                    sx += vx;
                    n += 1;
                }
            }
            if n == 0 {
                break;
            }
            let (ny, nx) = (sy / n as f64, sx / n as f64);
            let moved = (ny - cy).powi(2) + (nx - cx).powi(2);
            (cy, cx) = (ny, nx);
            if moved < 1e-6 {
                break;
            }
        }
        (cy, cx)
    };
    let near = |centers: &[(f64, f64)], y: f64, x: f64| centers.iter().any(|&(cy, cx)| (cy - y).powi(2) + (cx - x).powi(2) <= r * r);
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for &(d, p) in &cells {
        if d < min_density {
            break;
        }
        let (y, x) = ((p / width) as f64, (p % width) as f64);
        if near(&centers, y, x) {
            continue;
        }
        let (cy, cx) = shift(y, x);
        if !near(&centers, cy, cx) {
            centers.push((cy, cx));
        }
    }
    if centers.is_empty() {
        return Vec::new();
    }
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); centers.len()];
    for &(p, l, vy, vx) in &fg {
        let nearest = centers
            .iter()
            .enumerate()
            .map(|(i, &(cy, cx))| ((cy - vy).powi(2) + (cx - vx).powi(2), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
            .expect("at least one center");
        members[nearest].push((p, l));
    }
    members
        .into_iter()
        .filter(|m| m.len() >= params.min_pixels.max(1))
        .map(|m| {
            let mut counts = vec![0usize; k];
            for &(_, l) in &m {
                counts[l] += 1;
            }
            let class = (1..k).fold(1, |best, c| if counts[c] > counts[best] { c } else { best });
            let score = m.iter().map(|&(p, _)| probs[class * hw + p]).sum::<f64>() / m.len() as f64;
            let mut mask = Mask::new(height, width);
            for &(p, _) in &m {
                mask.set(p / width, p % width, true);
            }
            Prediction {
                class_id: class as u32 - 1,
                score: score.clamp(0.0, 1.0),
                mask,
            }
        })
        .collect()
}

/// Softmax over the first `k` channels of a `[1, C, H, W]` output.
fn softmax_planes(out: &[f64], k: usize, hw: usize) -> Vec<f64> {
    let mut probs = vec![0.0; k * hw];
    for p in 0..hw {
        let m = (0..k).map(|c| out[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (out[c * hw + p] - m).exp()).sum();
        for c in 0..k {
            probs[c * hw + p] = (out[c * hw + p] - m).exp() / z;
        }
    }
    probs
}

#[derive(Clone, Debug)]
pub struct SegModel<T = f32> {
    pub config: SegConfig,
    pub net: SegNet<T>,
    /// Total parameter updates applied.
    pub iteration: usize,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: &SegConfig, rng: &RandomSource) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            net: SegNet::new(config.arch, config.classes, &mut rng.derive("init")),
            iteration: 0,
        })
    }

    /// Mean cross-entropy plus `OFFSET_WEIGHT` times the foreground offset L1
    /// on a `[N, 3, H, W]` batch.
    pub fn loss(&self, g: &mut Graph<T>, bound: &Bound, x: &Tensor<T>, targets: &[Targets]) -> Result<Var> {
        let xv = g.input(x.clone());
        let out = self.net.forward(g, bound, xv)?;
        let k = self.config.classes + 1;
        let logits = g.slice_channels(out, 0, k)?;
        let offs = g.slice_channels(out, k, 2)?;
        let labels: Vec<u32> = targets.iter().flat_map(|t| t.labels.iter().copied()).collect();
        let mask: Vec<bool> = targets.iter().flat_map(|t| t.foreground.iter().copied()).collect();
        let [n, _, h, w] = x.shape();
        let off_t = Tensor::from_vec(
            [n, 2, h, w],
            targets.iter().flat_map(|t| t.offsets.iter().map(|&v| T::of(v))).collect(),
        );
        let ce = g.softmax_cross_entropy(logits, labels)?;
        let l1 = g.masked_l1(offs, off_t, mask)?;
        Ok(g.lincomb(&[(ce, 1.0), (l1, OFFSET_WEIGHT)]))
    }

    /// Loss value and gradients for one batch.
    pub fn loss_and_grads(&self, x: &Tensor<T>, targets: &[Targets]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, true);
        let l = self.loss(&mut g, &bound, x, targets)?;
        let value = g.scalar(l).f64();
        if value.is_finite() {
            g.backward(l);
        }
        Ok((value, self.net.params.grads(&g, &bound)))
    }

    /// Raw `[classes + 3, H, W]` network output for one image; sides are
    /// reflect-extended to a multiple of `2^depth` and cropped back.
    pub fn raw_output(&self, img: &Image) -> Result<Vec<f64>> {
        let (h, w) = img.dims();
        let m = self.net.multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph > h && h < 2) || (pw > w && w < 2) || ph - h >= h || pw - w >= w {
            return Err(ModelError::TooSmall {
                height: h,
                width: w,
                min: m,
            });
        }
        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let padded = if (ph, pw) == (h, w) {
            img.clone()
        } else {
            Image::from_fn(ph, pw, |c, y, x| img.get(c, mirror(y, h), mirror(x, w)))
        };
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, false);
        let x = g.input(image_to_tensor(&padded));
        let out = self.net.forward(&mut g, &bound, x)?;
        let v = g.value(out);
        let channels = v.c();
        let mut res = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for y in 0..h {
                let row = &v.data()[(c * ph + y) * pw..(c * ph + y) * pw + w];
                res.extend(row.iter().map(|t| t.f64()));
            }
        }
        Ok(res)
    }

    pub fn predict(&self, img: &Image) -> Result<Vec<Prediction>> {
        let (h, w) = img.dims();
        let out = self.raw_output(img)?;
        let k = self.config.classes + 1;
        let hw = h * w;
        let probs = softmax_planes(&out, k, hw);
        Ok(decode(&probs, &out[k * hw..(k + 2) * hw], h, w, DecodeParams::for_size(h, w)))
    }

    /// Predictions for every sample, keyed by id.
    pub fn predict_split(&self, split: &DatasetSplit, workers: usize) -> Result<BTreeMap<String, Vec<Prediction>>>
    where
        T: Sync,
    {
        let preds = parallel_map(&split.samples, workers, |s| self.predict(&s.image));
        split
            .samples
            .iter()
            .zip(preds)
            .map(|(s, p)| Ok((s.id.clone(), p?)))
            .collect()
    }
}

impl SegModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "segmentation",
            "config": self.config,
            "iteration": self.iteration,
        }));
        ck.tensors.extend(self.net.params.export("net"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "segmentation" {
            return Err(ModelError::Checkpoint(format!(
                "expected a segmentation checkpoint, got {}",
                ck.meta["kind"]
            )));
        }
        let config: SegConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(&config, &RandomSource::new(0, "checkpoint-shell"))?;
        m.net.params.import("net", &ck.tensors)?;
        m.iteration = ck.meta["iteration"].as_u64().unwrap_or(0) as usize;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SegTrainOptions {
    /// Directory for `iter_<n>.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many iterations; the last iteration is always saved
    /// when a directory is given.
    pub checkpoint_every: usize,
}

pub struct SegOutcome {
    pub model: SegModel<f32>,
    /// Loss of every iteration, before its update.
    pub losses: Vec<f64>,
}

/// Trains from scratch (`init = None`) or fine-tunes `init` on `data` with
/// the configured step schedule.
pub fn train_or_finetune(
    init: Option<SegModel<f32>>,
    data: &DatasetSplit,
    cfg: &SegConfig,
    rng: &RandomSource,
    opts: &SegTrainOptions,
) -> Result<SegOutcome> {
    cfg.validate()?;
    train_with_schedule(init, data, cfg, rng, opts, |i| cfg.lr_at(i))
}

/// Trains the baseline model on pristine source data.
pub fn pretrain_baseline(data: &DatasetSplit, cfg: &SegConfig, rng: &RandomSource, opts: &SegTrainOptions) -> Result<SegOutcome> {
    train_or_finetune(None, data, cfg, rng, opts)
}

/// As [`train_or_finetune`] with an arbitrary learning-rate function of the
/// iteration index. Runs `cfg.max_iterations` updates.
pub fn train_with_schedule(
    init: Option<SegModel<f32>>,
    data: &DatasetSplit,
    cfg: &SegConfig,
    rng: &RandomSource,
    opts: &SegTrainOptions,
    schedule: impl Fn(usize) -> f64,
) -> Result<SegOutcome> {
    if data.is_empty() {
        return Err(ModelError::Config("training split is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_iterations == 0 {
        return Err(ModelError::Config("batch_size and max_iterations must be at least 1".into()));
    }
    let mut model = match init {
        Some(m) => {
            if m.config.classes != cfg.classes || m.config.arch != cfg.arch {
                return Err(ModelError::Config(format!(
                    "checkpoint has {} classes / {:?}, config has {} / {:?}",
                    m.config.classes, m.config.arch, cfg.classes, cfg.arch
                )));
            }
            SegModel {
                config: cfg.clone(),
                ..m
            }
        }
        None => SegModel::new(cfg, rng)?,
    };
    let m = model.net.multiple();
    for s in &data.samples {
        let (h, w) = s.image.dims();
        if h % m != 0 || w % m != 0 || h != data.samples[0].image.height() || w != data.samples[0].image.width() {
            return Err(ModelError::Config(format!(
                "training images must share one size divisible by {m}; {} is {h}x{w}",
                s.id
            )));
        }
        if let Some(a) = s.annotations.iter().find(|a| a.class_id as usize >= cfg.classes) {
            return Err(ModelError::Config(format!(
                "{}: class {} outside the {} configured classes",
                s.id, a.class_id, cfg.classes
            )));
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    }
    let mut opt = Sgd::new(&model.net.params, MOMENTUM, WEIGHT_DECAY);
    let mut data_rng = rng.derive("data");
    let n = data.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.max_iterations);
    let mut last_checkpoint: Option<PathBuf> = None;
    for it in 0..cfg.max_iterations {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            let s = &data.samples[order[cursor]];
            cursor += 1;
            let flip = cfg.flip && data_rng.random::<bool>();
            imgs.push(if flip { s.image.flip_horizontal() } else { s.image.clone() });
            targets.push(Targets::from_sample(s, flip));
        }
        let (loss, grads) = model.loss_and_grads(&batch_to_tensor(&imgs), &targets)?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                at: format!("iteration {it}"),
                last_checkpoint,
            });
        }
        opt.step(&mut model.net.params, &grads, schedule(it));
        model.iteration += 1;
        losses.push(loss);
        if it % 100 == 0 || it + 1 == cfg.max_iterations {
            log::info!("segmentation iteration {}/{}: loss {:.4}", it + 1, cfg.max_iterations, loss);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let due = opts.checkpoint_every > 0 && (it + 1) % opts.checkpoint_every == 0;
            if due || it + 1 == cfg.max_iterations {
                let path = dir.join(format!("iter_{}.ckpt", it + 1));
                model.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(SegOutcome { model, losses })
}
