//! CycleGAN: generators G: X→Y and F: Y→X, PatchGAN discriminators D_X and
//! D_Y, least-squares adversarial loss, cycle and identity L1 terms.
//!
//! Networks see images on `[-1, 1]`; all L1 terms are measured there.

use std::path::{Path, PathBuf};

use distadapt_core::imagecore::{crop_offset, Image, RandomSource};
use distadapt_nn::{normal_tensor, Adam, Bound, Checkpoint, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convert::{batch_to_tensor, image_to_tensor, tensor_to_image};
use crate::error::{ModelError, Result};

const INIT_STD: f64 = 0.02;
const ADAM_BETA1: f64 = 0.5;
const ADAM_BETA2: f64 = 0.999;
const LEAKY_SLOPE: f64 = 0.2;
/// Smallest image side `emulate` accepts.
pub const MIN_EMULATE_SIZE: usize = 8;

/// How `lambda_identity` is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// weight = lambda_identity · lambda_cycle
    Relative,
    /// weight = lambda_identity
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationConfig {
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub identity_mode: IdentityMode,
    pub batch_size: usize,
    pub crop: usize,
    pub residual_blocks: usize,
    pub base_filters: usize,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub lr0: f64,
    pub pool_size: usize,
    /// Use at most this many images per domain (the first ones).
    #[serde(default)]
    pub max_images: Option<usize>,
    /// Random horizontal flips during training.
    pub flip: bool,
    pub seed: u64,
}

impl TranslationConfig {
    pub fn paper() -> Self {
        Self {
            lambda_cycle: 10.0,
            lambda_identity: 0.5,
            identity_mode: IdentityMode::Relative,
            batch_size: 1,
            crop: 256,
            residual_blocks: 9,
            base_filters: 64,
            epochs_constant: 100,
            epochs_decay: 100,
            lr0: 0.0002,
            pool_size: 50,
            max_images: None,
            flip: true,
            seed: 0,
        }
    }

    pub fn toy() -> Self {
        Self {
            crop: 64,
            residual_blocks: 3,
            base_filters: 16,
            epochs_constant: 20,
            epochs_decay: 20,
            max_images: Some(200),
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

    pub fn epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn identity_weight(&self) -> f64 {
        match self.identity_mode {
            IdentityMode::Relative => self.lambda_identity * self.lambda_cycle,
            IdentityMode::Absolute => self.lambda_identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("crop", self.crop),
            ("residual_blocks", self.residual_blocks),
            ("base_filters", self.base_filters),
            ("epochs_constant", self.epochs_constant),
            ("epochs_decay", self.epochs_decay),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(ModelError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.crop < MIN_EMULATE_SIZE || self.crop % 4 != 0 {
            return Err(ModelError::Config(format!(
                "crop must be a multiple of 4 and at least {MIN_EMULATE_SIZE}, got {}",
                self.crop
            )));
        }
        if self.lambda_cycle < 0.0 || self.lambda_identity < 0.0 {
            return Err(ModelError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: `lr0` for the constant phase, then
/// `lr0·(1 − (epoch − epochs_constant + 1)/epochs_decay)`.
pub fn lr_schedule(cfg: &TranslationConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs() {
        return Err(ModelError::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs()
        )));
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.lr0);
    }
    let done = (epoch - cfg.epochs_constant + 1) as f64;
    Ok(cfg.lr0 * (1.0 - done / cfg.epochs_decay as f64))
}

/// Receptive field of a PatchGAN with `layers` stride-2 convolutions.
pub fn patchgan_receptive_field(layers: usize) -> usize {
    let mut r = 1;
    for _ in 0..2 {
        r += 3;
    }
    for _ in 0..layers {
        r = 2 * r + 2;
    }
    r
}

/// Depth whose receptive field is nearest to 70 px scaled by `crop / 256`.
pub fn discriminator_layers(crop: usize) -> usize {
    let target = 70.0 * crop as f64 / 256.0;
    (1..=3)
        .min_by(|&a, &b| {
            let da = (patchgan_receptive_field(a) as f64 - target).abs();
            let db = (patchgan_receptive_field(b) as f64 - target).abs();
            da.total_cmp(&db)
        })
        .expect("nonempty range")
}

/// Hands out graph variables in parameter insertion order.
struct Cursor<'a> {
    bound: &'a Bound,
    next: usize,
}

impl<'a> Cursor<'a> {
    fn new(bound: &'a Bound) -> Self {
        Self { bound, next: 0 }
    }

    fn take(&mut self) -> Var {
        let v = self.bound.var(ParamId(self.next));
        self.next += 1;
        v
    }
}

/// ResNet generator: 7×7 stem, two stride-2 convs, residual blocks, two
/// transposed convs, 7×7 output with tanh. Convs followed by instance norm
/// carry no bias. A 1×1 skip from the input into the output pre-activation
/// (initialized to the identity) carries the absolute colour that instance
/// norm removes.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub params: ParamStore<T>,
    pub residual_blocks: usize,
    pub filters: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn new(residual_blocks: usize, filters: usize, rng: &mut impl Rng) -> Self {
        let nf = filters;
        let mut p = ParamStore::new();
        p.add("stem.w", normal_tensor([nf, 3, 7, 7], INIT_STD, rng));
        p.add("down1.w", normal_tensor([2 * nf, nf, 3, 3], INIT_STD, rng));
        p.add("down2.w", normal_tensor([4 * nf, 2 * nf, 3, 3], INIT_STD, rng));
        for i in 0..residual_blocks {
            p.add(format!("res{i}.conv1.w"), normal_tensor([4 * nf, 4 * nf, 3, 3], INIT_STD, rng));
            p.add(format!("res{i}.conv2.w"), normal_tensor([4 * nf, 4 * nf, 3, 3], INIT_STD, rng));
        }
        p.add("up1.w", normal_tensor([4 * nf, 2 * nf, 3, 3], INIT_STD, rng));
        p.add("up2.w", normal_tensor([2 * nf, nf, 3, 3], INIT_STD, rng));
        p.add("out.w", normal_tensor([3, nf, 7, 7], INIT_STD, rng));
        p.add("out.b", Tensor::zeros([3, 1, 1, 1]));
        let mut skip = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            skip.data_mut()[c * 3 + c] = T::of(1.0);
        }
        p.add("skip.w", skip);
        Self {
            params: p,
            residual_blocks,
            filters,
        }
    }

    /// `x` and the result are on `[-1, 1]`; spatial size must be a multiple of 4.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut p = Cursor::new(bound);
        let mut h = g.reflect_pad(x, 3)?;
        h = g.conv2d(h, p.take(), None, 1, 0)?;
        h = norm_relu(g, h);
        for _ in 0..2 {
            h = g.conv2d(h, p.take(), None, 2, 1)?;
            h = norm_relu(g, h);
        }
        for _ in 0..self.residual_blocks {
            let mut r = g.reflect_pad(h, 1)?;
            r = g.conv2d(r, p.take(), None, 1, 0)?;
            r = norm_relu(g, r);
            r = g.reflect_pad(r, 1)?;
            r = g.conv2d(r, p.take(), None, 1, 0)?;
            r = g.instance_norm(r);
            h = g.add(h, r)?;
        }
        for _ in 0..2 {
            h = g.conv_transpose2d(h, p.take(), None, 2, 1, 1)?;
            h = norm_relu(g, h);
        }
        h = g.reflect_pad(h, 3)?;
        let w = p.take();
        let b = p.take();
        h = g.conv2d(h, w, Some(b), 1, 0)?;
        let s = g.conv2d(x, p.take(), None, 1, 0)?;
        h = g.add(h, s)?;
        Ok(g.tanh(h))
    }
}

fn norm_relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.instance_norm(x);
    g.relu(n)
}

fn norm_lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.instance_norm(x);
    g.leaky_relu(n, LEAKY_SLOPE)
}

/// PatchGAN: `layers` stride-2 4×4 convs, one stride-1 conv, 1-channel map.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    pub layers: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(layers: usize, filters: usize, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        p.add("c0.w", normal_tensor([filters, 3, 4, 4], INIT_STD, rng));
        p.add("c0.b", Tensor::zeros([filters, 1, 1, 1]));
        let mut prev = filters;
        for i in 1..layers {
            let next = filters * (1 << i).min(8);
            p.add(format!("c{i}.w"), normal_tensor([next, prev, 4, 4], INIT_STD, rng));
            prev = next;
        }
        let next = filters * (1 << layers).min(8);
        p.add("penult.w", normal_tensor([next, prev, 4, 4], INIT_STD, rng));
        p.add("final.w", normal_tensor([1, next, 4, 4], INIT_STD, rng));
        p.add("final.b", Tensor::zeros([1, 1, 1, 1]));
        Self { params: p, layers }
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut p = Cursor::new(bound);
        let (w, b) = (p.take(), p.take());
        let mut h = g.conv2d(x, w, Some(b), 2, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for _ in 1..self.layers {
            h = g.conv2d(h, p.take(), None, 2, 1)?;
            h = norm_lrelu(g, h);
        }
        h = g.conv2d(h, p.take(), None, 1, 1)?;
        h = norm_lrelu(g, h);
        let (w, b) = (p.take(), p.take());
        Ok(g.conv2d(h, w, Some(b), 1, 1)?)
    }
}

/// Loss values of one evaluation. Adversarial discriminator terms are
/// `0.5·(MSE(D(real), 1) + MSE(D(fake), 0))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_dx: f64,
    pub adv_dy: f64,
    pub cyc: f64,
    pub idt: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossTerms {
    fn values(&self) -> [f64; 8] {
        [
            self.adv_g, self.adv_f, self.adv_dx, self.adv_dy, self.cyc, self.idt, self.total_g, self.total_d,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn mean(rows: &[LossTerms]) -> LossTerms {
        let n = rows.len().max(1) as f64;
        let s = |f: fn(&LossTerms) -> f64| rows.iter().map(f).sum::<f64>() / n;
        LossTerms {
            adv_g: s(|r| r.adv_g),
            adv_f: s(|r| r.adv_f),
            adv_dx: s(|r| r.adv_dx),
            adv_dy: s(|r| r.adv_dy),
            cyc: s(|r| r.cyc),
            idt: s(|r| r.idt),
            total_g: s(|r| r.total_g),
            total_d: s(|r| r.total_d),
        }
    }
}

struct GeneratorPass {
    fake_y: Var,
    fake_x: Var,
    adv_g: Var,
    adv_f: Var,
    cyc: Var,
    idt: Var,
    total: Var,
}

#[derive(Clone, Debug)]
pub struct TranslationModel<T = f32> {
    pub config: TranslationConfig,
    pub g: Generator<T>,
    pub f: Generator<T>,
    pub dx: Discriminator<T>,
    pub dy: Discriminator<T>,
    pub epoch: usize,
}

impl<T: Scalar> TranslationModel<T> {
    pub fn new(config: &TranslationConfig, rng: &RandomSource) -> Result<Self> {
        config.validate()?;
        let (rb, nf) = (config.residual_blocks, config.base_filters);
        let layers = discriminator_layers(config.crop);
        Ok(Self {
            config: config.clone(),
            g: Generator::new(rb, nf, &mut rng.derive("init/G")),
            f: Generator::new(rb, nf, &mut rng.derive("init/F")),
            dx: Discriminator::new(layers, nf, &mut rng.derive("init/D_X")),
            dy: Discriminator::new(layers, nf, &mut rng.derive("init/D_Y")),
            epoch: 0,
        })
    }

    pub fn parameter_counts(&self) -> [usize; 4] {
        [
            self.g.params.num_scalars(),
            self.f.params.num_scalars(),
            self.dx.params.num_scalars(),
            self.dy.params.num_scalars(),
        ]
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_pass(
        &self,
        g: &mut Graph<T>,
        gen: [(&Generator<T>, &Bound); 2],
        disc: [(&Discriminator<T>, &Bound); 2],
        x: Var,
        y: Var,
    ) -> Result<GeneratorPass> {
        let [(gg, bg), (ff, bf)] = gen;
        let [(dx, bdx), (dy, bdy)] = disc;
        let lc = self.config.lambda_cycle;
        let li = self.config.identity_weight();
        let fake_y = gg.forward(g, bg, x)?;
        let rec_x = ff.forward(g, bf, fake_y)?;
        let fake_x = ff.forward(g, bf, y)?;
        let rec_y = gg.forward(g, bg, fake_x)?;
        let score_y = dy.forward(g, bdy, fake_y)?;
        let adv_g = g.mse_const(score_y, 1.0);
        let score_x = dx.forward(g, bdx, fake_x)?;
        let adv_f = g.mse_const(score_x, 1.0);
        let c1 = g.mean_abs_diff(rec_x, x)?;
        let c2 = g.mean_abs_diff(rec_y, y)?;
        let cyc = g.lincomb(&[(c1, lc), (c2, lc)]);
        let idt = if li > 0.0 {
            let gy = gg.forward(g, bg, y)?;
            let fx = ff.forward(g, bf, x)?;
            let i1 = g.mean_abs_diff(gy, y)?;
            let i2 = g.mean_abs_diff(fx, x)?;
            g.lincomb(&[(i1, li), (i2, li)])
        } else {
            g.lincomb(&[])
        };
        let total = g.lincomb(&[(adv_g, 1.0), (adv_f, 1.0), (cyc, 1.0), (idt, 1.0)]);
        Ok(GeneratorPass {
            fake_y,
            fake_x,
            adv_g,
            adv_f,
            cyc,
            idt,
            total,
        })
    }

    fn disc_loss(g: &mut Graph<T>, d: &Discriminator<T>, bound: &Bound, real: Var, fake: Var) -> Result<Var> {
        let sr = d.forward(g, bound, real)?;
        let lr = g.mse_const(sr, 1.0);
        let sf = d.forward(g, bound, fake)?;
        let lf = g.mse_const(sf, 0.0);
        Ok(g.lincomb(&[(lr, 0.5), (lf, 0.5)]))
    }

    /// Puts a `[0, 1]` batch on the graph as a constant on `[-1, 1]`.
    fn to_signed(g: &mut Graph<T>, t: &Tensor<T>) -> Var {
        let v = g.input(t.clone());
        g.affine(v, 2.0, -1.0)
    }

    fn check_batches(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        if x.shape() != y.shape() || x.shape()[1] != 3 {
            return Err(ModelError::Config(format!(
                "batch shapes differ or are not RGB: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// All loss terms on `[0, 1]` batches `x` (domain X) and `y` (domain Y),
    /// with the discriminators scoring the current fakes.
    pub fn loss_terms(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<LossTerms> {
        Self::check_batches(x, y)?;
        let mut g = Graph::new();
        let bg = self.g.params.bind(&mut g, false);
        let bf = self.f.params.bind(&mut g, false);
        let bdx = self.dx.params.bind(&mut g, false);
        let bdy = self.dy.params.bind(&mut g, false);
        let xv = Self::to_signed(&mut g, x);
        let yv = Self::to_signed(&mut g, y);
        let pass = self.generator_pass(&mut g, [(&self.g, &bg), (&self.f, &bf)], [(&self.dx, &bdx), (&self.dy, &bdy)], xv, yv)?;
        let ldx = Self::disc_loss(&mut g, &self.dx, &bdx, xv, pass.fake_x)?;
        let ldy = Self::disc_loss(&mut g, &self.dy, &bdy, yv, pass.fake_y)?;
        let (adv_dx, adv_dy) = (g.scalar(ldx).f64(), g.scalar(ldy).f64());
        Ok(LossTerms {
            adv_g: g.scalar(pass.adv_g).f64(),
            adv_f: g.scalar(pass.adv_f).f64(),
            adv_dx,
            adv_dy,
            cyc: g.scalar(pass.cyc).f64(),
            idt: g.scalar(pass.idt).f64(),
            total_g: g.scalar(pass.total).f64(),
            total_d: adv_dx + adv_dy,
        })
    }

    /// `total_G` with the generators replaced by the given parameters.
    pub fn generator_objective(&self, g_params: &ParamStore<T>, f_params: &ParamStore<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        Self::check_batches(x, y)?;
        let mut g = Graph::new();
        let bg = g_params.bind(&mut g, false);
        let bf = f_params.bind(&mut g, false);
        let bdx = self.dx.params.bind(&mut g, false);
        let bdy = self.dy.params.bind(&mut g, false);
        let xv = Self::to_signed(&mut g, x);
        let yv = Self::to_signed(&mut g, y);
        let pass = self.generator_pass(&mut g, [(&self.g, &bg), (&self.f, &bf)], [(&self.dx, &bdx), (&self.dy, &bdy)], xv, yv)?;
        Ok(g.scalar(pass.total).f64())
    }

    /// `adv_DX + adv_DY` with the discriminators replaced by the given
    /// parameters; inputs on `[-1, 1]`.
    pub fn discriminator_objective(
        &self,
        dx_params: &ParamStore<T>,
        dy_params: &ParamStore<T>,
        batches: [&Tensor<T>; 4],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let bdx = dx_params.bind(&mut g, false);
        let bdy = dy_params.bind(&mut g, false);
        let [xv, yv, fxv, fyv] = batches.map(|t| g.input(t.clone()));
        let ldx = Self::disc_loss(&mut g, &self.dx, &bdx, xv, fxv)?;
        let ldy = Self::disc_loss(&mut g, &self.dy, &bdy, yv, fyv)?;
        Ok(g.scalar(ldx).f64() + g.scalar(ldy).f64())
    }

    /// Analytic gradients of `total_G` for G and F (discriminators frozen).
    #[allow(clippy::type_complexity)]
    pub fn generator_gradients(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, LossTermsVars<T>)> {
        Self::check_batches(x, y)?;
        let mut g = Graph::new();
        let bg = self.g.params.bind(&mut g, true);
        let bf = self.f.params.bind(&mut g, true);
        let bdx = self.dx.params.bind(&mut g, false);
        let bdy = self.dy.params.bind(&mut g, false);
        let xv = Self::to_signed(&mut g, x);
        let yv = Self::to_signed(&mut g, y);
        let pass = self.generator_pass(&mut g, [(&self.g, &bg), (&self.f, &bf)], [(&self.dx, &bdx), (&self.dy, &bdy)], xv, yv)?;
        let total = g.scalar(pass.total).f64();
        let terms = [pass.adv_g, pass.adv_f, pass.cyc, pass.idt].map(|v| g.scalar(v).f64());
        let fakes = (g.value(pass.fake_y).clone(), g.value(pass.fake_x).clone());
        if total.is_finite() {
            g.backward(pass.total);
        }
        Ok((
            self.g.params.grads(&g, &bg),
            self.f.params.grads(&g, &bf),
            LossTermsVars {
                adv_g: terms[0],
                adv_f: terms[1],
                cyc: terms[2],
                idt: terms[3],
                total_g: total,
                fake_y: fakes.0,
                fake_x: fakes.1,
            },
        ))
    }

    /// Gradients of both discriminator losses given real batches and fakes,
    /// all on `[-1, 1]`. Also returns `adv_DX` and `adv_DY`.
    #[allow(clippy::type_complexity)]
    pub fn discriminator_gradients(&self, x: &Tensor<T>, y: &Tensor<T>, fake_x: &Tensor<T>, fake_y: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>, f64, f64)> {
        let mut g = Graph::new();
        let bdx = self.dx.params.bind(&mut g, true);
        let bdy = self.dy.params.bind(&mut g, true);
        let [xv, yv, fxv, fyv] = [x, y, fake_x, fake_y].map(|t| g.input(t.clone()));
        let ldx = Self::disc_loss(&mut g, &self.dx, &bdx, xv, fxv)?;
        let ldy = Self::disc_loss(&mut g, &self.dy, &bdy, yv, fyv)?;
        let total = g.lincomb(&[(ldx, 1.0), (ldy, 1.0)]);
        let (a, b) = (g.scalar(ldx).f64(), g.scalar(ldy).f64());
        if a.is_finite() && b.is_finite() {
            g.backward(total);
        }
        Ok((self.dx.params.grads(&g, &bdx), self.dy.params.grads(&g, &bdy), a, b))
    }
}

/// Generator-side values returned alongside gradients.
#[derive(Clone, Debug)]
pub struct LossTermsVars<T> {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub idt: f64,
    pub total_g: f64,
    /// On `[-1, 1]`.
    pub fake_y: Tensor<T>,
    pub fake_x: Tensor<T>,
}

impl TranslationModel<f32> {
    /// Applies G to a whole image. Sides that are not multiples of 4 are
    /// reflect-extended and the result cropped back.
    pub fn emulate(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.dims();
        if h < MIN_EMULATE_SIZE || w < MIN_EMULATE_SIZE {
            return Err(ModelError::TooSmall {
                height: h,
                width: w,
                min: MIN_EMULATE_SIZE,
            });
        }
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let padded = Image::from_fn(ph, pw, |c, y, x| img.get(c, mirror(y, h), mirror(x, w)));
        let mut g = Graph::new();
        let bg = self.g.params.bind(&mut g, false);
        let x = Self::to_signed(&mut g, &image_to_tensor(&padded));
        let out = self.g.forward(&mut g, &bg, x)?;
        let out = g.affine(out, 0.5, 0.5);
        let full = tensor_to_image(g.value(out), 0);
        Ok(full.crop(0, 0, h, w)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "translation",
            "config": self.config,
            "epoch": self.epoch,
        }));
        ck.tensors.extend(self.g.params.export("G"));
        ck.tensors.extend(self.f.params.export("F"));
        ck.tensors.extend(self.dx.params.export("D_X"));
        ck.tensors.extend(self.dy.params.export("D_Y"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "translation" {
            return Err(ModelError::Checkpoint(format!("expected a translation checkpoint, got {}", ck.meta["kind"])));
        }
        let config: TranslationConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(&config, &RandomSource::new(0, "checkpoint-shell"))?;
        m.g.params.import("G", &ck.tensors)?;
        m.f.params.import("F", &ck.tensors)?;
        m.dx.params.import("D_X", &ck.tensors)?;
        m.dy.params.import("D_Y", &ck.tensors)?;
        m.epoch = ck.meta["epoch"].as_u64().unwrap_or(0) as usize;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Buffer of earlier fakes shown to the discriminators (reference
/// semantics: fill up, then with probability ½ swap in the new image and
/// return a stored one).
pub struct ImagePool<T> {
    size: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Scalar> ImagePool<T> {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            images: Vec::with_capacity(size),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn query(&mut self, batch: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        if self.size == 0 {
            return batch.clone();
        }
        let out: Vec<Tensor<T>> = (0..batch.n())
            .map(|i| {
                let img = batch.select(i);
                if self.images.len() < self.size {
                    self.images.push(img.clone());
                    img
                } else if rng.random::<f64>() > 0.5 {
                    let j = rng.random_range(0..self.size);
                    std::mem::replace(&mut self.images[j], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::stack(&out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `epoch_<n>.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many epochs (the final epoch is always saved when a
    /// directory is given).
    pub checkpoint_every: usize,
    /// Per-epoch loss CSV, rewritten after every epoch.
    pub log_path: Option<PathBuf>,
    /// Overrides the epoch length of `max(|X|, |Y|) / batch` steps.
    pub steps_per_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossTerms,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: TranslationModel<f32>,
    pub epoch_log: Vec<EpochRow>,
    pub step_log: Vec<LossTerms>,
}

pub const LOG_COLUMNS: [&str; 10] = [
    "epoch", "adv_G", "adv_F", "adv_DX", "adv_DY", "cyc", "idt", "total_G", "total_D", "lr",
];

pub fn write_epoch_log(rows: &[EpochRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ModelError::io(path, e.into()))?;
    let err = |e: csv::Error| ModelError::io(path, e.into());
    w.write_record(LOG_COLUMNS).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(r.losses.values().iter().map(|v| format!("{v:.8e}")));
        rec.push(format!("{:.8e}", r.lr));
        w.write_record(rec).map_err(err)?;
    }
    w.flush().map_err(|e| ModelError::io(path, e))
}

fn sample_crops(imgs: &[Image], idx: &[usize], crop: usize, flip: bool, rng: &mut RandomSource) -> Result<Vec<Image>> {
    idx.iter()
        .map(|&i| {
            let img = &imgs[i];
            let (t, l) = crop_offset(img.dims(), crop, rng);
            let c = img.crop(t, l, crop, crop)?;
            Ok(if flip && rng.random::<bool>() { c.flip_horizontal() } else { c })
        })
        .collect()
}

fn signed(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

/// Trains G, F, D_X, D_Y on unpaired crops of `source` (domain X) and
/// `target` (domain Y). One update stream; deterministic for a given `rng`.
pub fn train(
    cfg: &TranslationConfig,
    source: &[Image],
    target: &[Image],
    rng: &RandomSource,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(ModelError::Config("both image sets must be nonempty".into()));
    }
    let cap = |s: &[Image]| cfg.max_images.map_or(s.len(), |m| m.min(s.len()));
    let (source, target) = (&source[..cap(source)], &target[..cap(target)]);
    if let Some(img) = source.iter().chain(target).find(|i| i.height() < cfg.crop || i.width() < cfg.crop) {
        return Err(ModelError::Config(format!(
            "image {}x{} smaller than crop {}",
            img.height(),
            img.width(),
            cfg.crop
        )));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    }
    let mut model = TranslationModel::<f32>::new(cfg, rng)?;
    let mut opt_g = Adam::new(&model.g.params, ADAM_BETA1, ADAM_BETA2);
    let mut opt_f = Adam::new(&model.f.params, ADAM_BETA1, ADAM_BETA2);
    let mut opt_dx = Adam::new(&model.dx.params, ADAM_BETA1, ADAM_BETA2);
    let mut opt_dy = Adam::new(&model.dy.params, ADAM_BETA1, ADAM_BETA2);
    let mut data_rng = rng.derive("data");
    let mut pool_rng = rng.derive("pool");
    let mut pool_x = ImagePool::new(cfg.pool_size);
    let mut pool_y = ImagePool::new(cfg.pool_size);
    let bs = cfg.batch_size;
    let steps = opts
        .steps_per_epoch
        .unwrap_or_else(|| source.len().max(target.len()).div_ceil(bs))
        .max(1);
    let mut epoch_log = Vec::with_capacity(cfg.epochs());
    let mut step_log = Vec::with_capacity(cfg.epochs() * steps);
    let mut last_checkpoint: Option<PathBuf> = None;
    for epoch in 0..cfg.epochs() {
        let lr = lr_schedule(cfg, epoch)?;
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut data_rng);
        let mut rows = Vec::with_capacity(steps);
        for step in 0..steps {
            let xi: Vec<usize> = (0..bs).map(|j| order[(step * bs + j) % order.len()]).collect();
            let yi: Vec<usize> = (0..bs).map(|_| data_rng.random_range(0..target.len())).collect();
            let xs = batch_to_tensor::<f32>(&sample_crops(source, &xi, cfg.crop, cfg.flip, &mut data_rng)?);
            let ys = batch_to_tensor::<f32>(&sample_crops(target, &yi, cfg.crop, cfg.flip, &mut data_rng)?);

            let (grad_g, grad_f, gen) = model.generator_gradients(&xs, &ys)?;
            let diverged = |what: &str| ModelError::Diverged {
                at: format!("epoch {epoch}, step {step} ({what})"),
                last_checkpoint: last_checkpoint.clone(),
            };
            if !gen.total_g.is_finite() {
                return Err(diverged("generator loss"));
            }
            opt_g.step(&mut model.g.params, &grad_g, lr);
            opt_f.step(&mut model.f.params, &grad_f, lr);

            let fake_y = pool_y.query(&gen.fake_y, &mut pool_rng);
            let fake_x = pool_x.query(&gen.fake_x, &mut pool_rng);
            let (grad_dx, grad_dy, adv_dx, adv_dy) =
                model.discriminator_gradients(&signed(xs), &signed(ys), &fake_x, &fake_y)?;
            if !(adv_dx.is_finite() && adv_dy.is_finite()) {
                return Err(diverged("discriminator loss"));
            }
            opt_dx.step(&mut model.dx.params, &grad_dx, lr);
            opt_dy.step(&mut model.dy.params, &grad_dy, lr);
            rows.push(LossTerms {
                adv_g: gen.adv_g,
                adv_f: gen.adv_f,
                adv_dx,
                adv_dy,
                cyc: gen.cyc,
                idt: gen.idt,
                total_g: gen.total_g,
                total_d: adv_dx + adv_dy,
            });
        }
        model.epoch = epoch + 1;
        let mean = LossTerms::mean(&rows);
        log::info!(
            "translation epoch {}/{}: total_G {:.4} total_D {:.4} cyc {:.4} lr {:.2e}",
            epoch + 1,
            cfg.epochs(),
            mean.total_g,
            mean.total_d,
            mean.cyc,
            lr
        );
        step_log.extend(rows);
        epoch_log.push(EpochRow {
            epoch: epoch + 1,
            losses: mean,
            lr,
        });
        if let Some(path) = &opts.log_path {
            write_epoch_log(&epoch_log, path)?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let due = opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0;
            if due || epoch + 1 == cfg.epochs() {
                let path = dir.join(format!("epoch_{}.ckpt", epoch + 1));
                model.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_log,
        step_log,
    })
}
