//! Finite-difference checks of the CycleGAN gradients on a micro model
//! (1 residual block, 8 filters, 16×16 input) and of the segmenter on a
//! two-conv micro model, in double precision. Shared by the models tests
//! and the acceptance run.
//!
//! The oracle rebuilds each objective from the public layer API. Terms that
//! do not depend on the parameters under test are left out since they cancel
//! in a central difference; the generator differences are taken per output
//! element before reduction to keep roundoff below the tolerance.
#![allow(dead_code)]

use distadapt_core::imagecore::{Image, RandomSource};
use distadapt_core::scenes::{InstanceAnnotation, Mask, Sample};
use distadapt_models::segmentation::{SegArch, SegConfig, SegModel, Targets};
use distadapt_models::translation::{Discriminator, Generator, TranslationConfig, TranslationModel};
use distadapt_nn::gradcheck::{check, rel_err, GradCheckReport};
use distadapt_nn::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

/// Larger steps cross ReLU and L1 kinks.
pub const GEN_STEP: f64 = 1e-6;
/// Discriminators see near-constant fakes; instance norm is strongly curved there.
pub const DISC_STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-10;
pub const SEG_STEP: f64 = 1e-6;

pub fn micro_config() -> TranslationConfig {
    TranslationConfig {
        crop: 16,
        residual_blocks: 1,
        base_filters: 8,
        ..TranslationConfig::toy()
    }
}

pub fn batch(rng: &mut RandomSource) -> Tensor<f64> {
    Tensor::from_vec([1, 3, 16, 16], (0..768).map(|_| rng.random::<f64>()).collect())
}

pub fn signed(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| 2.0 * v - 1.0)
}

pub fn run_gen(net: &Generator<f64>, p: &ParamStore<f64>, g: &mut Graph<f64>, x: Var) -> Var {
    let b = p.bind(g, false);
    net.forward(g, &b, x).unwrap()
}

pub fn run_disc(net: &Discriminator<f64>, p: &ParamStore<f64>, g: &mut Graph<f64>, x: Var) -> Var {
    let b = p.bind(g, false);
    net.forward(g, &b, x).unwrap()
}

pub fn apply(net: &Generator<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = run_gen(net, &net.params, &mut g, xv);
    g.value(out).clone()
}

/// Stage of a generator parameter: stem 0, downsampling 1 and 2, residual
/// blocks from 3, then the two upsampling convs and the output layer.
fn stage_of(name: &str, blocks: usize) -> usize {
    match name {
        "stem.w" => 0,
        "down1.w" => 1,
        "down2.w" => 2,
        "up1.w" => 3 + blocks,
        "up2.w" => 4 + blocks,
        "out.w" | "out.b" | "skip.w" => 5 + blocks,
        n => {
            let block = n.strip_prefix("res").and_then(|r| r.split('.').next()).and_then(|i| i.parse::<usize>().ok());
            3 + block.unwrap_or_else(|| panic!("unknown generator parameter {n}"))
        }
    }
}

fn norm_relu(g: &mut Graph<f64>, h: Var) -> Var {
    let n = g.instance_norm(h);
    g.relu(n)
}

/// Generator stages `from..until` rebuilt from graph ops. `h` enters stage
/// `from`; `x` is the generator input, read again by the output skip.
fn run_stages(p: &ParamStore<f64>, blocks: usize, g: &mut Graph<f64>, x: Var, mut h: Var, from: usize, until: usize) -> Var {
    let w = |g: &mut Graph<f64>, name: &str| {
        let (_, t) = p.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("missing {name}"));
        g.input(t.clone())
    };
    for s in from..until {
        h = match s {
            0 => {
                let t = g.reflect_pad(h, 3).unwrap();
                let k = w(g, "stem.w");
                let c = g.conv2d(t, k, None, 1, 0).unwrap();
                norm_relu(g, c)
            }
            1 | 2 => {
                let k = w(g, &format!("down{s}.w"));
                let c = g.conv2d(h, k, None, 2, 1).unwrap();
                norm_relu(g, c)
            }
            s if s < 3 + blocks => {
                let i = s - 3;
                let t = g.reflect_pad(h, 1).unwrap();
                let k = w(g, &format!("res{i}.conv1.w"));
                let c = g.conv2d(t, k, None, 1, 0).unwrap();
                let r = norm_relu(g, c);
                let t = g.reflect_pad(r, 1).unwrap();
                let k = w(g, &format!("res{i}.conv2.w"));
                let c = g.conv2d(t, k, None, 1, 0).unwrap();
                let r = g.instance_norm(c);
                g.add(h, r).unwrap()
            }
            s if s < 5 + blocks => {
                let k = w(g, &format!("up{}.w", s - 2 - blocks));
                let c = g.conv_transpose2d(h, k, None, 2, 1, 1).unwrap();
                norm_relu(g, c)
            }
            _ => {
                let t = g.reflect_pad(h, 3).unwrap();
                let (k, b) = (w(g, "out.w"), w(g, "out.b"));
                let c = g.conv2d(t, k, Some(b), 1, 0).unwrap();
                let k = w(g, "skip.w");
                let skip = g.conv2d(x, k, None, 1, 0).unwrap();
                let sum = g.add(c, skip).unwrap();
                g.tanh(sum)
            }
        };
    }
    h
}

/// All generator stages through the oracle's rebuild.
pub fn apply_staged(net: &Generator<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = run_stages(&net.params, net.residual_blocks, &mut g, xv, xv, 0, 6 + net.residual_blocks);
    g.value(out).clone()
}

/// Inputs of the G-dependent part of total_G, on `[-1, 1]`. With `swap`
/// the roles become F, y, x, D_X.
pub struct Own<'a> {
    model: &'a TranslationModel<f64>,
    swap: bool,
    x: Tensor<f64>,
    y: Tensor<f64>,
    other_y: Tensor<f64>,
}

/// Network outputs entering the G-dependent terms
/// `mse(D_Y(G x), 1) + λc(|F G x − x| + |G F y − y|) + λi|G y − y|`.
pub struct Outputs {
    score: Tensor<f64>,
    fgx: Tensor<f64>,
    gfy: Tensor<f64>,
    gy: Tensor<f64>,
}

impl<'a> Own<'a> {
    pub fn new(model: &'a TranslationModel<f64>, x: &Tensor<f64>, y: &Tensor<f64>, swap: bool) -> Self {
        let (x, y) = if swap { (signed(y), signed(x)) } else { (signed(x), signed(y)) };
        let other = if swap { &model.g } else { &model.f };
        let other_y = apply(other, &y);
        Self { model, swap, x, y, other_y }
    }

    fn nets(&self) -> (&Generator<f64>, &Generator<f64>, &Discriminator<f64>) {
        let m = self.model;
        if self.swap { (&m.f, &m.g, &m.dx) } else { (&m.g, &m.f, &m.dy) }
    }

    /// Activations entering `stage` for the inputs x, F(y), y; they do not
    /// depend on parameters of that stage or later ones.
    fn prefixes(&self, stage: usize) -> [Tensor<f64>; 3] {
        let (me, _, _) = self.nets();
        [&self.x, &self.other_y, &self.y].map(|t| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let h = run_stages(&me.params, me.residual_blocks, &mut g, v, v, 0, stage);
            g.value(h).clone()
        })
    }

    /// Network outputs with the generator under test re-run from `stage`
    /// on the cached `prefixes`.
    fn outputs_from(&self, p: &ParamStore<f64>, stage: usize, prefixes: &[Tensor<f64>; 3]) -> Outputs {
        let (me, other, d) = self.nets();
        let blocks = me.residual_blocks;
        let end = 6 + blocks;
        let mut g = Graph::new();
        let [xv, oy, yv] = [&self.x, &self.other_y, &self.y].map(|t| g.input(t.clone()));
        let [hx, ho, hy] = prefixes.clone().map(|t| g.input(t));
        let gx = run_stages(p, blocks, &mut g, xv, hx, stage, end);
        let score = run_disc(d, &d.params, &mut g, gx);
        let fgx = run_gen(other, &other.params, &mut g, gx);
        let gfy = run_stages(p, blocks, &mut g, oy, ho, stage, end);
        let gy = run_stages(p, blocks, &mut g, yv, hy, stage, end);
        let v = |t| g.value(t).clone();
        Outputs { score: v(score), fgx: v(fgx), gfy: v(gfy), gy: v(gy) }
    }

    fn outputs(&self, p: &ParamStore<f64>) -> Outputs {
        self.outputs_from(p, 0, &self.prefixes(0))
    }

    pub fn eval(&self, p: &ParamStore<f64>) -> f64 {
        let (lc, li) = (self.model.config.lambda_cycle, self.model.config.identity_weight());
        let o = self.outputs(p);
        let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| it.sum::<f64>() / n as f64;
        let l1 = |a: &Tensor<f64>, t: &Tensor<f64>| mean(&mut a.data().iter().zip(t.data()).map(|(u, v)| (u - v).abs()), a.numel());
        mean(&mut o.score.data().iter().map(|s| (s - 1.0).powi(2)), o.score.numel())
            + lc * (l1(&o.fgx, &self.x) + l1(&o.gfy, &self.y))
            + li * l1(&o.gy, &self.y)
    }

    /// `eval(plus) − eval(minus)`, differenced per element before reducing.
    fn difference(&self, plus: &Outputs, minus: &Outputs) -> f64 {
        let (lc, li) = (self.model.config.lambda_cycle, self.model.config.identity_weight());
        let sq: f64 = plus.score.data().iter().zip(minus.score.data())
            .map(|(a, b)| (a - b) * (a + b - 2.0))
            .sum::<f64>() / plus.score.numel() as f64;
        let l1 = |a: &Tensor<f64>, b: &Tensor<f64>, t: &Tensor<f64>| {
            a.data().iter().zip(b.data()).zip(t.data())
                .map(|((a, b), t)| (a - t).abs() - (b - t).abs())
                .sum::<f64>() / a.numel() as f64
        };
        sq + lc * (l1(&plus.fgx, &minus.fgx, &self.x) + l1(&plus.gfy, &minus.gfy, &self.y))
            + li * l1(&plus.gy, &minus.gy, &self.y)
    }

    /// Central differences for every element of every parameter tensor.
    /// Stages ahead of the perturbed tensor are evaluated once.
    pub fn check(&self, params: &ParamStore<f64>, analytic: &[Tensor<f64>]) -> GradCheckReport {
        let mut p = params.clone();
        let mut rep = GradCheckReport::default();
        let blocks = self.nets().0.residual_blocks;
        for id in params.ids() {
            let stage = stage_of(params.name(id), blocks);
            let prefixes = self.prefixes(stage);
            for k in 0..p.get(id).numel() {
                let orig = p.get(id).data()[k];
                p.get_mut(id).data_mut()[k] = orig + GEN_STEP;
                let plus = self.outputs_from(&p, stage, &prefixes);
                p.get_mut(id).data_mut()[k] = orig - GEN_STEP;
                let minus = self.outputs_from(&p, stage, &prefixes);
                p.get_mut(id).data_mut()[k] = orig;
                let numeric = self.difference(&plus, &minus) / (2.0 * GEN_STEP);
                let a = analytic[id.0].data()[k];
                let e = rel_err(a, numeric, FLOOR);
                rep.checked += 1;
                rep.max_rel_err = rep.max_rel_err.max(e);
                if e > TOL {
                    rep.failures.push((p.name(id).to_string(), k, a, numeric));
                }
            }
        }
        rep
    }
}

pub fn assert_report(what: &str, rep: &GradCheckReport, expected: usize) {
    eprintln!("{what}: {} elements, max relative error {:.2e}", rep.checked, rep.max_rel_err);
    assert_eq!(rep.checked, expected, "{what}: every parameter is checked");
    assert!(rep.passed(), "{what}: {:?}", &rep.failures[..rep.failures.len().min(5)]);
}

/// Redraws the input skip of a generator. At its identity initialization
/// G(y) ≈ y, which puts many L1 residuals on their kinks.
fn generic_skip(gen: &mut Generator<f64>, rng: &mut RandomSource) {
    let id = gen.params.ids().find(|&id| gen.params.name(id) == "skip.w").expect("skip weights");
    for v in gen.params.get_mut(id).data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
}

pub fn setup() -> (TranslationModel<f64>, Tensor<f64>, Tensor<f64>) {
    let rng = RandomSource::new(11, "grad");
    let mut model = TranslationModel::<f64>::new(&micro_config(), &rng).unwrap();
    let mut skip = rng.derive("skip");
    generic_skip(&mut model.g, &mut skip);
    generic_skip(&mut model.f, &mut skip);
    let mut data = rng.derive("data");
    let (x, y) = (batch(&mut data), batch(&mut data));
    (model, x, y)
}

/// Checks G (or F with `swap`) on the shared micro setup.
pub fn generator_report(swap: bool) -> (GradCheckReport, usize) {
    let (model, x, y) = setup();
    let (gg, gf, _) = model.generator_gradients(&x, &y).unwrap();
    let (params, grads) = if swap { (&model.f.params, &gf) } else { (&model.g.params, &gg) };
    (Own::new(&model, &x, &y, swap).check(params, grads), params.num_scalars())
}

/// Checks D_X and D_Y on the plain discriminator objective.
pub fn discriminator_reports() -> [(GradCheckReport, usize); 2] {
    let (model, x, y) = setup();
    let fake_y = apply(&model.g, &signed(&x));
    let fake_x = apply(&model.f, &signed(&y));
    let (sx, sy) = (signed(&x), signed(&y));
    let (gdx, gdy, _, _) = model.discriminator_gradients(&sx, &sy, &fake_x, &fake_y).unwrap();
    let batches = [&sx, &sy, &fake_x, &fake_y];
    let mut p = model.dx.params.clone();
    let ids: Vec<ParamId> = p.ids().collect();
    let rx = check(&mut p, &gdx, &ids, DISC_STEP, TOL, FLOOR, |s| {
        model.discriminator_objective(s, &model.dy.params, batches).unwrap()
    });
    let mut p = model.dy.params.clone();
    let ry = check(&mut p, &gdy, &ids, DISC_STEP, TOL, FLOOR, |s| {
        model.discriminator_objective(&model.dx.params, s, batches).unwrap()
    });
    [(rx, model.dx.params.num_scalars()), (ry, model.dy.params.num_scalars())]
}

fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

/// Segmenter at depth 0 (one 3×3 conv with instance norm, then the 1×1
/// class and offset heads) on a 16×16 image with two instances.
pub fn segmentation_report() -> (GradCheckReport, usize) {
    let cfg = SegConfig {
        classes: 2,
        arch: SegArch {
            base_filters: 6,
            depth: 0,
        },
        ..SegConfig::toy()
    };
    let rng = RandomSource::new(3, "gradcheck");
    let mut model = SegModel::<f64>::new(&cfg, &rng).unwrap();
    let mut draw = rng.derive("input");
    let image = Image::from_planar(16, 16, (0..768).map(|_| draw.random::<f64>()).collect()).unwrap();
    let annotation = |class_id, instance_id, mask| InstanceAnnotation { class_id, instance_id, mask };
    let sample = Sample {
        id: "g".into(),
        image: image.clone(),
        annotations: vec![
            annotation(0, 1, disc_mask(16, 16, 4.3, 5.1, 3.2)),
            annotation(1, 2, disc_mask(16, 16, 11.0, 10.6, 3.6)),
        ],
    };
    let targets = vec![Targets::from_sample(&sample, false)];
    let x = Tensor::from_vec([1, 3, 16, 16], image.data().to_vec());
    let (_, analytic) = model.loss_and_grads(&x, &targets).unwrap();
    let ids: Vec<_> = model.net.params.ids().collect();
    let net = model.net.clone();
    let report = check(&mut model.net.params, &analytic, &ids, SEG_STEP, TOL, FLOOR, |p| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let shell = SegModel {
            config: cfg.clone(),
            net: net.clone(),
            iteration: 0,
        };
        let l = shell.loss(&mut g, &bound, &x, &targets).unwrap();
        g.scalar(l)
    });
    (report, model.net.params.num_scalars())
}
