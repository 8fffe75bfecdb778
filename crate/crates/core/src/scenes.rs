//! Labeled data: synthetic shape scenes, corruption into the target domain,
//! on-disk splits and Cityscapes-format ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distortions::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::imagecore::{psnr, Image, RandomSource, CHANNELS};
use crate::par::parallel_map;

/// Binary raster. Serialized as run-length encoding (see [`Rle`]).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Rle", into = "Rle")]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Row-major run lengths alternating background/foreground, starting with a
/// (possibly empty) background run. `total` must equal `height * width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
    pub total: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "masks {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            height: self.height,
            width: self.width,
            counts,
            total: self.bits.len(),
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let n = rle.height * rle.width;
        let sum: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
        if rle.total != n || sum != n as u64 {
            return Err(Error::InvalidArgument(format!(
                "RLE checksum mismatch: {}x{} = {n}, total {}, runs sum to {sum}",
                rle.height, rle.width, rle.total
            )));
        }
        let mut bits = Vec::with_capacity(n);
        for (i, &c) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Self {
            height: rle.height,
            width: rle.width,
            bits,
        })
    }
}

impl TryFrom<Rle> for Mask {
    type Error = Error;
    fn try_from(rle: Rle) -> Result<Self> {
        Mask::from_rle(&rle)
    }
}

impl From<Mask> for Rle {
    fn from(m: Mask) -> Self {
        m.to_rle()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub class_id: u32,
    pub instance_id: u32,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<InstanceAnnotation>,
}

impl Sample {
    /// Checks mask dimensions, non-emptiness, id uniqueness and disjointness.
    pub fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        let mut ids = BTreeSet::new();
        let mut cover = vec![false; dims.0 * dims.1];
        for a in &self.annotations {
            if a.mask.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "{}: mask {:?} vs image {:?}",
                    self.id,
                    a.mask.dims(),
                    dims
                )));
            }
            if a.instance_id == 0 || !ids.insert(a.instance_id) {
                return Err(Error::InvalidArgument(format!(
                    "{}: instance id {} is zero or repeated",
                    self.id, a.instance_id
                )));
            }
            if a.mask.area() == 0 {
                return Err(Error::InvalidArgument(format!("{}: empty mask", self.id)));
            }
            for (c, &b) in cover.iter_mut().zip(a.mask.bits()) {
                if b && *c {
                    return Err(Error::InvalidArgument(format!("{}: overlapping masks", self.id)));
                }
                *c |= b;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "source-X")]
    SourceX,
    #[serde(rename = "target-Y")]
    TargetY,
}

/// PSNR value that serializes infinity as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decibels(pub f64);

impl Serialize for Decibels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Decibels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Decibels(v)),
            Raw::Str(s) if s == "inf" => Ok(Decibels(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: Role,
    pub domain: Domain,
    pub samples: Vec<Sample>,
    pub provenance: Option<DistortionSpec>,
    pub seed: Option<u64>,
    /// Per-sample PSNR against the pristine original, filled by corruption.
    pub psnr: BTreeMap<String, f64>,
}

impl DatasetSplit {
    pub fn new(role: Role, domain: Domain, samples: Vec<Sample>) -> Self {
        Self {
            role,
            domain,
            samples,
            provenance: None,
            seed: None,
            psnr: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Mean of the recorded per-sample PSNR values, if any were recorded.
    pub fn mean_psnr(&self) -> Option<f64> {
        if self.psnr.is_empty() {
            return None;
        }
        Some(self.psnr.values().sum::<f64>() / self.psnr.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain == Domain::TargetY && self.provenance.is_none() {
            return Err(Error::InvalidArgument("target-Y split without provenance".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- generation

/// Number of distinct shape families available as classes.
pub const SHAPE_FAMILIES: usize = 8;
pub const SHAPE_NAMES: [&str; SHAPE_FAMILIES] = [
    "disc", "rectangle", "triangle", "ring", "ellipse", "diamond", "cross", "half_disc",
];
const MIN_INSTANCES: usize = 2;
const MAX_INSTANCES: usize = 8;
const MIN_VISIBLE_FRACTION: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 60;

struct Shape {
    family: usize,
    cy: f64,
    cx: f64,
    r: f64,
    cos: f64,
    sin: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.r;
        let v = (-dx * self.sin + dy * self.cos) / self.r;
        let d2 = u * u + v * v;
        match self.family {
            0 => d2 <= 1.0,
            1 => u.abs() <= 1.0 && v.abs() <= 0.6,
            2 => {
                // equilateral triangle inscribed in the unit circle
                let s3 = 3f64.sqrt();
                v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0
            }
            3 => (0.3..=1.0).contains(&d2),
            4 => u * u + 4.0 * v * v <= 1.0,
            5 => u.abs() + v.abs() <= 1.0,
            6 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            _ => d2 <= 1.0 && v >= 0.0,
        }
    }

    fn raster(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

fn generate_sample(id: String, classes: usize, size: usize, rng: &mut RandomSource) -> Sample {
    let s = size as f64;
    loop {
        let target = rng.random_range(MIN_INSTANCES..=MAX_INSTANCES);
        let mut placed: Vec<(u32, Mask, usize)> = Vec::new(); // class, visible mask, full area
        for _ in 0..target {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let shape = Shape {
                    family: rng.random_range(0..classes),
                    cy: rng.random_range(0.1 * s..0.9 * s),
                    cx: rng.random_range(0.1 * s..0.9 * s),
                    r: rng.random_range(0.09 * s..0.2 * s),
                    cos: theta.cos(),
                    sin: theta.sin(),
                };
                let m = shape.raster(size);
                let area = m.area();
                if area < 30 {
                    continue;
                }
                let ok = placed.iter().all(|(_, vis, full)| {
                    let remaining = vis.area() - vis.intersection(&m).expect("same dims");
                    remaining as f64 >= MIN_VISIBLE_FRACTION * *full as f64
                });
                if ok {
                    for (_, vis, _) in placed.iter_mut() {
                        for (b, &o) in vis.bits.iter_mut().zip(&m.bits) {
                            *b &= !o;
                        }
                    }
                    placed.push((shape.family as u32, m, area));
                    break;
                }
            }
        }
        if placed.len() < MIN_INSTANCES {
            continue;
        }
        let image = paint(&placed, classes, size, rng);
        let annotations = placed
            .into_iter()
            .enumerate()
            .map(|(i, (class_id, mask, _))| InstanceAnnotation {
                class_id,
                instance_id: i as u32 + 1,
                mask,
            })
            .collect();
        return Sample { id, image, annotations };
    }
}

/// Textured background plus per-instance flat colour modulated by stripes
/// whose orientation depends on the class.
fn paint(placed: &[(u32, Mask, usize)], classes: usize, size: usize, rng: &mut RandomSource) -> Image {
    let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let (fy, fx, ph) = (
        rng.random_range(0.02..0.12),
        rng.random_range(0.02..0.12),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut data = vec![0.0; CHANNELS * size * size];
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let wave = 0.08 * ((fy * y as f64 + fx * x as f64) * std::f64::consts::TAU + ph + c as f64).sin();
                data[(c * size + y) * size + x] = base[c] + wave;
            }
        }
    }
    for (class, mask, _) in placed {
        let dir: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        let contrast = rng.random_range(0.15..0.35);
        let colour: [f64; CHANNELS] = std::array::from_fn(|c| (base[c] + contrast * dir[c] / norm).clamp(0.05, 0.95));
        let angle = *class as f64 * std::f64::consts::PI / classes as f64;
        let period = rng.random_range(4.0..6.0);
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..size {
            for x in 0..size {
                if !mask.get(y, x) {
                    continue;
                }
                let t = (x as f64 * ca + y as f64 * sa) / period;
                let stripe = 0.08 * (t * std::f64::consts::TAU).sin();
                for c in 0..CHANNELS {
                    data[(c * size + y) * size + x] = colour[c] + stripe;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v += 0.02 * (rng.random::<f64>() - 0.5) * 2.0;
    }
    Image::from_planar(size, size, data).expect("square raster").quantized()
}

/// `count` scenes of `img_size²` pixels with ids `<role>_<index>`. Each
/// sample is a function of (seed, role, index) only.
pub fn generate_split(
    role: Role,
    count: usize,
    classes: usize,
    img_size: usize,
    rng: &RandomSource,
    workers: usize,
) -> Result<DatasetSplit> {
    if count == 0 || !(2..=SHAPE_FAMILIES).contains(&classes) || img_size < 64 {
        return Err(Error::InvalidArgument(format!(
            "generate needs count >= 1, classes in [2, {SHAPE_FAMILIES}], img_size >= 64; got {count}, {classes}, {img_size}"
        )));
    }
    let ids: Vec<String> = (0..count).map(|i| format!("{role}_{i:05}")).collect();
    let samples = parallel_map(&ids, workers, |id| {
        generate_sample(id.clone(), classes, img_size, &mut rng.derive(id))
    });
    let mut split = DatasetSplit::new(role, Domain::SourceX, samples);
    split.seed = Some(rng.seed());
    Ok(split)
}

/// Training-role scenes, single-threaded.
pub fn generate_scenes(count: usize, classes: usize, img_size: usize, rng: &RandomSource) -> Result<DatasetSplit> {
    generate_split(Role::Train, count, classes, img_size, rng, 1)
}

// ---------------------------------------------------------------- corruption

/// Passes every image through `spec` with a per-sample stream; annotations
/// and ids are copied, per-sample PSNR is recorded.
pub fn corrupt_split(split: &DatasetSplit, spec: &DistortionSpec, rng: &RandomSource, workers: usize) -> Result<DatasetSplit> {
    if split.domain != Domain::SourceX {
        return Err(Error::InvalidArgument("corrupt_split expects a source-X split".into()));
    }
    spec.validate()?;
    let results = parallel_map(&split.samples, workers, |s| -> Result<(Sample, f64)> {
        let out = distortions::apply(spec, &s.image, &mut rng.derive(&s.id))?;
        let p = psnr(&s.image, &out)?;
        Ok((
            Sample {
                id: s.id.clone(),
                image: out,
                annotations: s.annotations.clone(),
            },
            p,
        ))
    });
    let mut samples = Vec::with_capacity(results.len());
    let mut psnrs = BTreeMap::new();
    for r in results {
        let (s, p) = r?;
        psnrs.insert(s.id.clone(), p);
        samples.push(s);
    }
    Ok(DatasetSplit {
        role: split.role,
        domain: Domain::TargetY,
        samples,
        provenance: Some(*spec),
        seed: Some(rng.seed()),
        psnr: psnrs,
    })
}

// ---------------------------------------------------------------- disk format

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub role: Role,
    pub domain: Domain,
    #[serde(default)]
    pub provenance: Option<DistortionSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub ids: Vec<String>,
    #[serde(default)]
    pub psnr: BTreeMap<String, Decibels>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    id: String,
    height: usize,
    width: usize,
    instances: Vec<InstanceAnnotation>,
}

pub fn split_dir(root: &Path, role: Role) -> PathBuf {
    root.join(role.name())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `<root>/<role>/{images,annotations}/<id>.{png,json}` and
/// `<root>/<role>/manifest.json`.
pub fn save_split(split: &DatasetSplit, root: &Path) -> Result<SplitManifest> {
    let dir = split_dir(root, split.role);
    for sub in ["images", "annotations"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &split.samples {
        s.image.save_png(dir.join("images").join(format!("{}.png", s.id)))?;
        let (height, width) = s.image.dims();
        write_json(
            &dir.join("annotations").join(format!("{}.json", s.id)),
            &AnnotationFile {
                id: s.id.clone(),
                height,
                width,
                instances: s.annotations.clone(),
            },
        )?;
    }
    let manifest = SplitManifest {
        role: split.role,
        domain: split.domain,
        provenance: split.provenance,
        seed: split.seed,
        ids: split.ids().map(str::to_owned).collect(),
        psnr: split.psnr.iter().map(|(k, &v)| (k.clone(), Decibels(v))).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path, role: Role) -> Result<SplitManifest> {
    read_json(&split_dir(root, role).join("manifest.json"))
}

/// Loads images only; annotations are left empty. Used where labels must not
/// be read.
pub fn load_split_images(root: &Path, role: Role) -> Result<DatasetSplit> {
    load_inner(root, role, false)
}

pub fn load_split(root: &Path, role: Role) -> Result<DatasetSplit> {
    load_inner(root, role, true)
}

fn load_inner(root: &Path, role: Role, with_labels: bool) -> Result<DatasetSplit> {
    let dir = split_dir(root, role);
    let m = load_manifest(root, role)?;
    let mut samples = Vec::with_capacity(m.ids.len());
    for id in &m.ids {
        let image = Image::load_png(dir.join("images").join(format!("{id}.png")))?;
        let annotations = if with_labels {
            let path = dir.join("annotations").join(format!("{id}.json"));
            let a: AnnotationFile = read_json(&path)?;
            if a.id != *id || (a.height, a.width) != image.dims() {
                return Err(Error::Format {
                    path,
                    reason: "annotation does not match its image".into(),
                });
            }
            a.instances
        } else {
            Vec::new()
        };
        samples.push(Sample {
            id: id.clone(),
            image,
            annotations,
        });
    }
    Ok(DatasetSplit {
        role: m.role,
        domain: m.domain,
        samples,
        provenance: m.provenance,
        seed: m.seed,
        psnr: m.psnr.into_iter().map(|(k, v)| (k, v.0)).collect(),
    })
}

// ---------------------------------------------------------------- Cityscapes

/// Maps raw Cityscapes class ids to contiguous ids; unmapped classes are
/// ignored. JSON form: `{"26": 0, "24": 1}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping(pub BTreeMap<u32, u32>);

impl ClassMapping {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
const LABEL_SUFFIX: &str = "_gtFine_instanceIds.png";

/// Reads `<root>/leftImg8bit/**/<stem>_leftImg8bit.png` with labels at
/// `<root>/gtFine/<same dirs>/<stem>_gtFine_instanceIds.png`. Label values
/// `class * 1000 + k` are instances; values below 1000 carry no instance.
pub fn load_cityscapes_format(root: &Path, mapping: &ClassMapping, role: Role) -> Result<DatasetSplit> {
    let images_root = root.join("leftImg8bit");
    let mut found = Vec::new();
    if images_root.is_dir() {
        for entry in walkdir::WalkDir::new(&images_root).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| images_root.clone());
                Error::io(path, e.into())
            })?;
            let name = entry.file_name().to_string_lossy();
            if let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) {
                let rel_dir = entry
                    .path()
                    .parent()
                    .and_then(|p| p.strip_prefix(&images_root).ok())
                    .map(Path::to_path_buf)
                    .unwrap_or_default();
                found.push((stem.to_owned(), entry.path().to_path_buf(), rel_dir));
            }
        }
    }
    let missing: Vec<String> = found
        .iter()
        .filter(|(stem, _, rel)| !root.join("gtFine").join(rel).join(format!("{stem}{LABEL_SUFFIX}")).is_file())
        .map(|(stem, _, _)| stem.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLabel(missing));
    }
    let mut samples = Vec::with_capacity(found.len());
    for (stem, img_path, rel) in found {
        let image = Image::load_png(&img_path)?;
        let label_path = root.join("gtFine").join(&rel).join(format!("{stem}{LABEL_SUFFIX}"));
        let raster = image::open(&label_path)?.to_luma16();
        let (h, w) = (raster.height() as usize, raster.width() as usize);
        if (h, w) != image.dims() {
            return Err(Error::Format {
                path: label_path,
                reason: format!("label {h}x{w} vs image {:?}", image.dims()),
            });
        }
        let mut by_id: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        for (i, px) in raster.as_raw().iter().enumerate() {
            let v = u32::from(*px);
            if v >= 1000 && mapping.0.contains_key(&(v / 1000)) {
                by_id.entry(v).or_insert_with(|| vec![false; h * w])[i] = true;
            }
        }
        let annotations = by_id
            .into_iter()
            .map(|(raw, bits)| InstanceAnnotation {
                class_id: mapping.0[&(raw / 1000)],
                instance_id: raw,
                mask: Mask { height: h, width: w, bits },
            })
            .collect();
        samples.push(Sample {
            id: stem,
            image,
            annotations,
        });
    }
    Ok(DatasetSplit::new(role, Domain::SourceX, samples))
}
