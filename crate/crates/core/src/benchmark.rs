//! Procedural shape datasets standing in for the pretraining, synthetic
//! source and real target domains, plus reference pretraining and retention
//! measurement.
//!
//! Every sample is a pure function of (domain spec, seed, index): its RNG
//! stream is derived from those three values only, so any index range can be
//! generated independently.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::coord_sgd::{OptState, SgdConfig};
use crate::error::{Error, Result};
use crate::nets::checkpoint::Cursor;
use crate::nets::{argmax, Architecture, Classifier, Coordinate, CoordinateMap, DualHeadModel};
use crate::proxy::xe_loss;
use crate::rng;
use crate::tensor::{no_grad, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disk", "square", "triangle", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainKind {
    Base,
    SyntheticSource,
    RealTarget,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Base => "base",
            DomainKind::SyntheticSource => "synthetic_source",
            DomainKind::RealTarget => "real_target",
        }
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(DomainKind::Base),
            "synthetic_source" => Ok(DomainKind::SyntheticSource),
            "real_target" => Ok(DomainKind::RealTarget),
            other => Err(Error::Config(format!(
                "unknown domain {other:?} (expected base, synthetic_source or real_target)"
            ))),
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rendering distribution of a domain. Ranges are sampled uniformly per
/// image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    /// Background intensity.
    pub background: (f32, f32),
    /// |foreground − background|.
    pub contrast: (f32, f32),
    /// Probability that the shape is darker than the background.
    pub dark_shape_prob: f32,
    /// Additive per-class offset on the sampled contrast.
    pub class_contrast_offset: Option<[f32; NUM_CLASSES]>,
    /// Fixed foreground intensity per class; overrides contrast and
    /// polarity when set (flat material colours of a renderer).
    pub class_shading: Option<[f32; NUM_CLASSES]>,
    /// Relative amplitude of a sinusoidal foreground texture.
    pub texture_amplitude: (f32, f32),
    /// Texture period in pixels.
    pub texture_period: (f32, f32),
    /// Additive Gaussian pixel noise σ.
    pub noise_sigma: (f32, f32),
    /// Passes of a separable [1 2 1]/4 blur after compositing.
    pub blur_passes: u32,
    /// 4×4 supersampled edge coverage instead of hard edges.
    pub antialias: bool,
    /// Shape radius in pixels.
    pub radius: (f32, f32),
    /// Maximum absolute rotation in radians.
    pub max_rotation: f32,
}

impl RenderParams {
    /// Textured, noisy, blurred shapes with random polarity and contrast.
    pub fn base() -> Self {
        RenderParams {
            background: (0.05, 0.4),
            contrast: (0.35, 0.55),
            dark_shape_prob: 0.0,
            class_contrast_offset: None,
            class_shading: None,
            texture_amplitude: (0.05, 0.2),
            texture_period: (2.5, 6.0),
            noise_sigma: (0.02, 0.07),
            blur_passes: 1,
            antialias: true,
            radius: (4.0, 6.0),
            max_rotation: 0.3,
        }
    }

    /// The base distribution with finer, slightly stronger texture.
    pub fn real_target() -> Self {
        RenderParams {
            texture_amplitude: (0.05, 0.25),
            texture_period: (2.0, 5.0),
            ..Self::base()
        }
    }

    /// Flat background, hard edges, no texture or noise; each class has its
    /// own flat shade.
    pub fn synthetic_source() -> Self {
        RenderParams {
            background: (0.1, 0.1),
            contrast: (0.0, 0.0),
            dark_shape_prob: 0.0,
            class_contrast_offset: None,
            class_shading: Some([0.45, 0.6, 0.75, 0.9]),
            texture_amplitude: (0.0, 0.0),
            texture_period: (4.0, 4.0),
            noise_sigma: (0.0, 0.0),
            blur_passes: 0,
            antialias: false,
            radius: (4.0, 6.0),
            max_rotation: 0.3,
        }
    }

    fn validate(&self) -> Result<()> {
        let ranges = [
            ("background", self.background),
            ("contrast", self.contrast),
            ("texture_amplitude", self.texture_amplitude),
            ("texture_period", self.texture_period),
            ("noise_sigma", self.noise_sigma),
            ("radius", self.radius),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::arg(format!("render parameter {name} has invalid range ({lo}, {hi})")));
            }
        }
        if self.texture_period.0 <= 0.0 || self.radius.0 < 1.0 || self.radius.1 > IMAGE_SIZE as f32 / 2.0 {
            return Err(Error::arg("texture period and radius must be positive and fit the image"));
        }
        if !(0.0..=1.0).contains(&self.dark_shape_prob) {
            return Err(Error::arg("dark_shape_prob must be a probability"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub seed: u64,
    pub params: RenderParams,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, seed: u64) -> Self {
        let params = match kind {
            DomainKind::Base => RenderParams::base(),
            DomainKind::SyntheticSource => RenderParams::synthetic_source(),
            DomainKind::RealTarget => RenderParams::real_target(),
        };
        DomainSpec { kind, seed, params }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()
    }
}

/// One rendered image with its class and per-pixel foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Vec<f32>,
    pub class: usize,
    pub mask: Vec<u8>,
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Whether the point (u, v), in shape-local units, lies inside `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => {
            // upward triangle with vertices (0,-1), (±0.95, 0.7)
            v <= 0.7 && v >= -1.0 + 1.7 * u.abs() / 0.95
        }
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

/// Render sample `index` of a domain.
pub fn render(spec: &DomainSpec, index: u64) -> LabeledSample {
    let p = &spec.params;
    let mut r = rng::stream(spec.seed, spec.kind.name(), index);
    let class = (index % NUM_CLASSES as u64) as usize;
    let n = IMAGE_SIZE;

    let radius = uniform(&mut r, p.radius);
    let margin = radius * 0.8;
    let cx = r.random_range(margin..(n as f32 - margin));
    let cy = r.random_range(margin..(n as f32 - margin));
    let theta = if p.max_rotation > 0.0 {
        r.random_range(-p.max_rotation..p.max_rotation)
    } else {
        0.0
    };
    let bg = uniform(&mut r, p.background);
    let fg = match p.class_shading {
        Some(shades) => shades[class],
        None => {
            let contrast = uniform(&mut r, p.contrast) + p.class_contrast_offset.map_or(0.0, |o| o[class]);
            let mut dark = r.random::<f32>() < p.dark_shape_prob;
            // flip polarity rather than clip the shape away
            if bg + contrast > 1.0 {
                dark = true;
            } else if bg - contrast < 0.0 {
                dark = false;
            }
            if dark {
                bg - contrast
            } else {
                bg + contrast
            }
        }
    };
    let amp = uniform(&mut r, p.texture_amplitude);
    let period = uniform(&mut r, p.texture_period);
    let tex_angle = r.random_range(0.0..std::f32::consts::PI);
    let tex_phase = r.random_range(0.0..std::f32::consts::TAU);
    let sigma = uniform(&mut r, p.noise_sigma);

    let (sin_t, cos_t) = theta.sin_cos();
    let (kx, ky) = {
        let w = std::f32::consts::TAU / period;
        (w * tex_angle.cos(), w * tex_angle.sin())
    };
    let coverage_at = |x: f32, y: f32| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let u = (cos_t * dx + sin_t * dy) / radius;
        let v = (-sin_t * dx + cos_t * dy) / radius;
        inside(class, u, v)
    };

    let mut image = vec![0.0f32; n * n];
    let mut mask = vec![0u8; n * n];
    let sub = if p.antialias { 4 } else { 1 };
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let px = x as f32 + (sx as f32 + 0.5) / sub as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / sub as f32;
                    hits += coverage_at(px, py) as u32;
                }
            }
            let cov = hits as f32 / (sub * sub) as f32;
            mask[y * n + x] = (cov >= 0.5) as u8;
            let texture = 1.0 + amp * (kx * x as f32 + ky * y as f32 + tex_phase).sin();
            let shape_value = fg * texture;
            image[y * n + x] = bg + cov * (shape_value - bg);
        }
    }

    for _ in 0..p.blur_passes {
        blur_121(&mut image, n);
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("positive sigma");
        for v in image.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledSample { image, class, mask }
}

/// Separable [1 2 1]/4 blur with edge replication.
fn blur_121(img: &mut [f32], n: usize) {
    let mut tmp = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let l = img[y * n + x.saturating_sub(1)];
            let r = img[y * n + (x + 1).min(n - 1)];
            tmp[y * n + x] = 0.25 * l + 0.5 * img[y * n + x] + 0.25 * r;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let u = tmp[y.saturating_sub(1) * n + x];
            let d = tmp[(y + 1).min(n - 1) * n + x];
            img[y * n + x] = 0.25 * u + 0.5 * tmp[y * n + x] + 0.25 * d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Class,
    Mask,
}

/// In-memory image set with class labels and foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub images: Vec<f32>,
    pub classes: Vec<usize>,
    /// Per-pixel masks; empty when loaded from a class-label file.
    pub masks: Vec<u8>,
}

/// Render samples `start..end` of a domain.
pub fn generate_range(spec: &DomainSpec, start: u64, end: u64) -> Result<Dataset> {
    spec.validate()?;
    if end <= start {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let count = (end - start) as usize;
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut ds = Dataset {
        image_size: IMAGE_SIZE,
        images: Vec::with_capacity(count * px),
        classes: Vec::with_capacity(count),
        masks: Vec::with_capacity(count * px),
    };
    for i in start..end {
        let s = render(spec, i);
        ds.images.extend_from_slice(&s.image);
        ds.classes.push(s.class);
        ds.masks.extend_from_slice(&s.mask);
    }
    Ok(ds)
}

pub fn generate(spec: &DomainSpec, count: usize) -> Result<Dataset> {
    generate_range(spec, 0, count as u64)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to concatenate"))?;
        let mut out = Dataset {
            image_size: first.image_size,
            images: Vec::new(),
            classes: Vec::new(),
            masks: Vec::new(),
        };
        for p in parts {
            if p.image_size != first.image_size || p.masks.is_empty() != first.masks.is_empty() {
                return Err(Error::arg("datasets have different layouts"));
            }
            out.images.extend_from_slice(&p.images);
            out.classes.extend_from_slice(&p.classes);
            out.masks.extend_from_slice(&p.masks);
        }
        Ok(out)
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        let px = self.pixels();
        LabeledSample {
            image: self.images[i * px..(i + 1) * px].to_vec(),
            class: self.classes[i],
            mask: if self.masks.is_empty() {
                Vec::new()
            } else {
                self.masks[i * px..(i + 1) * px].to_vec()
            },
        }
    }

    /// Input tensor (N, 1, H, W) for the given sample indices.
    pub fn images_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let px = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(&self.images[i * px..(i + 1) * px]);
        }
        Tensor::new(&[indices.len(), 1, self.image_size, self.image_size], data)
    }

    pub fn class_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.classes[i]).collect()
    }

    /// Masks block-reduced to `out × out` by majority vote (ties count as
    /// foreground), flattened per sample in row-major order.
    pub fn mask_labels(&self, indices: &[usize], out: usize) -> Result<Vec<usize>> {
        if self.masks.is_empty() {
            return Err(Error::arg("dataset has no masks"));
        }
        let n = self.image_size;
        if out == 0 || !n.is_multiple_of(out) {
            return Err(Error::arg(format!("mask size {out} must divide {n}")));
        }
        let block = n / out;
        let mut labels = Vec::with_capacity(indices.len() * out * out);
        for &i in indices {
            let m = &self.masks[i * n * n..(i + 1) * n * n];
            for by in 0..out {
                for bx in 0..out {
                    let mut fg = 0;
                    for y in by * block..(by + 1) * block {
                        for x in bx * block..(bx + 1) * block {
                            fg += m[y * n + x] as usize;
                        }
                    }
                    labels.push((2 * fg >= block * block) as usize);
                }
            }
        }
        Ok(labels)
    }

    /// `ASGD` file bytes: magic, u16 version, u32 count, u32 channels, u32
    /// height, u32 width, u8 label kind (0 class, 1 mask), f32 images, then
    /// u16 labels (one per sample, or H·W per sample).
    pub fn to_bytes(&self, kind: LabelKind) -> Result<Vec<u8>> {
        if kind == LabelKind::Mask && self.masks.is_empty() {
            return Err(Error::arg("dataset has no masks to write"));
        }
        let mut b = Vec::with_capacity(32 + self.images.len() * 4 + self.masks.len() * 2);
        b.extend_from_slice(DATASET_MAGIC);
        b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for d in [1u32, self.image_size as u32, self.image_size as u32] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.push(match kind {
            LabelKind::Class => 0,
            LabelKind::Mask => 1,
        });
        for v in &self.images {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match kind {
            LabelKind::Class => {
                for &c in &self.classes {
                    b.extend_from_slice(&(c as u16).to_le_bytes());
                }
            }
            LabelKind::Mask => {
                for &m in &self.masks {
                    b.extend_from_slice(&(m as u16).to_le_bytes());
                }
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Dataset, LabelKind)> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not an ASGD dataset (bad magic)".into()));
        }
        let version = cur.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = cur.u32()? as usize;
        let (c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        if c != 1 || h != w || h == 0 {
            return Err(Error::Format(format!("unsupported image extents {c}×{h}×{w}")));
        }
        let kind = match cur.u8()? {
            0 => LabelKind::Class,
            1 => LabelKind::Mask,
            t => return Err(Error::Format(format!("unknown label kind tag {t}"))),
        };
        let px = h * w;
        let images: Vec<f32> = cur
            .take(count * px * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut ds = Dataset {
            image_size: h,
            images,
            classes: Vec::new(),
            masks: Vec::new(),
        };
        match kind {
            LabelKind::Class => {
                for _ in 0..count {
                    ds.classes.push(cur.u16()? as usize);
                }
            }
            LabelKind::Mask => {
                for _ in 0..count * px {
                    let m = cur.u16()?;
                    if m > 1 {
                        return Err(Error::Format(format!("mask value {m} is not 0/1")));
                    }
                    ds.masks.push(m as u8);
                }
                // class ids are not stored in mask files
                ds.classes = vec![0; count];
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after dataset payload".into()));
        }
        Ok((ds, kind))
    }

    pub fn save(&self, path: &Path, kind: LabelKind) -> Result<()> {
        fs::write(path, self.to_bytes(kind)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Dataset, LabelKind)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"ASGD";
pub const DATASET_VERSION: u16 = 1;

/// Classification accuracy of `forward` over a dataset, in chunks.
pub fn accuracy_with(
    data: &Dataset,
    forward: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("cannot measure accuracy on an empty dataset"));
    }
    let mut correct = 0usize;
    no_grad(|| -> Result<()> {
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(256) {
            let logits = forward(&data.images_tensor(chunk)?)?;
            let k = logits.shape()[1];
            let v = logits.values();
            for (row, &i) in chunk.iter().enumerate() {
                correct += (argmax(&v[row * k..(row + 1) * k]) == data.classes[i]) as usize;
            }
        }
        Ok(())
    })?;
    Ok(correct as f64 / data.len() as f64)
}

/// Old-task accuracy through the live backbone and the frozen old head.
pub fn measure_retention(model: &DualHeadModel, base_val: &Dataset) -> Result<f64> {
    accuracy_with(base_val, |x| model.forward_old_live(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub arch: String,
    pub train_count: usize,
    pub val_count: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            arch: "toy_cnn".into(),
            train_count: 4000,
            val_count: 1000,
            max_epochs: 30,
            batch_size: 32,
            sgd: SgdConfig {
                eta_base: 0.02,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            target_accuracy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub classifier: Classifier,
    pub val_accuracy: f64,
    pub epochs: usize,
    pub base_val: Dataset,
}

/// Train backbone and old-task head on the base domain until validation
/// accuracy reaches the target. The validation split uses indices past the
/// training range of the same domain.
pub fn pretrain_reference(spec: &DomainSpec, cfg: &PretrainConfig) -> Result<Pretrained> {
    pretrain_with(spec, cfg, &Architecture::by_name(&cfg.arch)?)
}

/// As [`pretrain_reference`] with an explicit architecture.
pub fn pretrain_with(spec: &DomainSpec, cfg: &PretrainConfig, arch: &Architecture) -> Result<Pretrained> {
    if spec.kind != DomainKind::Base {
        return Err(Error::arg(format!(
            "reference pretraining needs the base domain, got {}",
            spec.kind
        )));
    }
    if cfg.batch_size == 0 || cfg.train_count == 0 || cfg.val_count == 0 {
        return Err(Error::arg("pretraining sizes must be positive"));
    }
    let train = generate(spec, cfg.train_count)?;
    let val = generate_range(
        spec,
        cfg.train_count as u64,
        (cfg.train_count + cfg.val_count) as u64,
    )?;
    let classifier = Classifier::init(arch, rng::derive_seed(cfg.seed, "pretrain-init", 0));
    let map = CoordinateMap {
        groups: vec![Coordinate {
            name: "all".into(),
            params: classifier.params(),
        }],
    };
    let mut opt = OptState::new(cfg.sgd.clone(), &map)?;
    let mut shuffle_rng = rng::stream(cfg.seed, "pretrain-shuffle", 0);
    let mut acc = 0.0;
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train.len(), &mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.images_tensor(batch)?;
            let loss = xe_loss(&classifier.forward(&x)?, &train.class_labels(batch))?;
            for (_, _, t) in map.iter_params() {
                t.zero_grad();
            }
            loss.backward()?;
            opt.step(&map)?;
        }
        acc = accuracy_with(&val, |x| classifier.forward(x))?;
        if acc >= cfg.target_accuracy {
            return Ok(Pretrained {
                classifier,
                val_accuracy: acc,
                epochs: epoch,
                base_val: val,
            });
        }
    }
    Err(Error::Training(format!(
        "pretraining reached {:.3} base validation accuracy after {} epochs, below the {:.3} target",
        acc, cfg.max_epochs, cfg.target_accuracy
    )))
}

/// Fisher–Yates permutation of 0..n.
pub fn shuffled(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_background_is_flat() {
        let spec = DomainSpec::new(DomainKind::SyntheticSource, 3);
        for i in 0..20 {
            let s = render(&spec, i);
            for (v, m) in s.image.iter().zip(&s.mask) {
                if *m == 0 {
                    assert_eq!(*v, 0.1);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        for kind in [DomainKind::Base, DomainKind::SyntheticSource, DomainKind::RealTarget] {
            let spec = DomainSpec::new(kind, 11);
            let a = generate(&spec, 40).unwrap();
            let b = generate(&spec, 40).unwrap();
            assert_eq!(a.to_bytes(LabelKind::Class).unwrap(), b.to_bytes(LabelKind::Class).unwrap());
        }
    }

    #[test]
    fn range_generation_matches_sequential() {
        let spec = DomainSpec::new(DomainKind::RealTarget, 2);
        let whole = generate(&spec, 30).unwrap();
        let parts = Dataset::concat(&[
            generate_range(&spec, 0, 7).unwrap(),
            generate_range(&spec, 7, 30).unwrap(),
        ])
        .unwrap();
        assert_eq!(whole, parts);
    }

    #[test]
    fn balanced_classes() {
        let spec = DomainSpec::new(DomainKind::Base, 0);
        let ds = generate(&spec, 1000).unwrap();
        let mut counts = [0; NUM_CLASSES];
        ds.classes.iter().for_each(|&c| counts[c] += 1);
        assert_eq!(counts, [250; 4]);
        let ds = generate(&spec, 7).unwrap();
        let mut counts = [0; NUM_CLASSES];
        ds.classes.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pixels_in_unit_range_and_masks_nonempty() {
        for kind in [DomainKind::Base, DomainKind::SyntheticSource, DomainKind::RealTarget] {
            let ds = generate(&DomainSpec::new(kind, 5), 64).unwrap();
            assert!(ds.images.iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..ds.len() {
                let fg: usize = ds.sample(i).mask.iter().map(|&m| m as usize).sum();
                assert!(fg > 10, "sample {i} of {kind} has a tiny mask");
            }
        }
    }

    #[test]
    fn dataset_file_layout_and_errors() {
        let ds = generate(&DomainSpec::new(DomainKind::SyntheticSource, 1), 3).unwrap();
        let bytes = ds.to_bytes(LabelKind::Class).unwrap();
        assert_eq!(&bytes[..4], b"ASGD");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 12 + 1 + 3 * 256 * 4 + 3 * 2);
        let (back, kind) = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(kind, LabelKind::Class);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.classes, ds.classes);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mask_bytes = ds.to_bytes(LabelKind::Mask).unwrap();
        let (back, kind) = Dataset::from_bytes(&mask_bytes).unwrap();
        assert_eq!(kind, LabelKind::Mask);
        assert_eq!(back.masks, ds.masks);
    }

    #[test]
    fn mask_block_reduction() {
        let ds = generate(&DomainSpec::new(DomainKind::SyntheticSource, 1), 2).unwrap();
        let full = ds.mask_labels(&[0, 1], 16).unwrap();
        assert_eq!(full, ds.masks.iter().map(|&m| m as usize).collect::<Vec<_>>());
        assert_eq!(ds.mask_labels(&[0], 4).unwrap().len(), 16);
        assert!(ds.mask_labels(&[0], 3).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = DomainSpec::new(DomainKind::Base, 0);
        spec.params.noise_sigma = (0.2, 0.1);
        assert!(generate(&spec, 4).is_err());
        assert!(generate(&DomainSpec::new(DomainKind::Base, 0), 0).is_err());
    }

    #[test]
    fn empty_retention_set_rejected() {
        let m = DualHeadModel::build("toy_cnn", 0).unwrap();
        let empty = Dataset {
            image_size: IMAGE_SIZE,
            images: vec![],
            classes: vec![],
            masks: vec![],
        };
        assert!(measure_retention(&m, &empty).is_err());
    }
}
