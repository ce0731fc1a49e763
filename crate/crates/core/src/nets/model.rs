use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Padding, Tensor};

pub const REGISTERED_ARCHS: [&str; 2] = ["toy_cnn", "toy_dense_net"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    /// Image-level new head on the trunk.
    ToyCnn,
    /// Per-position new head on the last feature map.
    ToyDenseNet,
}

/// Layer dimensions of a registered architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of the three conv stages (strides 1, 2, 2).
    pub conv_widths: [usize; 3],
    pub trunk_width: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    pub dense_head_width: usize,
}

impl Architecture {
    pub fn by_name(name: &str) -> Result<Self> {
        let base = Architecture {
            kind: ArchKind::ToyCnn,
            in_channels: 1,
            image_size: 16,
            conv_widths: [16, 32, 32],
            trunk_width: 8,
            old_classes: 4,
            new_classes: 4,
            dense_head_width: 16,
        };
        match name {
            "toy_cnn" => Ok(base),
            "toy_dense_net" => Ok(Architecture {
                kind: ArchKind::ToyDenseNet,
                new_classes: 2,
                ..base
            }),
            other => Err(Error::arg(format!(
                "unknown architecture {other:?}; registered: {}",
                REGISTERED_ARCHS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ArchKind::ToyCnn => "toy_cnn",
            ArchKind::ToyDenseNet => "toy_dense_net",
        }
    }

    /// Spatial extent of the dense head output for an input of `size`.
    pub fn dense_output_size(&self, size: usize) -> usize {
        size.div_ceil(2).div_ceil(2)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl Conv {
    fn init(rng: &mut Rng, cin: usize, cout: usize, stride: usize, trainable: bool) -> Conv {
        let fan_in = cin * 9;
        let w = rng::normal_vec(rng, cout * fan_in, (2.0 / fan_in as f32).sqrt());
        Conv {
            w: Tensor::leaf(&[cout, cin, 3, 3], w, trainable).expect("conv shape"),
            b: Tensor::leaf(&[cout], vec![0.0; cout], trainable).expect("bias shape"),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), self.stride, Padding::Same)
    }

    fn copy(&self, trainable: bool) -> Conv {
        Conv {
            w: self.w.deep_copy(trainable),
            b: self.b.deep_copy(trainable),
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn init(rng: &mut Rng, fan_in: usize, out: usize, gain: f32, trainable: bool) -> Dense {
        let w = rng::normal_vec(rng, fan_in * out, gain * (1.0 / fan_in as f32).sqrt());
        Dense {
            w: Tensor::leaf(&[fan_in, out], w, trainable).expect("dense shape"),
            b: Tensor::leaf(&[out], vec![0.0; out], trainable).expect("bias shape"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.w, Some(&self.b))
    }

    fn copy(&self, trainable: bool) -> Dense {
        Dense {
            w: self.w.deep_copy(trainable),
            b: self.b.deep_copy(trainable),
        }
    }
}

/// Shared feature extractor: three conv stages, global average pool and a
/// dense trunk.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub trunk: Dense,
}

pub struct BackboneOut {
    /// Last conv stage output, (N, C3, H/4, W/4).
    pub feature_map: Tensor,
    /// Trunk activations, (N, trunk_width).
    pub features: Tensor,
}

impl Backbone {
    pub fn init(arch: &Architecture, rng: &mut Rng, trainable: bool) -> Backbone {
        let [c1, c2, c3] = arch.conv_widths;
        Backbone {
            conv1: Conv::init(rng, arch.in_channels, c1, 1, trainable),
            conv2: Conv::init(rng, c1, c2, 2, trainable),
            conv3: Conv::init(rng, c2, c3, 2, trainable),
            trunk: Dense::init(rng, c3, arch.trunk_width, 2f32.sqrt(), trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<BackboneOut> {
        // pixels live in [0, 1]; centre them so either polarity starts symmetric
        let centred = x.add(&Tensor::scalar(-0.5))?.scalar_mul(2.0)?;
        let a1 = self.conv1.forward(&centred)?.relu()?;
        let a2 = self.conv2.forward(&a1)?.relu()?;
        let fm = self.conv3.forward(&a2)?.relu()?;
        let side = fm.shape()[2];
        if fm.shape()[3] != side {
            return Err(Error::invalid_shape("backbone", x.shape(), "input must be square"));
        }
        let pooled = fm.mean_pool2d(side)?.flatten()?;
        let features = self.trunk.forward(&pooled)?.relu()?;
        Ok(BackboneOut {
            feature_map: fm,
            features,
        })
    }

    /// (group, name, tensor) in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &'static str, &Tensor)> {
        vec![
            ("conv1", "conv1.w", &self.conv1.w),
            ("conv1", "conv1.b", &self.conv1.b),
            ("conv2", "conv2.w", &self.conv2.w),
            ("conv2", "conv2.b", &self.conv2.b),
            ("conv3", "conv3.w", &self.conv3.w),
            ("conv3", "conv3.b", &self.conv3.b),
            ("trunk", "trunk.w", &self.trunk.w),
            ("trunk", "trunk.b", &self.trunk.b),
        ]
    }

    pub fn copy(&self, trainable: bool) -> Backbone {
        Backbone {
            conv1: self.conv1.copy(trainable),
            conv2: self.conv2.copy(trainable),
            conv3: self.conv3.copy(trainable),
            trunk: self.trunk.copy(trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub enum NewHead {
    Linear(Dense),
    /// conv3×3 → relu → conv3×3 over the last feature map.
    PerPosition { hidden: Conv, out: Conv },
}

impl NewHead {
    fn init(arch: &Architecture, rng: &mut Rng) -> NewHead {
        match arch.kind {
            ArchKind::ToyCnn => NewHead::Linear(Dense::init(rng, arch.trunk_width, arch.new_classes, 1.0, true)),
            ArchKind::ToyDenseNet => NewHead::PerPosition {
                hidden: Conv::init(rng, arch.conv_widths[2], arch.dense_head_width, 1, true),
                out: Conv::init(rng, arch.dense_head_width, arch.new_classes, 1, true),
            },
        }
    }

    fn forward(&self, out: &BackboneOut) -> Result<Tensor> {
        match self {
            NewHead::Linear(d) => d.forward(&out.features),
            NewHead::PerPosition { hidden, out: o } => o.forward(&hidden.forward(&out.feature_map)?.relu()?),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            NewHead::Linear(d) => vec![("fc.w", &d.w), ("fc.b", &d.b)],
            NewHead::PerPosition { hidden, out } => vec![
                ("hidden.w", &hidden.w),
                ("hidden.b", &hidden.b),
                ("out.w", &out.w),
                ("out.b", &out.b),
            ],
        }
    }
}

/// Optimization coordinate: a named group of trainable parameters sharing one
/// learning-rate scale.
#[derive(Debug, Clone)]
pub struct Coordinate {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct CoordinateMap {
    pub groups: Vec<Coordinate>,
}

impl CoordinateMap {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    /// (coordinate index, name, tensor) for every parameter in order.
    pub fn iter_params(&self) -> impl Iterator<Item = (usize, &str, &Tensor)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(c, g)| g.params.iter().map(move |(n, t)| (c, n.as_str(), t)))
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.params.len()).sum()
    }
}

/// Live model (θ_s, θ_n) with a frozen old-task head θ_o and a frozen
/// reference backbone θ_{s,o}.
#[derive(Debug, Clone)]
pub struct DualHeadModel {
    pub arch: Architecture,
    pub backbone: Backbone,
    pub new_head: NewHead,
    pub old_head: Dense,
    pub reference: Backbone,
}

/// Outputs of one dual forward pass.
pub struct DualOutput {
    pub new_logits: Tensor,
    pub old_logits_live: Tensor,
    pub old_logits_ref: Tensor,
}

/// Backbone plus old-task head, both trainable; the pretraining network.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: Architecture,
    pub backbone: Backbone,
    pub head: Dense,
}

impl Classifier {
    pub fn init(arch: &Architecture, seed: u64) -> Classifier {
        let mut rng = rng::stream(seed, "classifier", 0);
        let backbone = Backbone::init(arch, &mut rng, true);
        let head = Dense::init(&mut rng, arch.trunk_width, arch.old_classes, 1.0, true);
        Classifier {
            arch: arch.clone(),
            backbone,
            head,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.backbone.forward(x)?.features)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .backbone
            .named()
            .into_iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        v.push(("head.w".into(), self.head.w.clone()));
        v.push(("head.b".into(), self.head.b.clone()));
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.params();
        Checkpoint::from_tensors(params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Classifier of architecture `arch` with every parameter taken from `ck`.
    pub fn from_checkpoint(arch: &Architecture, ck: &Checkpoint) -> Result<Classifier> {
        let c = Classifier::init(arch, 0);
        let params = c.params();
        ck.restore(params.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(c)
    }
}

impl DualHeadModel {
    /// Randomly initialized model; the reference copy equals the backbone.
    pub fn build(arch_name: &str, seed: u64) -> Result<Self> {
        let arch = Architecture::by_name(arch_name)?;
        let classifier = Classifier::init(&arch, seed);
        Ok(Self::from_pretrained(&classifier, seed))
    }

    /// Wrap a pretrained classifier: θ_s is a trainable copy of its backbone,
    /// θ_{s,o} and θ_o are frozen copies, θ_n is freshly initialized.
    pub fn from_pretrained(classifier: &Classifier, new_head_seed: u64) -> Self {
        let mut rng = rng::stream(new_head_seed, "new_head", 0);
        DualHeadModel {
            arch: classifier.arch.clone(),
            backbone: classifier.backbone.copy(true),
            new_head: NewHead::init(&classifier.arch, &mut rng),
            old_head: classifier.head.copy(false),
            reference: classifier.backbone.copy(false),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let ok = s.len() == 4
            && s[1] == self.arch.in_channels
            && s[2] == s[3]
            && s[2] >= 4
            && s[2].is_multiple_of(4)
            && s[2] <= self.arch.image_size;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "model input",
                s,
                &[0, self.arch.in_channels, self.arch.image_size, self.arch.image_size],
            ))
        }
    }

    /// (new logits, live old-head logits) sharing one backbone pass.
    pub fn forward_live(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let out = self.backbone.forward(x)?;
        let new_logits = self.new_head.forward(&out)?;
        let old = self.old_head.forward(&out.features)?;
        Ok((new_logits, old))
    }

    pub fn forward_new(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.new_head.forward(&self.backbone.forward(x)?)
    }

    pub fn forward_old_live(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.old_head.forward(&self.backbone.forward(x)?.features)
    }

    /// Frozen reference branch; never records a graph.
    pub fn forward_old_ref(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let x = x.detach();
        Ok(self.old_head.forward(&self.reference.forward(&x)?.features)?.detach())
    }

    pub fn forward_dual(&self, x: &Tensor) -> Result<DualOutput> {
        let (new_logits, old_logits_live) = self.forward_live(x)?;
        let old_logits_ref = self.forward_old_ref(x)?;
        Ok(DualOutput {
            new_logits,
            old_logits_live,
            old_logits_ref,
        })
    }

    /// Coordinates are formed at every resolution reduction (conv1 at full
    /// resolution, conv2 and conv3 after each stride-2 stage, the trunk after
    /// global pooling) plus one for the new head.
    pub fn coordinate_map(&self) -> CoordinateMap {
        let mut groups: Vec<Coordinate> = Vec::new();
        for (group, name, t) in self.backbone.named() {
            if groups.last().map(|g| g.name != group).unwrap_or(true) {
                groups.push(Coordinate {
                    name: group.to_string(),
                    params: Vec::new(),
                });
            }
            groups
                .last_mut()
                .expect("pushed above")
                .params
                .push((format!("backbone/{name}"), t.clone()));
        }
        groups.push(Coordinate {
            name: "new_head".into(),
            params: self
                .new_head
                .named()
                .into_iter()
                .map(|(n, t)| (format!("new_head/{n}"), t.clone()))
                .collect(),
        });
        CoordinateMap { groups }
    }

    pub fn new_head_tensors(&self) -> Vec<Tensor> {
        self.new_head.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn backbone_tensors(&self) -> Vec<Tensor> {
        self.backbone.named().into_iter().map(|(_, _, t)| t.clone()).collect()
    }

    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = vec![
            ("old_head/fc.w".into(), self.old_head.w.clone()),
            ("old_head/fc.b".into(), self.old_head.b.clone()),
        ];
        v.extend(
            self.reference
                .named()
                .into_iter()
                .map(|(_, n, t)| (format!("reference/{n}"), t.clone())),
        );
        v
    }

    /// Every tensor with a stable name: trainable ones first, then frozen.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .coordinate_map()
            .iter_params()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        v.extend(self.frozen_tensors());
        v
    }

    /// SHA-256 over the frozen tensors (θ_{s,o}, θ_o).
    pub fn reference_digest(&self) -> [u8; 32] {
        digest(self.frozen_tensors().iter().map(|(_, t)| t))
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }

    /// Old-task classifier view of the live backbone, sharing storage.
    pub fn live_classifier(&self) -> Classifier {
        Classifier {
            arch: self.arch.clone(),
            backbone: self.backbone.clone(),
            head: self.old_head.clone(),
        }
    }
}

pub fn digest<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tensors {
        for v in t.values().iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}
