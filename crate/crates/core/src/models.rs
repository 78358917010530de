//! Parameterized modules and the two model compositions built from them: the
//! teacher pipeline `head ∘ projector ∘ extractor` and the student
//! `head ∘ extractor`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{self, Layer, NetBuilder, Param, Tape};
use crate::rng;
use crate::{Error, Real, Result, Tensor};

const RELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// Projector architectures available between the frozen extractor and the
/// task-aligned head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorKind {
    /// A residual block with the same layout as the teacher's backbone blocks.
    TeacherBlock,
    /// 3x3 convolution followed by ReLU.
    Conv3x3,
    /// 1x1 -> 3x3 -> 1x1 bottleneck convolutions.
    Conv131,
    /// Self-attention over spatial positions with a residual connection.
    AttentionBlock,
    /// A single affine map on the flattened features.
    Linear,
    /// No parameters; flattens the extractor output. Used by linear probing.
    Identity,
    /// Residual two-layer bottleneck on the flattened features. Used by the
    /// reprogram-then-distill baseline.
    BottleneckAdapter,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 7] = [
        ProjectorKind::TeacherBlock,
        ProjectorKind::Conv3x3,
        ProjectorKind::Conv131,
        ProjectorKind::AttentionBlock,
        ProjectorKind::Linear,
        ProjectorKind::Identity,
        ProjectorKind::BottleneckAdapter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::TeacherBlock => "teacher-block",
            ProjectorKind::Conv3x3 => "conv-3x3",
            ProjectorKind::Conv131 => "conv-1-3-1",
            ProjectorKind::AttentionBlock => "attention-block",
            ProjectorKind::Linear => "linear",
            ProjectorKind::Identity => "identity",
            ProjectorKind::BottleneckAdapter => "bottleneck-adapter",
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "projector kind",
                name: s.into(),
            })
    }
}

/// Student extractor families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentKind {
    /// Three strided convolutions, 32 output features (about a quarter of the
    /// teacher extractor's parameters).
    Small,
    /// Three strided convolutions, 24 output features (about an eighth).
    Tiny,
}

impl StudentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentKind::Small => "small",
            StudentKind::Tiny => "tiny",
        }
    }

    fn widths(self) -> [usize; 3] {
        match self {
            StudentKind::Small => [10, 20, 32],
            StudentKind::Tiny => [8, 12, 24],
        }
    }

    pub fn feature_dim(self) -> usize {
        self.widths()[2]
    }
}

impl FromStr for StudentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(StudentKind::Small),
            "tiny" => Ok(StudentKind::Tiny),
            _ => Err(Error::Unknown {
                kind: "student architecture",
                name: s.into(),
            }),
        }
    }
}

/// Rebuildable description of a module's architecture. Recorded in
/// checkpoint manifests; `build` with the same seed gives the same module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ArchSpec {
    /// Convolutional stand-in for a foundation backbone: two strided convs, a
    /// residual block, another strided conv. Emits a `[2w, H/8, W/8]` map.
    TeacherExtractor { input: [usize; 3], width: usize },
    Student {
        kind: StudentKind,
        input: [usize; 3],
    },
    Projector {
        kind: ProjectorKind,
        input: Vec<usize>,
        out_dim: usize,
    },
    Head {
        feature_dim: usize,
        num_classes: usize,
    },
    /// Built programmatically; cannot be rebuilt from an `ArchSpec` alone.
    Custom { label: String },
}

impl ArchSpec {
    /// Builds the module with parameters drawn from `seed`.
    pub fn build<T: Real>(&self, name: &str, seed: u64) -> Result<ParamModule<T>> {
        match self {
            ArchSpec::TeacherExtractor { input, width } => {
                let w = *width;
                ParamModule::build(name, self.clone(), input, seed, |b| {
                    b.conv("stem", w, 3, 2, 1, RELU_GAIN)?
                        .group_norm("stem_norm")?
                        .relu()?;
                    b.conv("down1", 2 * w, 3, 2, 1, RELU_GAIN)?
                        .group_norm("down1_norm")?
                        .relu()?;
                    b.residual("block1", |r| {
                        r.conv("conv1", 2 * w, 3, 1, 1, RELU_GAIN)?
                            .group_norm("norm1")?
                            .relu()?;
                        r.conv("conv2", 2 * w, 3, 1, 1, 1.0)?.group_norm("norm2")?;
                        Ok(())
                    })?
                    .relu()?;
                    b.conv("down2", 2 * w, 3, 2, 1, RELU_GAIN)?
                        .group_norm("down2_norm")?
                        .relu()?;
                    Ok(())
                })
            }
            ArchSpec::Student { kind, input } => {
                let [a, b2, c] = kind.widths();
                ParamModule::build(name, self.clone(), input, seed, |b| {
                    b.conv("conv1", a, 3, 2, 1, RELU_GAIN)?
                        .group_norm("norm1")?
                        .relu()?;
                    b.conv("conv2", b2, 3, 2, 1, RELU_GAIN)?
                        .group_norm("norm2")?
                        .relu()?;
                    b.conv("conv3", c, 3, 2, 1, RELU_GAIN)?
                        .group_norm("norm3")?
                        .relu()?;
                    b.global_avg_pool()?;
                    Ok(())
                })
            }
            ArchSpec::Projector {
                kind,
                input,
                out_dim,
            } => build_projector_module(name, *kind, input, *out_dim, seed),
            ArchSpec::Head {
                feature_dim,
                num_classes,
            } => {
                if *feature_dim == 0 || *num_classes == 0 {
                    return Err(Error::InvalidConfig(
                        "head dimensions must be positive".into(),
                    ));
                }
                ParamModule::build(name, self.clone(), &[*feature_dim], seed, |b| {
                    b.linear("fc", *num_classes, 1.0)?;
                    Ok(())
                })
            }
            ArchSpec::Custom { label } => Err(Error::Unknown {
                kind: "rebuildable architecture",
                name: label.clone(),
            }),
        }
    }
}

/// A differentiable function with named parameters and a frozen flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamModule<T> {
    name: String,
    arch: ArchSpec,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    frozen: bool,
}

/// Gradient accumulators, one vector per parameter tensor.
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Real> ParamModule<T> {
    /// Builds a module by running `body` on a [`NetBuilder`] whose stream is
    /// keyed by `(seed, name)`.
    pub fn build(
        name: &str,
        arch: ArchSpec,
        input_shape: &[usize],
        seed: u64,
        body: impl FnOnce(&mut NetBuilder<'_, T>) -> Result<()>,
    ) -> Result<Self> {
        let mut params = Vec::new();
        let mut stream = rng::stream(seed, name, 0);
        let mut b = NetBuilder::new(&mut params, &mut stream, input_shape, "");
        body(&mut b)?;
        let (layers, output_shape) = b.finish();
        Ok(Self {
            name: name.into(),
            arch,
            layers,
            params,
            input_shape: input_shape.to_vec(),
            output_shape,
            frozen: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Direct parameter access, for loading and tests. Training code goes
    /// through [`ParamModule::apply_update`], which honours the frozen flag.
    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().get(1..) != Some(self.input_shape.as_slice()) {
            return Err(Error::ShapeMismatch(alloc::format!(
                "module `{}` expects per-sample shape {:?}, got batch shape {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference forward pass over a batch `[B, ..input_shape]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(nn::forward(&self.layers, &self.params, x.clone(), None))
    }

    /// Forward pass that records the activations needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let y = nn::forward(&self.layers, &self.params, x.clone(), Some(&mut tape));
        Ok((y, tape))
    }

    /// Backpropagates `grad` through a recorded pass. Parameter gradients are
    /// accumulated into `grads` when given; the input gradient is returned.
    pub fn backward(
        &self,
        tape: Tape<T>,
        grad: Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        nn::backward(
            &self.layers,
            &self.params,
            tape,
            grad,
            grads.map(|g| g.as_mut_slice()),
        )
    }

    /// Applies `update(param, grad)` to every parameter tensor. Fails on a
    /// frozen module without touching it.
    pub fn apply_update(&mut self, mut update: impl FnMut(usize, &mut [T])) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.name.clone()));
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            update(i, &mut p.value);
        }
        Ok(())
    }

    /// Replaces all parameter values, keeping the architecture. Values must be
    /// given in the module's parameter order.
    pub fn load_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.params.len()
            || values
                .iter()
                .zip(&self.params)
                .any(|(v, p)| v.len() != p.value.len())
        {
            return Err(Error::ShapeMismatch(alloc::format!(
                "parameter layout does not match module `{}`",
                self.name
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Parameter indices sorted by tensor name.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.params.len()).collect();
        idx.sort_by(|a, b| self.params[*a].name.cmp(&self.params[*b].name));
        idx
    }

    pub fn checksum(&self) -> String {
        param_checksum(self)
    }
}

/// SHA-256 over every parameter tensor in name order: the name, its shape and
/// the little-endian value bytes.
pub fn param_checksum<T: Real>(module: &ParamModule<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for i in module.canonical_order() {
        let p = &module.params[i];
        buf.clear();
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(0);
        for d in &p.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.value {
            v.extend_le_bytes(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Length of the feature vector summarizing one sample of the given shape:
/// the channel count for `[c, h, w]` maps (global average pooling), the
/// element count otherwise.
pub fn pooled_dim(shape: &[usize]) -> usize {
    match shape {
        [c, _, _] => *c,
        _ => shape.iter().product(),
    }
}

fn build_projector_module<T: Real>(
    name: &str,
    kind: ProjectorKind,
    input: &[usize],
    out_dim: usize,
    seed: u64,
) -> Result<ParamModule<T>> {
    let in_dim: usize = input.iter().product();
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::InvalidConfig(
            "projector dimensions must be positive".into(),
        ));
    }
    let arch = ArchSpec::Projector {
        kind,
        input: input.to_vec(),
        out_dim,
    };
    // Vectors are treated as 1x1 maps by the convolutional kinds.
    let map = match input {
        [c, h, w] => [*c, *h, *w],
        _ => [in_dim, 1, 1],
    };
    let c = map[0];
    ParamModule::build(name, arch, input, seed, |b| {
        let to_map = |b: &mut NetBuilder<'_, T>| -> Result<()> {
            if b.shape().len() != 3 {
                b.unflatten(map[0], map[1], map[2])?;
            }
            Ok(())
        };
        let pool_and_adapt = |b: &mut NetBuilder<'_, T>| -> Result<()> {
            b.global_avg_pool()?;
            if c != out_dim {
                b.linear("adapter", out_dim, 1.0)?;
            }
            Ok(())
        };
        match kind {
            ProjectorKind::TeacherBlock => {
                to_map(b)?;
                b.residual("block", |r| {
                    r.conv("conv1", c, 3, 1, 1, RELU_GAIN)?
                        .group_norm("norm1")?
                        .relu()?;
                    r.conv("conv2", c, 3, 1, 1, 1.0)?.group_norm("norm2")?;
                    Ok(())
                })?
                .relu()?;
                pool_and_adapt(b)
            }
            ProjectorKind::Conv3x3 => {
                to_map(b)?;
                b.conv("conv", c, 3, 1, 1, RELU_GAIN)?
                    .group_norm("norm")?
                    .relu()?;
                pool_and_adapt(b)
            }
            ProjectorKind::Conv131 => {
                to_map(b)?;
                let mid = (c / 2).max(1);
                b.conv("reduce", mid, 1, 1, 0, RELU_GAIN)?
                    .group_norm("reduce_norm")?
                    .relu()?;
                b.conv("conv", mid, 3, 1, 1, RELU_GAIN)?
                    .group_norm("norm")?
                    .relu()?;
                b.conv("expand", c, 1, 1, 0, RELU_GAIN)?
                    .group_norm("expand_norm")?
                    .relu()?;
                pool_and_adapt(b)
            }
            ProjectorKind::AttentionBlock => {
                to_map(b)?;
                b.attention("attn")?;
                pool_and_adapt(b)
            }
            ProjectorKind::Linear => {
                b.linear("linear", out_dim, 1.0)?;
                Ok(())
            }
            ProjectorKind::Identity => {
                if pooled_dim(input) != out_dim {
                    return Err(Error::DimensionMismatch {
                        left: "identity projector input".into(),
                        left_dim: pooled_dim(input),
                        right: "identity projector output".into(),
                        right_dim: out_dim,
                    });
                }
                match input.len() {
                    1 => {}
                    3 => {
                        b.global_avg_pool()?;
                    }
                    _ => {
                        b.flatten()?;
                    }
                }
                Ok(())
            }
            ProjectorKind::BottleneckAdapter => {
                if input.len() != 1 {
                    b.flatten()?;
                }
                let hidden = (in_dim / 8).clamp(1, 64);
                b.residual("adapter", |r| {
                    r.linear("down", hidden, RELU_GAIN)?.relu()?;
                    r.linear("up", in_dim, 0.1)?;
                    Ok(())
                })?;
                if in_dim != out_dim {
                    b.linear("out", out_dim, 1.0)?;
                }
                Ok(())
            }
        }
    })
}

/// Builds a trainable projector mapping features of per-sample shape `input`
/// (a `[C, H, W]` map or a `[D]` vector) to `out_dim` features. Map kinds end
/// in global average pooling and, when the channel count differs from
/// `out_dim`, a linear adapter.
pub fn build_projector<T: Real>(
    kind: ProjectorKind,
    input: &[usize],
    out_dim: usize,
    seed: u64,
) -> Result<ParamModule<T>> {
    build_projector_module("projector", kind, input, out_dim, seed)
}

/// A single affine classification layer: `weight [K x D]`, `bias [K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    module: ParamModule<T>,
    feature_dim: usize,
    num_classes: usize,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(name: &str, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let module = ArchSpec::Head {
            feature_dim,
            num_classes,
        }
        .build(name, seed)?;
        Ok(Self {
            module,
            feature_dim,
            num_classes,
        })
    }

    /// Wraps a module built from an [`ArchSpec::Head`], e.g. one loaded from
    /// a checkpoint.
    pub fn from_module(module: ParamModule<T>) -> Result<Self> {
        match *module.arch() {
            ArchSpec::Head {
                feature_dim,
                num_classes,
            } => Ok(Self {
                module,
                feature_dim,
                num_classes,
            }),
            _ => Err(Error::InvalidConfig(alloc::format!(
                "module `{}` is not a classifier head",
                module.name()
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weight(&self) -> &[T] {
        &self.module.params()[0].value
    }

    pub fn bias(&self) -> &[T] {
        &self.module.params()[1].value
    }

    /// Sets weight (`[K x D]` row-major) and bias.
    pub fn set(&mut self, weight: &[T], bias: &[T]) -> Result<()> {
        self.module
            .load_values(vec![weight.to_vec(), bias.to_vec()])
    }

    pub fn module(&self) -> &ParamModule<T> {
        &self.module
    }

    pub fn module_mut(&mut self) -> &mut ParamModule<T> {
        &mut self.module
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.module.forward(features)
    }

    pub fn checksum(&self) -> String {
        self.module.checksum()
    }
}

/// Copies `src`'s parameters into `dst`. The two heads share no storage
/// afterwards.
pub fn transfer_classifier<T: Real>(
    src: &ClassifierHead<T>,
    dst: &mut ClassifierHead<T>,
) -> Result<()> {
    if src.feature_dim != dst.feature_dim || src.num_classes != dst.num_classes {
        return Err(Error::ShapeMismatch(alloc::format!(
            "cannot copy a {}x{} head into a {}x{} head",
            src.num_classes,
            src.feature_dim,
            dst.num_classes,
            dst.feature_dim
        )));
    }
    let values = src
        .module
        .params()
        .iter()
        .map(|p| p.value.clone())
        .collect();
    dst.module.load_values(values)
}

/// `head ∘ projector ∘ extractor` with the extractor frozen for the lifetime
/// of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPipeline<T> {
    extractor: ParamModule<T>,
    projector: ParamModule<T>,
    head: ClassifierHead<T>,
}

pub fn compose_teacher<T: Real>(
    extractor: ParamModule<T>,
    projector: ParamModule<T>,
    head: ClassifierHead<T>,
) -> Result<TeacherPipeline<T>> {
    if !extractor.is_frozen() {
        return Err(Error::NotFrozen(extractor.name().to_string()));
    }
    if projector.input_shape() != extractor.output_shape() {
        return Err(Error::DimensionMismatch {
            left: alloc::format!("extractor `{}` output", extractor.name()),
            left_dim: extractor.output_dim(),
            right: alloc::format!("projector `{}` input", projector.name()),
            right_dim: projector.input_dim(),
        });
    }
    if projector.output_shape() != [head.feature_dim()] {
        return Err(Error::DimensionMismatch {
            left: alloc::format!("projector `{}` output", projector.name()),
            left_dim: projector.output_dim(),
            right: alloc::format!("head `{}` input", head.module().name()),
            right_dim: head.feature_dim(),
        });
    }
    Ok(TeacherPipeline {
        extractor,
        projector,
        head,
    })
}

impl<T: Real> TeacherPipeline<T> {
    pub fn extractor(&self) -> &ParamModule<T> {
        &self.extractor
    }

    pub fn projector(&self) -> &ParamModule<T> {
        &self.projector
    }

    pub fn head(&self) -> &ClassifierHead<T> {
        &self.head
    }

    /// Mutable access to the trainable stages only.
    pub fn trainable_mut(&mut self) -> (&mut ParamModule<T>, &mut ClassifierHead<T>) {
        (&mut self.projector, &mut self.head)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Freezes projector and head (the extractor already is).
    pub fn freeze_all(&mut self) {
        self.projector.freeze();
        self.head.module_mut().freeze();
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.extractor.is_frozen() && self.projector.is_frozen() && self.head.module().is_frozen()
    }

    /// Logits for a batch of inputs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.extractor.forward(x)?;
        self.logits_from_extracted(&f)
    }

    /// Logits from precomputed extractor outputs.
    pub fn logits_from_extracted(&self, extracted: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.projector.forward(extracted)?;
        self.head.forward(&z)
    }

    /// Projector outputs (the proxy space) for a batch of inputs.
    pub fn proxy_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.projector.forward(&self.extractor.forward(x)?)
    }

    /// Checksums of (extractor, projector, head).
    pub fn checksums(&self) -> [String; 3] {
        [
            self.extractor.checksum(),
            self.projector.checksum(),
            self.head.checksum(),
        ]
    }
}

/// A student: extractor followed by a classifier head of matching width.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    extractor: ParamModule<T>,
    head: ClassifierHead<T>,
}

impl<T: Real> StudentModel<T> {
    pub fn new(extractor: ParamModule<T>, head: ClassifierHead<T>) -> Result<Self> {
        if extractor.output_shape() != [head.feature_dim()] {
            return Err(Error::DimensionMismatch {
                left: alloc::format!("student extractor `{}` output", extractor.name()),
                left_dim: extractor.output_dim(),
                right: alloc::format!("head `{}` input", head.module().name()),
                right_dim: head.feature_dim(),
            });
        }
        Ok(Self { extractor, head })
    }

    /// Fresh student of the given family, initialized from `seed`.
    pub fn init(
        kind: StudentKind,
        input: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let extractor = ArchSpec::Student { kind, input }.build("student.extractor", seed)?;
        let head = ClassifierHead::new("student.head", kind.feature_dim(), num_classes, seed)?;
        Self::new(extractor, head)
    }

    pub fn extractor(&self) -> &ParamModule<T> {
        &self.extractor
    }

    pub fn head(&self) -> &ClassifierHead<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ClassifierHead<T> {
        &mut self.head
    }

    pub fn parts_mut(&mut self) -> (&mut ParamModule<T>, &mut ClassifierHead<T>) {
        (&mut self.extractor, &mut self.head)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.forward(&self.extractor.forward(x)?)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }
}
