//! Bottleneck residual blocks whose 3×3 layer is either an ADC layer or a
//! fixed-rate dilated convolution, and the small heatmap network built from
//! them.
//!
//! Both variants draw every shared weight from the same seeded stream, and
//! DRM parameters from a separate one, so an ADC net and its fixed-rate
//! baseline built from the same seed start with identical shared weights.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adc::{AdcParams, KernelPath};
use crate::drm::{check_groups, hidden_width, DilationRates, DrmParams};
use crate::error::{AdcError, Result};
use crate::reference::ConvSpec;
use crate::tape::{AdcNodes, NodeId, Tape};
use crate::tensor::{shape_err, Matrix, Tensor4};

/// Stream used for DRM parameters, kept apart from the shared weights.
const DRM_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpatialKind {
    Adc { groups: usize },
    Fixed { rate: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub bottleneck: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub spatial: SpatialKind,
    pub path: KernelPath,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 8,
            bottleneck: 4,
            blocks: 4,
            kernel: 3,
            spatial: SpatialKind::Adc { groups: 4 },
            path: KernelPath::Blocked,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        crate::reference::check_kernel(self.kernel)?;
        if self.width == 0 || self.bottleneck == 0 {
            return Err(AdcError::Config("width and bottleneck must be positive".into()));
        }
        match self.spatial {
            SpatialKind::Adc { groups } => check_groups(self.bottleneck, groups),
            SpatialKind::Fixed { rate } if rate == 0 => Err(AdcError::BadRate(0.0)),
            SpatialKind::Fixed { .. } => Ok(()),
        }
    }

    /// Same network with the 3×3 layer swapped for a fixed-rate convolution.
    pub fn baseline(&self, rate: usize) -> Self {
        Self {
            spatial: SpatialKind::Fixed { rate },
            ..self.clone()
        }
    }
}

/// Per-channel scale and shift, standing in for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Affine {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpatialConv {
    Adc(AdcParams),
    Fixed { weight: Tensor4, rate: usize },
}

impl SpatialConv {
    pub fn weight(&self) -> &Tensor4 {
        match self {
            SpatialConv::Adc(p) => &p.weight,
            SpatialConv::Fixed { weight, .. } => weight,
        }
    }
}

fn he_uniform(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
    let fan_in = dims[1] * dims[2] * dims[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor4::random_uniform(dims, -bound, bound, rng)
}

fn spec_of(weight: &Tensor4, rate: usize) -> Result<ConvSpec> {
    let [c_out, c_in, k, _] = weight.dims();
    ConvSpec::new(k, rate, c_in, c_out)
}

/// `y = x + A3(conv3(relu(A2(spatial(relu(A1(conv1(x))))))))`
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock {
    pub conv1: Tensor4,
    pub affine1: Affine,
    pub spatial: SpatialConv,
    pub affine2: Affine,
    pub conv3: Tensor4,
    pub affine3: Affine,
}

/// Nodes created by [`BottleneckBlock::build`].
#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub output: NodeId,
    pub params: Vec<NodeId>,
    pub adc: Option<NodeId>,
}

impl BottleneckBlock {
    pub fn new(
        width: usize,
        bottleneck: usize,
        kernel: usize,
        spatial: SpatialKind,
        shared: &mut impl Rng,
        drm: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = he_uniform([bottleneck, width, 1, 1], shared);
        let weight = he_uniform([bottleneck, bottleneck, kernel, kernel], shared);
        let conv3 = he_uniform([width, bottleneck, 1, 1], shared);
        let spatial = match spatial {
            SpatialKind::Adc { groups } => SpatialConv::Adc(AdcParams {
                weight,
                drm: DrmParams::new(bottleneck, groups, drm)?,
            }),
            SpatialKind::Fixed { rate } => SpatialConv::Fixed { weight, rate },
        };
        Ok(Self {
            conv1,
            affine1: Affine::identity(bottleneck),
            spatial,
            affine2: Affine::identity(bottleneck),
            conv3,
            affine3: Affine::identity(width),
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.dims()[1]
    }

    pub fn build(&self, tape: &mut Tape, x: NodeId, path: KernelPath) -> Result<BlockNodes> {
        let channels = tape.value(x)?.as_tensor()?.channels();
        if channels != self.channels() {
            return Err(shape_err("block input channels", channels, self.conv1.dims()));
        }
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, v: crate::tape::Value| {
            let id = tape.leaf(v);
            params.push(id);
            id
        };
        let c1 = leaf(tape, self.conv1.clone().into());
        let s1 = leaf(tape, self.affine1.scale.clone().into());
        let t1 = leaf(tape, self.affine1.shift.clone().into());
        let h = tape.conv(x, c1, spec_of(&self.conv1, 1)?)?;
        let h = tape.affine(h, s1, t1)?;
        let h = tape.relu(h)?;
        let (h, adc) = match &self.spatial {
            SpatialConv::Adc(p) => {
                let nodes = AdcNodes::register(tape, p);
                params.extend([nodes.weight, nodes.w1, nodes.b1, nodes.w2, nodes.b2]);
                let id = tape.adc(h, &nodes, path)?;
                (id, Some(id))
            }
            SpatialConv::Fixed { weight, rate } => {
                let w = tape.leaf(weight.clone());
                params.push(w);
                (tape.conv(h, w, spec_of(weight, *rate)?)?, None)
            }
        };
        let mut leaf = |tape: &mut Tape, v: crate::tape::Value| {
            let id = tape.leaf(v);
            params.push(id);
            id
        };
        let s2 = leaf(tape, self.affine2.scale.clone().into());
        let t2 = leaf(tape, self.affine2.shift.clone().into());
        let c3 = leaf(tape, self.conv3.clone().into());
        let s3 = leaf(tape, self.affine3.scale.clone().into());
        let t3 = leaf(tape, self.affine3.shift.clone().into());
        let h = tape.affine(h, s2, t2)?;
        let h = tape.relu(h)?;
        let h = tape.conv(h, c3, spec_of(&self.conv3, 1)?)?;
        let h = tape.affine(h, s3, t3)?;
        let output = tape.add(x, h)?;
        Ok(BlockNodes { output, params, adc })
    }

    pub fn forward(&self, x: &Tensor4, path: KernelPath) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let nodes = self.build(&mut tape, xn, path)?;
        Ok(tape.value(nodes.output)?.as_tensor()?.clone())
    }

    /// Parameter slices in the same order as [`BottleneckBlock::build`] registers them.
    fn views<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        let mut push = |name: &str, dims: [usize; 4], data: &'a [f64]| {
            out.push(ParamView {
                name: format!("{prefix}.{name}"),
                dims,
                data,
            })
        };
        push("conv1", self.conv1.dims(), self.conv1.data());
        push("affine1.scale", vec_dims(&self.affine1.scale), &self.affine1.scale);
        push("affine1.shift", vec_dims(&self.affine1.shift), &self.affine1.shift);
        match &self.spatial {
            SpatialConv::Adc(p) => {
                push("adc.weight", p.weight.dims(), p.weight.data());
                push("adc.drm.w1", mat_dims(&p.drm.w1), p.drm.w1.data());
                push("adc.drm.b1", vec_dims(&p.drm.b1), &p.drm.b1);
                push("adc.drm.w2", mat_dims(&p.drm.w2), p.drm.w2.data());
                push("adc.drm.b2", vec_dims(&p.drm.b2), &p.drm.b2);
            }
            SpatialConv::Fixed { weight, .. } => push("conv2", weight.dims(), weight.data()),
        }
        push("affine2.scale", vec_dims(&self.affine2.scale), &self.affine2.scale);
        push("affine2.shift", vec_dims(&self.affine2.shift), &self.affine2.shift);
        push("conv3", self.conv3.dims(), self.conv3.data());
        push("affine3.scale", vec_dims(&self.affine3.scale), &self.affine3.scale);
        push("affine3.shift", vec_dims(&self.affine3.shift), &self.affine3.shift);
    }

    fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.conv1.data_mut());
        out.push(&mut self.affine1.scale);
        out.push(&mut self.affine1.shift);
        match &mut self.spatial {
            SpatialConv::Adc(p) => {
                out.push(p.weight.data_mut());
                out.push(p.drm.w1.data_mut());
                out.push(&mut p.drm.b1);
                out.push(p.drm.w2.data_mut());
                out.push(&mut p.drm.b2);
            }
            SpatialConv::Fixed { weight, .. } => out.push(weight.data_mut()),
        }
        out.push(&mut self.affine2.scale);
        out.push(&mut self.affine2.shift);
        out.push(self.conv3.data_mut());
        out.push(&mut self.affine3.scale);
        out.push(&mut self.affine3.shift);
    }

    pub fn param_views(&self, prefix: &str) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.views(prefix, &mut out);
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_views("").iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let mut slices = Vec::new();
        self.slices_mut(&mut slices);
        let total: usize = slices.iter().map(|s| s.len()).sum();
        if values.len() != total {
            return Err(shape_err("set_flat_params", values.len(), total));
        }
        let mut offset = 0;
        for slice in slices {
            let n = slice.len();
            slice.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn drm_param_count(&self) -> usize {
        match &self.spatial {
            SpatialConv::Adc(p) => p.drm.param_count(),
            SpatialConv::Fixed { .. } => 0,
        }
    }
}

fn vec_dims(v: &[f64]) -> [usize; 4] {
    [1, 1, 1, v.len()]
}

fn mat_dims(m: &Matrix) -> [usize; 4] {
    [1, 1, m.rows(), m.cols()]
}

/// A named, shaped, read-only view of one parameter array.
#[derive(Clone, Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub dims: [usize; 4],
    pub data: &'a [f64],
}

/// Stem 3×3 conv, a stack of bottleneck blocks, and a 1×1 head to one
/// heatmap channel. Spatial size is preserved throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPoseNet {
    pub config: NetConfig,
    pub seed: u64,
    pub stem: Tensor4,
    pub stem_affine: Affine,
    pub blocks: Vec<BottleneckBlock>,
    pub head: Tensor4,
    pub head_affine: Affine,
}

/// Nodes created by [`ToyPoseNet::build`].
#[derive(Clone, Debug)]
pub struct NetNodes {
    pub output: NodeId,
    pub params: Vec<NodeId>,
    /// One entry per block; `None` for fixed-rate blocks.
    pub adc: Vec<Option<NodeId>>,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub heatmap: Tensor4,
    pub rates: Vec<Option<DilationRates>>,
}

impl ToyPoseNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut shared = ChaCha8Rng::seed_from_u64(seed);
        let mut drm = ChaCha8Rng::seed_from_u64(seed);
        drm.set_stream(DRM_STREAM);
        let stem = he_uniform([config.width, 1, 3, 3], &mut shared);
        let blocks = (0..config.blocks)
            .map(|_| {
                BottleneckBlock::new(
                    config.width,
                    config.bottleneck,
                    config.kernel,
                    config.spatial,
                    &mut shared,
                    &mut drm,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let bound = (1.0 / config.width as f64).sqrt();
        let head = Tensor4::random_uniform([1, config.width, 1, 1], -bound, bound, &mut shared);
        Ok(Self {
            stem_affine: Affine::identity(config.width),
            head_affine: Affine::identity(1),
            config,
            seed,
            stem,
            blocks,
            head,
        })
    }

    pub fn build(&self, tape: &mut Tape, image: NodeId) -> Result<NetNodes> {
        let mut params = Vec::new();
        let stem = tape.leaf(self.stem.clone());
        let ss = tape.leaf(self.stem_affine.scale.clone());
        let st = tape.leaf(self.stem_affine.shift.clone());
        params.extend([stem, ss, st]);
        let h = tape.conv(image, stem, spec_of(&self.stem, 1)?)?;
        let h = tape.affine(h, ss, st)?;
        let mut h = tape.relu(h)?;
        let mut adc = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let nodes = block.build(tape, h, self.config.path)?;
            params.extend(nodes.params);
            adc.push(nodes.adc);
            h = nodes.output;
        }
        let head = tape.leaf(self.head.clone());
        let hs = tape.leaf(self.head_affine.scale.clone());
        let ht = tape.leaf(self.head_affine.shift.clone());
        params.extend([head, hs, ht]);
        let out = tape.conv(h, head, spec_of(&self.head, 1)?)?;
        let output = tape.affine(out, hs, ht)?;
        Ok(NetNodes { output, params, adc })
    }

    pub fn forward(&self, image: &Tensor4) -> Result<NetOutput> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let nodes = self.build(&mut tape, x)?;
        Ok(NetOutput {
            heatmap: tape.value(nodes.output)?.as_tensor()?.clone(),
            rates: nodes.adc.iter().map(|id| id.and_then(|id| tape.adc_rates(id).cloned())).collect(),
        })
    }

    /// MSE loss of one image and the gradient of every parameter, flattened
    /// in [`ToyPoseNet::params`] order.
    pub fn loss_and_grad(&self, image: &Tensor4, target: &Tensor4) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let nodes = self.build(&mut tape, x)?;
        let t = tape.leaf(target.clone());
        let loss = tape.mse(nodes.output, t)?;
        let value = tape.value(loss)?.as_scalar()?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(self.param_count());
        for (&id, view) in nodes.params.iter().zip(self.params()) {
            flat.extend(grads.flat_or_zeros(id, view.data.len()));
        }
        Ok((value, flat))
    }

    /// Mean loss and mean gradient over a batch. Samples are processed
    /// independently and summed in batch order, so the result does not
    /// depend on the thread count.
    pub fn batch_loss_and_grad(&self, images: &[&Tensor4], targets: &[&Tensor4]) -> Result<(f64, Vec<f64>)> {
        if images.len() != targets.len() || images.is_empty() {
            return Err(shape_err("batch", images.len(), targets.len()));
        }
        let parts: Vec<(f64, Vec<f64>)> = images
            .par_iter()
            .zip(targets.par_iter())
            .map(|(x, t)| self.loss_and_grad(x, t))
            .collect::<Result<_>>()?;
        let inv = 1.0 / parts.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.param_count()];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for g in &mut grad {
            *g *= inv;
        }
        Ok((loss * inv, grad))
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        out.push(ParamView {
            name: "stem".into(),
            dims: self.stem.dims(),
            data: self.stem.data(),
        });
        out.push(ParamView {
            name: "stem_affine.scale".into(),
            dims: vec_dims(&self.stem_affine.scale),
            data: &self.stem_affine.scale,
        });
        out.push(ParamView {
            name: "stem_affine.shift".into(),
            dims: vec_dims(&self.stem_affine.shift),
            data: &self.stem_affine.shift,
        });
        for (k, b) in self.blocks.iter().enumerate() {
            b.views(&format!("block{k}"), &mut out);
        }
        out.push(ParamView {
            name: "head".into(),
            dims: self.head.dims(),
            data: self.head.data(),
        });
        out.push(ParamView {
            name: "head_affine.scale".into(),
            dims: vec_dims(&self.head_affine.scale),
            data: &self.head_affine.scale,
        });
        out.push(ParamView {
            name: "head_affine.shift".into(),
            dims: vec_dims(&self.head_affine.shift),
            data: &self.head_affine.shift,
        });
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.stem.data_mut(),
            &mut self.stem_affine.scale,
            &mut self.stem_affine.shift,
        ];
        for b in &mut self.blocks {
            b.slices_mut(&mut out);
        }
        out.push(self.head.data_mut());
        out.push(&mut self.head_affine.scale);
        out.push(&mut self.head_affine.shift);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn drm_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.drm_param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape_err("set_flat_params", values.len(), self.param_count()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdcError::NonFinite("set_flat_params"));
        }
        let mut offset = 0;
        for slice in self.slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Applies `f(param_index, &mut value)` to every parameter.
    pub fn update_params(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut k = 0;
        for slice in self.slices_mut() {
            for v in slice.iter_mut() {
                f(k, v);
                k += 1;
            }
        }
    }

    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let views = self.params();
        let manifest = CheckpointManifest {
            format: "adct-checkpoint-v1".into(),
            seed: self.seed,
            config: self.config.clone(),
            kernel: self.config.kernel,
            groups: match self.config.spatial {
                SpatialKind::Adc { groups } => Some(groups),
                SpatialKind::Fixed { .. } => None,
            },
            hidden: match self.config.spatial {
                SpatialKind::Adc { .. } => Some(hidden_width(self.config.bottleneck)),
                SpatialKind::Fixed { .. } => None,
            },
            params: views
                .iter()
                .map(|v| ParamEntry {
                    name: v.name.clone(),
                    dims: v.dims,
                })
                .collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut out = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        for v in &views {
            Tensor4::new(v.dims, v.data.to_vec())?.write_to(&mut out)?;
        }
        std::io::Write::flush(&mut out)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut net = ToyPoseNet::new(manifest.config.clone(), manifest.seed)?;
        let expected: Vec<ParamEntry> = net
            .params()
            .iter()
            .map(|v| ParamEntry {
                name: v.name.clone(),
                dims: v.dims,
            })
            .collect();
        if expected != manifest.params {
            return Err(AdcError::Format("checkpoint parameter list does not match its config".into()));
        }
        let mut input = BufReader::new(fs::File::open(dir.join("params.bin"))?);
        let mut flat = Vec::with_capacity(net.param_count());
        for entry in &manifest.params {
            let t = Tensor4::read_from(&mut input)?;
            if t.dims() != entry.dims {
                return Err(AdcError::Format(format!("{}: dims {:?} != {:?}", entry.name, t.dims(), entry.dims)));
            }
            flat.extend_from_slice(t.data());
        }
        net.set_flat_params(&flat)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub dims: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub config: NetConfig,
    pub kernel: usize,
    pub groups: Option<usize>,
    pub hidden: Option<usize>,
    pub params: Vec<ParamEntry>,
}
