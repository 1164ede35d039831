//! Network building blocks and the assembled detector.
//!
//! The backbone is a ResNet-18 layout whose 3x3 convolutions are asymmetric
//! convolution blocks: parallel 3x3, 1x3 and 3x1 branches that sum at train
//! time and collapse into a single 3x3 kernel for inference. All four stage
//! outputs are brought to the finest resolution (1/4 of the input), stacked,
//! re-weighted per channel by a squeeze-and-excitation gate, reduced by a
//! 1x1 convolution, and fed to three heads (heatmap, size, offset).

use serde::{Deserialize, Serialize};

use crate::codec::HeadMaps;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{
    concat_channels, conv2d, conv2d_padded, global_avg_pool, linear, maxpool2d, relu, sigmoid,
    upsample_nearest, Tensor,
};

/// Downsampling between the input image and the head maps.
pub const MODEL_STRIDE: usize = 4;

/// Input extents must be multiples of this (head stride times the extra
/// factor 8 of the three strided stages).
pub const INPUT_MULTIPLE: usize = 32;

/// Heatmap head output bias at initialization: `sigmoid(-2.19) ~ 0.1`.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Channel layout of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Output widths of the four residual stages.
    pub widths: [usize; 4],
    pub se_reduction: usize,
    /// Width after the 1x1 reduction of the fused pyramid.
    pub fused_width: usize,
    pub head_width: usize,
}

impl Architecture {
    /// ResNet-18 widths with the given class count.
    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            num_classes,
            in_channels: 3,
            widths: [64, 128, 256, 512],
            se_reduction: 16,
            fused_width: 64,
            head_width: 64,
        }
    }

    pub fn pyramid_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.in_channels == 0
            || self.widths.contains(&0)
            || self.se_reduction == 0
            || self.fused_width == 0
            || self.head_width == 0
        {
            return Err(Error::invalid("Architecture", "all widths must be positive"));
        }
        if !self.pyramid_channels().is_multiple_of(self.se_reduction) {
            return Err(Error::invalid(
                "Architecture",
                format!(
                    "pyramid width {} not divisible by SE reduction {}",
                    self.pyramid_channels(),
                    self.se_reduction
                ),
            ));
        }
        Ok(())
    }
}

/// A convolution's kernel and bias. Stride and padding come from where the
/// layer sits in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    fn init(rng: &mut SplitMix64, cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        Self {
            kernel: init_uniform(rng, &[cout, cin, kh, kw]),
            bias: vec![0.0; cout],
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in being the product
/// of all extents after the first.
fn init_uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut stream = rng.fork();
    Tensor::from_fn(shape, |_| stream.uniform(-bound, bound))
}

/// Train-time parameters of an asymmetric convolution block.
#[derive(Debug, Clone, PartialEq)]
pub struct AcBlockParams {
    pub k3x3: Tensor,
    pub k1x3: Tensor,
    pub k3x1: Tensor,
    pub b3x3: Vec<f64>,
    pub b1x3: Vec<f64>,
    pub b3x1: Vec<f64>,
}

impl AcBlockParams {
    pub fn new(
        k3x3: Tensor,
        k1x3: Tensor,
        k3x1: Tensor,
        b3x3: Vec<f64>,
        b1x3: Vec<f64>,
        b3x1: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            k3x3,
            k1x3,
            k3x1,
            b3x3,
            b1x3,
            b3x1,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let [cout, cin, 3, 3] = self.k3x3.shape()[..] else {
            return Err(Error::shape("AcBlockParams", format!("k3x3 is {:?}", self.k3x3.shape())));
        };
        if self.k1x3.shape() != [cout, cin, 1, 3] || self.k3x1.shape() != [cout, cin, 3, 1] {
            return Err(Error::shape(
                "AcBlockParams",
                format!(
                    "branches {:?}, {:?}, {:?} disagree on channels",
                    self.k3x3.shape(),
                    self.k1x3.shape(),
                    self.k3x1.shape()
                ),
            ));
        }
        if [&self.b3x3, &self.b1x3, &self.b3x1].iter().any(|b| b.len() != cout) {
            return Err(Error::shape("AcBlockParams", format!("biases must have {cout} entries")));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.k3x3.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.k3x3.shape()[0]
    }

    fn init(rng: &mut SplitMix64, cout: usize, cin: usize) -> Self {
        Self {
            k3x3: init_uniform(rng, &[cout, cin, 3, 3]),
            k1x3: init_uniform(rng, &[cout, cin, 1, 3]),
            k3x1: init_uniform(rng, &[cout, cin, 3, 1]),
            b3x3: vec![0.0; cout],
            b1x3: vec![0.0; cout],
            b3x1: vec![0.0; cout],
        }
    }
}

/// Sum of the three branch convolutions. Branch padding keeps all outputs
/// aligned: (1,1) for 3x3, (0,1) for 1x3, (1,0) for 3x1.
pub fn ac_block_forward_train(x: &Tensor, p: &AcBlockParams, stride: usize) -> Result<Tensor> {
    p.check()?;
    let square = conv2d_padded(x, &p.k3x3, &p.b3x3, stride, (1, 1))?;
    let horizontal = conv2d_padded(x, &p.k1x3, &p.b1x3, stride, (0, 1))?;
    let vertical = conv2d_padded(x, &p.k3x1, &p.b3x1, stride, (1, 0))?;
    square.add(&horizontal)?.add(&vertical)
}

/// Folds the three branches into one 3x3 kernel: the 1x3 kernel lands on the
/// middle row, the 3x1 kernel on the middle column, and the biases add.
pub fn ac_fuse(p: &AcBlockParams) -> ConvLayer {
    let (cout, cin) = (p.out_channels(), p.in_channels());
    let mut kernel = p.k3x3.clone();
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..3 {
                let row = kernel.get(&[o, i, 1, t]) + p.k1x3.get(&[o, i, 0, t]);
                kernel.set(&[o, i, 1, t], row);
                let col = kernel.get(&[o, i, t, 1]) + p.k3x1.get(&[o, i, t, 0]);
                kernel.set(&[o, i, t, 1], col);
            }
        }
    }
    let bias = (0..cout).map(|o| p.b3x3[o] + p.b1x3[o] + p.b3x1[o]).collect();
    ConvLayer { kernel, bias }
}

pub fn ac_block_forward_fused(x: &Tensor, fused: &ConvLayer, stride: usize) -> Result<Tensor> {
    conv2d(x, &fused.kernel, &fused.bias, stride, 1)
}

/// An asymmetric block in either of its two equivalent forms.
#[derive(Debug, Clone, PartialEq)]
pub enum AcBlock {
    Train(AcBlockParams),
    Fused(ConvLayer),
}

impl AcBlock {
    pub fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        match self {
            AcBlock::Train(p) => ac_block_forward_train(x, p, stride),
            AcBlock::Fused(f) => ac_block_forward_fused(x, f, stride),
        }
    }

    pub fn fused(&self) -> ConvLayer {
        match self {
            AcBlock::Train(p) => ac_fuse(p),
            AcBlock::Fused(f) => f.clone(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            AcBlock::Train(p) => p.in_channels(),
            AcBlock::Fused(f) => f.kernel.shape()[1],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            AcBlock::Train(p) => p.out_channels(),
            AcBlock::Fused(f) => f.out_channels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    pub first: AcBlock,
    pub second: AcBlock,
    /// 1x1 strided shortcut; required whenever stride or width changes.
    pub projection: Option<ConvLayer>,
    pub stride: usize,
}

/// `relu(shortcut(x) + second(relu(first(x))))`.
pub fn residual_block(x: &Tensor, p: &ResidualParams) -> Result<Tensor> {
    let (cin, _, _) = x.dims3()?;
    let needs_projection = p.stride != 1 || cin != p.second.out_channels();
    let shortcut = match (&p.projection, needs_projection) {
        (Some(proj), _) => conv2d(x, &proj.kernel, &proj.bias, p.stride, 0)?,
        (None, false) => x.clone(),
        (None, true) => {
            return Err(Error::invalid(
                "residual_block",
                format!(
                    "stride {} with {cin} -> {} channels needs a projection shortcut",
                    p.stride,
                    p.second.out_channels()
                ),
            ))
        }
    };
    let inner = relu(&p.first.forward(x, p.stride)?);
    let branch = p.second.forward(&inner, 1)?;
    Ok(relu(&branch.add(&shortcut)?))
}

/// Squeeze-and-excitation parameters: `C -> C/r -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    pub reduce: Tensor,
    pub reduce_bias: Vec<f64>,
    pub expand: Tensor,
    pub expand_bias: Vec<f64>,
}

impl SeParams {
    pub fn channels(&self) -> usize {
        self.expand.shape()[0]
    }

    fn init(rng: &mut SplitMix64, channels: usize, reduction: usize) -> Self {
        let mid = channels / reduction;
        Self {
            reduce: init_uniform(rng, &[mid, channels]),
            reduce_bias: vec![0.0; mid],
            expand: init_uniform(rng, &[channels, mid]),
            expand_bias: vec![0.0; channels],
        }
    }
}

/// Per-channel gate `sigmoid(expand(relu(reduce(mean(x)))))`, each in (0, 1).
pub fn se_gate(x: &Tensor, p: &SeParams) -> Result<Vec<f64>> {
    let (c, _, _) = x.dims3()?;
    if c != p.channels() {
        return Err(Error::shape(
            "se_block",
            format!("input {:?} vs excitation weights {:?}", x.shape(), p.expand.shape()),
        ));
    }
    let squeezed = global_avg_pool(x)?;
    let hidden: Vec<f64> = linear(&squeezed, &p.reduce, &p.reduce_bias)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let logits = linear(&hidden, &p.expand, &p.expand_bias)?;
    Ok(logits.into_iter().map(crate::tensor::logistic).collect())
}

/// Scales every channel of `x` by its excitation gate.
pub fn se_block(x: &Tensor, p: &SeParams) -> Result<Tensor> {
    let gate = se_gate(x, p)?;
    let mut out = x.clone();
    for (c, g) in gate.into_iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// Fuses pyramid levels into one map at the finest level's resolution.
///
/// `levels` are given in backbone order (finest first). Each is upsampled
/// by nearest neighbor to the finest extent, the stack is concatenated
/// deepest first, gated by SE, then reduced by the 1x1 convolution.
pub fn fpa_fuse(levels: &[Tensor], se: &SeParams, reduce: &ConvLayer) -> Result<Tensor> {
    let first = levels
        .first()
        .ok_or_else(|| Error::invalid("fpa_fuse", "no pyramid levels"))?;
    let (_, mut th, mut tw) = first.dims3()?;
    for l in levels {
        let (_, h, w) = l.dims3()?;
        th = th.max(h);
        tw = tw.max(w);
    }
    let mut resized = Vec::with_capacity(levels.len());
    for l in levels.iter().rev() {
        let (_, h, w) = l.dims3()?;
        if th % h != 0 || tw % w != 0 || th / h != tw / w {
            return Err(Error::invalid(
                "fpa_fuse",
                format!("level {h}x{w} does not divide {th}x{tw} by one integer factor"),
            ));
        }
        resized.push(upsample_nearest(l, th / h)?);
    }
    let stacked = concat_channels(&resized.iter().collect::<Vec<_>>())?;
    let gated = se_block(&stacked, se)?;
    conv2d(&gated, &reduce.kernel, &reduce.bias, 1, 0)
}

/// One prediction branch: 3x3 conv, relu, 1x1 conv.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: ConvLayer,
    pub out: ConvLayer,
}

impl HeadParams {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = relu(&conv2d(x, &self.hidden.kernel, &self.hidden.bias, 1, 1)?);
        conv2d(&h, &self.out.kernel, &self.out.bias, 1, 0)
    }

    fn init(rng: &mut SplitMix64, cin: usize, width: usize, cout: usize) -> Self {
        Self {
            hidden: ConvLayer::init(rng, width, cin, 3, 3),
            out: ConvLayer::init(rng, cout, width, 1, 1),
        }
    }
}

/// Every parameter of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// 3x3 stride-2 convolution, followed by relu and 2x2 stride-2 max pool.
    pub stem: ConvLayer,
    /// Four stages of two residual blocks each.
    pub stages: Vec<Vec<ResidualParams>>,
    pub se: SeParams,
    pub reduce: ConvLayer,
    pub heatmap: HeadParams,
    pub wh: HeadParams,
    pub offset: HeadParams,
}

/// Stride of block `block` in stage `stage` (both zero-based).
pub fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 0 && block == 0 {
        2
    } else {
        1
    }
}

impl ModelParams {
    /// Train-form parameters drawn from the seeded uniform scheme: every
    /// kernel uniform in `+-1/sqrt(fan_in)`, biases zero, except the heatmap
    /// output bias which starts at [`HEATMAP_PRIOR_BIAS`].
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SplitMix64::new(seed);
        let stem = ConvLayer::init(&mut rng, arch.widths[0], arch.in_channels, 3, 3);
        let mut stages = Vec::with_capacity(4);
        let mut cin = arch.widths[0];
        for (s, &width) in arch.widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(2);
            for b in 0..2 {
                let stride = block_stride(s, b);
                let projection = (stride != 1 || cin != width)
                    .then(|| ConvLayer::init(&mut rng, width, cin, 1, 1));
                blocks.push(ResidualParams {
                    first: AcBlock::Train(AcBlockParams::init(&mut rng, width, cin)),
                    second: AcBlock::Train(AcBlockParams::init(&mut rng, width, width)),
                    projection,
                    stride,
                });
                cin = width;
            }
            stages.push(blocks);
        }
        let pyramid = arch.pyramid_channels();
        let se = SeParams::init(&mut rng, pyramid, arch.se_reduction);
        let reduce = ConvLayer::init(&mut rng, arch.fused_width, pyramid, 1, 1);
        let mut heatmap = HeadParams::init(&mut rng, arch.fused_width, arch.head_width, arch.num_classes);
        heatmap.out.bias.fill(HEATMAP_PRIOR_BIAS);
        let wh = HeadParams::init(&mut rng, arch.fused_width, arch.head_width, 2);
        let offset = HeadParams::init(&mut rng, arch.fused_width, arch.head_width, 2);
        Ok(Self {
            arch: arch.clone(),
            stem,
            stages,
            se,
            reduce,
            heatmap,
            wh,
            offset,
        })
    }

    /// Replaces every asymmetric block by its fused 3x3 equivalent.
    pub fn fused(&self) -> Self {
        let mut out = self.clone();
        for block in out.stages.iter_mut().flatten() {
            block.first = AcBlock::Fused(block.first.fused());
            block.second = AcBlock::Fused(block.second.fused());
        }
        out
    }

    pub fn is_fused(&self) -> bool {
        self.stages
            .iter()
            .flatten()
            .all(|b| matches!((&b.first, &b.second), (AcBlock::Fused(_), AcBlock::Fused(_))))
    }
}

/// Runs the detector on a `[3,H,W]` image. The heatmap is passed through a
/// sigmoid; size and offset maps are raw. All three are `H/4 x W/4`.
pub fn model_forward(image: &Tensor, params: &ModelParams) -> Result<HeadMaps> {
    let (c, h, w) = image.dims3()?;
    if c != params.arch.in_channels {
        return Err(Error::shape(
            "model_forward",
            format!("image {:?} vs {} input channels", image.shape(), params.arch.in_channels),
        ));
    }
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::invalid(
            "model_forward",
            format!("input {h}x{w} must be a multiple of {INPUT_MULTIPLE} on both axes"),
        ));
    }
    let stem = relu(&conv2d(image, &params.stem.kernel, &params.stem.bias, 2, 1)?);
    let mut x = maxpool2d(&stem, 2, 2, 0)?;
    let mut levels = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        for block in stage {
            x = residual_block(&x, block)?;
        }
        levels.push(x.clone());
    }
    let fused = relu(&fpa_fuse(&levels, &params.se, &params.reduce)?);
    Ok(HeadMaps {
        heatmap: sigmoid(&params.heatmap.forward(&fused)?),
        wh: params.wh.forward(&fused)?,
        offset: params.offset.forward(&fused)?,
    })
}
