//! The ten convolutional block kinds and their cost model.
//!
//! Conventions shared by all kinds:
//! - `k×k` convolutions use padding `k/2`, so stride 1 preserves resolution.
//! - With batch normalization enabled, convolutions carry no bias; without
//!   it, every convolution has a bias and normalization layers are skipped.
//! - MAC counts include convolutions and linear layers only. Normalization,
//!   activations, additions and pooling count as zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Mode, NormConfig, NormStats, ParamStore, Rng, Tape, Tensor, Var};

pub const DEFAULT_EXPANSION: usize = 6;

pub fn conv_param_count(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

pub fn conv_macs(cin: usize, cout: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    (k * k * cin * cout) as u64 * (out_hw.0 * out_hw.1) as u64
}

pub fn depthwise_macs(c: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    (k * k * c) as u64 * (out_hw.0 * out_hw.1) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Linear layer, optionally preceded by global average pooling and
    /// followed by ReLU.
    FullyConnected,
    /// 3×3 conv → norm → ReLU.
    Basic,
    /// 3×3 conv → norm → 2×2 max pool → ReLU.
    Pooling,
    /// relu(x + conv→norm→relu→conv→norm (x)).
    Residual,
    /// Residual block whose shortcut is a strided 1×1 conv → norm.
    ResidualProj,
    /// `layers` conv units of `growth` channels, each fed the concatenation
    /// of the block input and all earlier units.
    Dense,
    /// Depthwise 3×3 → norm → ReLU → pointwise 1×1 → norm → ReLU.
    MobileNetV1,
    /// Inverted residual: 1×1 expand → depthwise 3×3 → linear 1×1 project,
    /// with a skip connection when channels match.
    MobileNetV2S1,
    /// Stride-2 inverted residual without skip connection.
    MobileNetV2S2,
    /// Parallel 1×1, 1×1→3×3, 1×1→5×5 and 3×3-max-pool→1×1 branches,
    /// concatenated.
    Inception,
}

impl BlockKind {
    pub const ALL: [BlockKind; 10] = [
        BlockKind::FullyConnected,
        BlockKind::Basic,
        BlockKind::Pooling,
        BlockKind::Residual,
        BlockKind::ResidualProj,
        BlockKind::Dense,
        BlockKind::MobileNetV1,
        BlockKind::MobileNetV2S1,
        BlockKind::MobileNetV2S2,
        BlockKind::Inception,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::FullyConnected => "fc",
            BlockKind::Basic => "basic",
            BlockKind::Pooling => "pooling",
            BlockKind::Residual => "residual",
            BlockKind::ResidualProj => "residual_proj",
            BlockKind::Dense => "dense",
            BlockKind::MobileNetV1 => "mobilenet_v1",
            BlockKind::MobileNetV2S1 => "mobilenet_v2_s1",
            BlockKind::MobileNetV2S2 => "mobilenet_v2_s2",
            BlockKind::Inception => "inception",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown block kind {s:?}")))
    }
}

/// Where a block sits in a network; determines its parameter name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Stem,
    Body(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// MobileNetV2 hidden width multiplier.
    pub expansion: usize,
    /// Dense growth rate and unit count.
    pub growth: usize,
    pub layers: usize,
    /// Inception branch widths; `None` means four equal quarters.
    pub branch_widths: Option<[usize; 4]>,
    pub batchnorm: bool,
    /// FullyConnected only: global-average-pool spatial input first.
    pub pool: bool,
    /// FullyConnected only: ReLU after the linear layer.
    pub relu: bool,
    pub index: usize,
    pub stage: Stage,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let (growth, layers) = if kind == BlockKind::Dense {
            let layers = 2;
            (out_channels.saturating_sub(in_channels) / layers, layers)
        } else {
            (0, 0)
        };
        Self {
            kind,
            in_channels,
            out_channels,
            stride,
            expansion: DEFAULT_EXPANSION,
            growth,
            layers,
            branch_widths: None,
            batchnorm: true,
            pool: kind == BlockKind::FullyConnected,
            relu: false,
            index: 0,
            stage: Stage::Body(0),
        }
    }

    pub fn dense(in_channels: usize, growth: usize, layers: usize) -> Self {
        let mut s = Self::new(BlockKind::Dense, in_channels, in_channels + growth * layers, 1);
        s.growth = growth;
        s.layers = layers;
        s
    }

    pub fn at(mut self, index: usize, stage: Stage) -> Self {
        self.index = index;
        self.stage = stage;
        self
    }

    pub fn without_batchnorm(mut self) -> Self {
        self.batchnorm = false;
        self
    }

    /// Parameter name prefix, e.g. `stage1.block6`.
    pub fn prefix(&self) -> String {
        match self.stage {
            Stage::Stem => "stem".to_string(),
            Stage::Head => "head".to_string(),
            Stage::Body(s) => format!("stage{s}.block{}", self.index),
        }
    }

    pub fn inception_widths(&self) -> [usize; 4] {
        self.branch_widths.unwrap_or([self.out_channels / 4; 4])
    }

    fn hidden(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(format!("{} block: {msg}", self.kind)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.stride == 0 {
            return fail("stride must be positive".into());
        }
        match self.kind {
            BlockKind::FullyConnected if self.stride != 1 => fail("stride must be 1".into()),
            BlockKind::Residual if self.in_channels != self.out_channels || self.stride != 1 => {
                fail(format!(
                    "requires in_channels == out_channels and stride 1, got {}→{} stride {}",
                    self.in_channels, self.out_channels, self.stride
                ))
            }
            BlockKind::ResidualProj
                if self.in_channels == self.out_channels && self.stride == 1 =>
            {
                fail(format!(
                    "requires in_channels != out_channels or stride > 1, got {}→{} stride 1",
                    self.in_channels, self.out_channels
                ))
            }
            BlockKind::Dense => {
                if self.stride != 1 {
                    return fail("stride must be 1".into());
                }
                if self.layers == 0 || self.growth == 0 {
                    return fail("growth rate and layer count must be positive".into());
                }
                if self.out_channels != self.in_channels + self.layers * self.growth {
                    return fail(format!(
                        "out_channels {} != in_channels {} + layers {} * growth {}",
                        self.out_channels, self.in_channels, self.layers, self.growth
                    ));
                }
                Ok(())
            }
            BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 if self.expansion == 0 => {
                fail("expansion must be positive".into())
            }
            BlockKind::MobileNetV2S1 if self.stride != 1 => fail("stride must be 1".into()),
            BlockKind::MobileNetV2S2 if self.stride != 2 => fail("stride must be 2".into()),
            BlockKind::Inception => {
                if self.stride != 1 {
                    return fail("stride must be 1".into());
                }
                let w = self.inception_widths();
                if w.contains(&0) || w.iter().sum::<usize>() != self.out_channels {
                    return fail(format!(
                        "branch widths {w:?} must be positive and sum to out_channels {}",
                        self.out_channels
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape (`[C, H, W]`).
    /// FullyConnected blocks produce `[out_channels]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            [f] if self.kind == BlockKind::FullyConnected && !self.pool => (f, 1, 1),
            ref s => return Err(Error::Dimension(format!("{} block: unexpected input shape {s:?}", self.kind))),
        };
        if self.kind == BlockKind::FullyConnected {
            let features = if self.pool { c } else { c * h * w };
            if features != self.in_channels {
                return Err(Error::Dimension(format!(
                    "fc block expects {} input features, got {features} from {input:?}",
                    self.in_channels
                )));
            }
            return Ok(vec![self.out_channels]);
        }
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "{} block expects {} input channels (dim 1), got {c}",
                self.kind, self.in_channels
            )));
        }
        let strided = |x: usize| (x - 1) / self.stride + 1;
        let (ho, wo) = match self.kind {
            BlockKind::Pooling => (strided(h) / 2, strided(w) / 2),
            _ => (strided(h), strided(w)),
        };
        if ho == 0 || wo == 0 {
            return Err(Error::Dimension(format!(
                "{} block reduces {h}×{w} input to an empty map",
                self.kind
            )));
        }
        Ok(vec![self.out_channels, ho, wo])
    }

    /// True iff the output shape equals the input shape for every input.
    pub fn is_shape_preserving(&self) -> bool {
        if self.validate().is_err() {
            return false;
        }
        let same = self.in_channels == self.out_channels && self.stride == 1;
        match self.kind {
            BlockKind::FullyConnected | BlockKind::Pooling | BlockKind::Dense => false,
            BlockKind::ResidualProj | BlockKind::MobileNetV2S2 => false,
            BlockKind::Residual
            | BlockKind::Basic
            | BlockKind::MobileNetV1
            | BlockKind::MobileNetV2S1
            | BlockKind::Inception => same,
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let bias = !self.batchnorm;
        let conv = |cin: usize, cout: usize, k: usize| conv_param_count(cin, cout, k, bias);
        let dw = |c: usize, k: usize| conv_param_count(1, c, k, bias);
        let bn = |c: usize| if self.batchnorm { 2 * c } else { 0 };
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            BlockKind::FullyConnected => i * o + o,
            BlockKind::Basic | BlockKind::Pooling => conv(i, o, 3) + bn(o),
            BlockKind::Residual => conv(i, o, 3) + bn(o) + conv(o, o, 3) + bn(o),
            BlockKind::ResidualProj => {
                conv(i, o, 3) + bn(o) + conv(o, o, 3) + bn(o) + conv(i, o, 1) + bn(o)
            }
            BlockKind::Dense => (0..self.layers)
                .map(|l| conv(i + l * self.growth, self.growth, 3) + bn(self.growth))
                .sum(),
            BlockKind::MobileNetV1 => dw(i, 3) + bn(i) + conv(i, o, 1) + bn(o),
            BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 => {
                let h = self.hidden();
                conv(i, h, 1) + bn(h) + dw(h, 3) + bn(h) + conv(h, o, 1) + bn(o)
            }
            BlockKind::Inception => {
                let [b1, b2, b3, b4] = self.inception_widths();
                conv(i, b1, 1)
                    + bn(b1)
                    + conv(i, b2, 1)
                    + bn(b2)
                    + conv(b2, b2, 3)
                    + bn(b2)
                    + conv(i, b3, 1)
                    + bn(b3)
                    + conv(b3, b3, 5)
                    + bn(b3)
                    + conv(i, b4, 1)
                    + bn(b4)
            }
        }
    }

    /// Closed-form multiply-accumulate count for one sample at `input_hw`.
    pub fn flops(&self, input_hw: (usize, usize)) -> u64 {
        let (h, w) = input_hw;
        let s = self.stride;
        let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
        let (hw, ohw) = ((h, w), (ho, wo));
        let conv = conv_macs;
        let dw = depthwise_macs;
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            BlockKind::FullyConnected => (i * o) as u64,
            BlockKind::Basic | BlockKind::Pooling => conv(i, o, 3, ohw),
            BlockKind::Residual => conv(i, o, 3, ohw) + conv(o, o, 3, ohw),
            BlockKind::ResidualProj => conv(i, o, 3, ohw) + conv(o, o, 3, ohw) + conv(i, o, 1, ohw),
            BlockKind::Dense => (0..self.layers)
                .map(|l| conv(i + l * self.growth, self.growth, 3, hw))
                .sum(),
            BlockKind::MobileNetV1 => dw(i, 3, ohw) + conv(i, o, 1, ohw),
            BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 => {
                let hd = self.hidden();
                conv(i, hd, 1, hw) + dw(hd, 3, ohw) + conv(hd, o, 1, ohw)
            }
            BlockKind::Inception => {
                let [b1, b2, b3, b4] = self.inception_widths();
                conv(i, b1, 1, hw)
                    + conv(i, b2, 1, hw)
                    + conv(b2, b2, 3, hw)
                    + conv(i, b3, 1, hw)
                    + conv(b3, b3, 5, hw)
                    + conv(i, b4, 1, hw)
            }
        }
    }
}

/// A block with instantiated parameters and normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    spec: BlockSpec,
    params: ParamStore,
    buffers: ParamStore,
}

struct Init<'a> {
    prefix: String,
    rng: &'a mut Rng,
    batchnorm: bool,
    params: ParamStore,
    buffers: ParamStore,
}

impl Init<'_> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f32).sqrt();
        Tensor::from_fn(shape, |_| self.rng.normal() * std).param()
    }

    fn add(&mut self, name: &str, t: Tensor) {
        let full = format!("{}.{name}", self.prefix);
        self.params.insert(full, t).expect("layer names are unique per block");
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        self.add(&format!("{name}.weight"), w);
        if !self.batchnorm {
            self.add(&format!("{name}.bias"), Tensor::zeros(&[cout]).param());
        }
    }

    fn depthwise(&mut self, name: &str, c: usize, k: usize) {
        let w = self.he(&[c, 1, k, k], k * k);
        self.add(&format!("{name}.weight"), w);
        if !self.batchnorm {
            self.add(&format!("{name}.bias"), Tensor::zeros(&[c]).param());
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        if !self.batchnorm {
            return;
        }
        self.add(&format!("{name}.gamma"), Tensor::ones(&[c]).param());
        self.add(&format!("{name}.beta"), Tensor::zeros(&[c]).param());
        let p = &self.prefix;
        self.buffers
            .insert(format!("{p}.{name}.running_mean"), Tensor::zeros(&[c]))
            .unwrap();
        self.buffers
            .insert(format!("{p}.{name}.running_var"), Tensor::ones(&[c]))
            .unwrap();
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let w = self.he(&[dout, din], din);
        self.add(&format!("{name}.weight"), w);
        self.add(&format!("{name}.bias"), Tensor::zeros(&[dout]).param());
    }
}

/// Builds a block with He-normal weights, zero biases, unit/zero norm affine
/// parameters and identity running statistics. Identical `(spec, rng state)`
/// gives bit-identical parameters.
pub fn build_block(spec: &BlockSpec, rng: &mut Rng) -> Result<Block> {
    spec.validate()?;
    let mut b = Init {
        prefix: spec.prefix(),
        rng,
        batchnorm: spec.batchnorm,
        params: ParamStore::new(),
        buffers: ParamStore::new(),
    };
    let (i, o) = (spec.in_channels, spec.out_channels);
    match spec.kind {
        BlockKind::FullyConnected => b.linear("fc", i, o),
        BlockKind::Basic | BlockKind::Pooling => {
            b.conv("conv", i, o, 3);
            b.norm("bn", o);
        }
        BlockKind::Residual | BlockKind::ResidualProj => {
            b.conv("conv1", i, o, 3);
            b.norm("bn1", o);
            b.conv("conv2", o, o, 3);
            b.norm("bn2", o);
            if spec.kind == BlockKind::ResidualProj {
                b.conv("proj", i, o, 1);
                b.norm("proj_bn", o);
            }
        }
        BlockKind::Dense => {
            for l in 0..spec.layers {
                b.conv(&format!("unit{l}.conv"), i + l * spec.growth, spec.growth, 3);
                b.norm(&format!("unit{l}.bn"), spec.growth);
            }
        }
        BlockKind::MobileNetV1 => {
            b.depthwise("dw", i, 3);
            b.norm("dw_bn", i);
            b.conv("pw", i, o, 1);
            b.norm("pw_bn", o);
        }
        BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 => {
            let h = spec.hidden();
            b.conv("expand", i, h, 1);
            b.norm("expand_bn", h);
            b.depthwise("dw", h, 3);
            b.norm("dw_bn", h);
            b.conv("project", h, o, 1);
            b.norm("project_bn", o);
        }
        BlockKind::Inception => {
            let [b1, b2, b3, b4] = spec.inception_widths();
            b.conv("b1.conv", i, b1, 1);
            b.norm("b1.bn", b1);
            b.conv("b2.reduce", i, b2, 1);
            b.norm("b2.reduce_bn", b2);
            b.conv("b2.conv", b2, b2, 3);
            b.norm("b2.bn", b2);
            b.conv("b3.reduce", i, b3, 1);
            b.norm("b3.reduce_bn", b3);
            b.conv("b3.conv", b3, b3, 5);
            b.norm("b3.bn", b3);
            b.conv("b4.conv", i, b4, 1);
            b.norm("b4.bn", b4);
        }
    }
    Ok(Block {
        spec: spec.clone(),
        params: b.params,
        buffers: b.buffers,
    })
}

/// Result of recording a block on a tape.
pub struct BlockForward {
    pub output: Var,
    /// Parameter leaves, in the block's parameter-store order.
    pub params: Vec<Var>,
    /// Updated running statistics, keyed by normalization layer name.
    pub norm_updates: Vec<(String, NormStats)>,
}

struct Ctx<'a> {
    block: &'a Block,
    tape: &'a mut Tape,
    vars: Vec<Var>,
    norm: NormConfig,
    updates: Vec<(String, NormStats)>,
}

impl Ctx<'_> {
    fn var(&self, local: &str) -> Option<Var> {
        let full = format!("{}.{local}", self.block.spec.prefix());
        self.block
            .params
            .iter()
            .position(|(n, _)| n == full)
            .map(|i| self.vars[i])
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight")).expect("conv weight");
        let b = self.var(&format!("{name}.bias"));
        let k = self.tape.shape(w)[2];
        self.tape.conv2d(x, w, b, stride, k / 2)
    }

    fn depthwise(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight")).expect("depthwise weight");
        let b = self.var(&format!("{name}.bias"));
        let k = self.tape.shape(w)[2];
        self.tape.depthwise_conv2d(x, w, b, stride, k / 2)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        if !self.block.spec.batchnorm {
            return Ok(x);
        }
        let gamma = self.var(&format!("{name}.gamma")).expect("norm gamma");
        let beta = self.var(&format!("{name}.beta")).expect("norm beta");
        let stats = self.block.norm_stats(name);
        let (y, updated) = self.tape.batch_norm2d(x, gamma, beta, &stats, self.norm)?;
        if let Some(u) = updated {
            self.updates.push((name.to_string(), u));
        }
        Ok(y)
    }

    fn conv_norm_relu(&mut self, x: Var, conv: &str, norm: &str, stride: usize) -> Result<Var> {
        let y = self.conv(x, conv, stride)?;
        let y = self.norm(y, norm)?;
        Ok(self.tape.relu(y))
    }
}

impl Block {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Normalization running statistics as named tensors.
    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn norm_stats(&self, name: &str) -> NormStats {
        let p = self.spec.prefix();
        let get = |suffix: &str| {
            self.buffers
                .get(&format!("{p}.{name}.{suffix}"))
                .expect("running statistics exist for every norm layer")
                .data()
                .to_vec()
        };
        NormStats {
            mean: get("running_mean"),
            var: get("running_var"),
        }
    }

    /// Writes running statistics returned by a train-mode forward.
    pub fn apply_norm_updates(&mut self, updates: Vec<(String, NormStats)>) {
        let p = self.spec.prefix();
        for (name, stats) in updates {
            let mean = self.buffers.get_mut(&format!("{p}.{name}.running_mean")).unwrap();
            mean.data_mut().copy_from_slice(&stats.mean);
            let var = self.buffers.get_mut(&format!("{p}.{name}.running_var")).unwrap();
            var.data_mut().copy_from_slice(&stats.var);
        }
    }

    /// Records the block on `tape`. Train mode normalizes with batch
    /// statistics and returns running-stat updates without applying them.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<BlockForward> {
        let s = &self.spec;
        let mut per_sample = tape.shape(x)[1..].to_vec();
        if s.kind == BlockKind::FullyConnected && !s.pool && per_sample.len() == 3 {
            per_sample = vec![per_sample.iter().product()];
        }
        s.output_shape(&per_sample)?;

        let vars = self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let mut cx = Ctx {
            block: self,
            tape,
            vars,
            norm: NormConfig { mode, ..NormConfig::default() },
            updates: Vec::new(),
        };
        let stride = s.stride;
        let output = match s.kind {
            BlockKind::FullyConnected => {
                let mut h = x;
                if s.pool && cx.tape.shape(h).len() == 4 {
                    h = cx.tape.global_avg_pool(h)?;
                }
                if cx.tape.shape(h).len() != 2 {
                    h = cx.tape.flatten(h)?;
                }
                let w = cx.var("fc.weight").unwrap();
                let b = cx.var("fc.bias");
                let y = cx.tape.linear(h, w, b)?;
                if s.relu {
                    cx.tape.relu(y)
                } else {
                    y
                }
            }
            BlockKind::Basic => cx.conv_norm_relu(x, "conv", "bn", stride)?,
            BlockKind::Pooling => {
                let y = cx.conv(x, "conv", stride)?;
                let y = cx.norm(y, "bn")?;
                let y = cx.tape.max_pool2d(y, 2, 2, 0)?;
                cx.tape.relu(y)
            }
            BlockKind::Residual | BlockKind::ResidualProj => {
                let y = cx.conv_norm_relu(x, "conv1", "bn1", stride)?;
                let y = cx.conv(y, "conv2", 1)?;
                let y = cx.norm(y, "bn2")?;
                let shortcut = if s.kind == BlockKind::ResidualProj {
                    let p = cx.conv(x, "proj", stride)?;
                    cx.norm(p, "proj_bn")?
                } else {
                    x
                };
                let sum = cx.tape.add(shortcut, y)?;
                cx.tape.relu(sum)
            }
            BlockKind::Dense => {
                let mut features = vec![x];
                for l in 0..s.layers {
                    let input = if features.len() == 1 {
                        x
                    } else {
                        cx.tape.concat_channels(&features)?
                    };
                    let y = cx.conv_norm_relu(input, &format!("unit{l}.conv"), &format!("unit{l}.bn"), 1)?;
                    features.push(y);
                }
                cx.tape.concat_channels(&features)?
            }
            BlockKind::MobileNetV1 => {
                let y = cx.depthwise(x, "dw", stride)?;
                let y = cx.norm(y, "dw_bn")?;
                let y = cx.tape.relu(y);
                cx.conv_norm_relu(y, "pw", "pw_bn", 1)?
            }
            BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 => {
                let y = cx.conv_norm_relu(x, "expand", "expand_bn", 1)?;
                let y = cx.depthwise(y, "dw", stride)?;
                let y = cx.norm(y, "dw_bn")?;
                let y = cx.tape.relu(y);
                let y = cx.conv(y, "project", 1)?;
                let y = cx.norm(y, "project_bn")?;
                if s.is_shape_preserving() {
                    cx.tape.add(x, y)?
                } else {
                    y
                }
            }
            BlockKind::Inception => {
                let b1 = cx.conv_norm_relu(x, "b1.conv", "b1.bn", 1)?;
                let b2 = cx.conv_norm_relu(x, "b2.reduce", "b2.reduce_bn", 1)?;
                let b2 = cx.conv_norm_relu(b2, "b2.conv", "b2.bn", 1)?;
                let b3 = cx.conv_norm_relu(x, "b3.reduce", "b3.reduce_bn", 1)?;
                let b3 = cx.conv_norm_relu(b3, "b3.conv", "b3.bn", 1)?;
                let pooled = cx.tape.max_pool2d(x, 3, 1, 1)?;
                let b4 = cx.conv_norm_relu(pooled, "b4.conv", "b4.bn", 1)?;
                cx.tape.concat_channels(&[b1, b2, b3, b4])?
            }
        };
        Ok(BlockForward {
            output,
            params: cx.vars,
            norm_updates: cx.updates,
        })
    }

    /// Runs the block on a concrete batch. Train mode updates running
    /// statistics in place.
    pub fn forward_tensor(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, mode)?;
        let value = tape.value(out.output).clone();
        if mode == Mode::Train {
            self.apply_norm_updates(out.norm_updates);
        }
        Ok(value)
    }

    /// Zeroes the last layer of the residual branch (conv weights, bias and
    /// norm affine parameters), turning a shape-preserving residual block
    /// into an exact identity on nonnegative inputs.
    pub fn zero_branch(&mut self) -> Result<()> {
        let (conv, norm) = match self.spec.kind {
            BlockKind::Residual => ("conv2", "bn2"),
            BlockKind::MobileNetV2S1 if self.spec.is_shape_preserving() => ("project", "project_bn"),
            k => {
                return Err(Error::Spec(format!(
                    "{k} block has no identity shortcut to reduce to"
                )))
            }
        };
        let p = self.spec.prefix();
        for suffix in [
            format!("{conv}.weight"),
            format!("{conv}.bias"),
            format!("{norm}.gamma"),
            format!("{norm}.beta"),
        ] {
            if let Some(t) = self.params.get_mut(&format!("{p}.{suffix}")) {
                t.data_mut().fill(0.0);
            }
        }
        Ok(())
    }
}
