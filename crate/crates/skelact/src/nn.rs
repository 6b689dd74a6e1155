//! Residual units, two-branch attention blocks (base and hourglass GLAN) and
//! the full classification network built from them.
//!
//! Fusion is `out = R(x) + R(x) ⊙ M(x)`: with the mask forced to zero every
//! attention block reduces to its residual branch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("spatial size {size} cannot reach hourglass bottom {bottom} by halving")]
    BadHourglassSize { size: usize, bottom: usize },
    #[error("input spatial size {got} does not match configured {want}")]
    WrongInputSize { got: usize, want: usize },
    #[error("input has {got} channels, network expects {want}")]
    WrongChannels { got: usize, want: usize },
}

type Result<T> = std::result::Result<T, NnError>;

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    // Box-Muller keeps us off extra distribution deps.
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub struct Conv2dLayer {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let weight = Parameter::new(
            format!("{name}.w"),
            vec![kernel, kernel, cin, cout],
            kaiming(rng, fan_in, kernel * kernel * cin * cout),
        );
        let bias = with_bias
            .then(|| Parameter::new(format!("{name}.b"), vec![cout], vec![0.0; cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let w = g.bind(&self.weight);
        let y = x.conv2d(&w, self.stride, self.pad)?;
        match &self.bias {
            Some(bias) => Ok(y.add(&g.bind(bias))?),
            None => Ok(y),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }
}

pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Parameter::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: Parameter::frozen(
                format!("{name}.running_mean"),
                vec![channels],
                vec![0.0; channels],
            ),
            running_var: Parameter::frozen(
                format!("{name}.running_var"),
                vec![channels],
                vec![1.0; channels],
            ),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let gamma = g.bind(&self.gamma);
        let beta = g.bind(&self.beta);
        let mut mean = self.running_mean.lock();
        let mut var = self.running_var.lock();
        Ok(x.batchnorm(
            &gamma,
            &beta,
            &mut mean.values,
            &mut var.values,
            self.momentum,
            training,
        )?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
        out.push(self.running_mean.clone());
        out.push(self.running_var.clone());
    }
}

pub struct AffineLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl AffineLayer {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: Parameter::new(
                format!("{name}.w"),
                vec![din, dout],
                kaiming(rng, din, din * dout),
            ),
            bias: Parameter::new(format!("{name}.b"), vec![dout], vec![0.0; dout]),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        Ok(x.affine(&g.bind(&self.weight), &g.bind(&self.bias))?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

/// Bottleneck residual unit: 1x1 reduce, 3x3, 1x1 expand, each with
/// batchnorm; relu after the first two stages; projection on the skip path
/// when shape changes. Output is `x + F(x)` with no trailing activation.
pub struct ResidualUnit {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
    conv3: Conv2dLayer,
    bn3: BatchNorm2d,
    proj: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl ResidualUnit {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mid = (cout / 4).max(1);
        let proj = (cin != cout || stride != 1).then(|| {
            (
                Conv2dLayer::new(rng, &format!("{name}.proj"), 1, cin, cout, stride, 0, false),
                BatchNorm2d::new(&format!("{name}.proj_bn"), cout),
            )
        });
        Self {
            conv1: Conv2dLayer::new(rng, &format!("{name}.c1"), 1, cin, mid, 1, 0, false),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), mid),
            conv2: Conv2dLayer::new(rng, &format!("{name}.c2"), 3, mid, mid, stride, 1, false),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), mid),
            conv3: Conv2dLayer::new(rng, &format!("{name}.c3"), 1, mid, cout, 1, 0, false),
            bn3: BatchNorm2d::new(&format!("{name}.bn3"), cout),
            proj,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut f = self.bn1.forward(g, &self.conv1.forward(g, x)?, training)?.relu();
        f = self.bn2.forward(g, &self.conv2.forward(g, &f)?, training)?.relu();
        f = self.bn3.forward(g, &self.conv3.forward(g, &f)?, training)?;
        let skip = match &self.proj {
            Some((conv, bn)) => bn.forward(g, &conv.forward(g, x)?, training)?,
            None => x.clone(),
        };
        Ok(skip.add(&f)?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.conv1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn2.collect_params(out);
        self.conv3.collect_params(out);
        self.bn3.collect_params(out);
        if let Some((conv, bn)) = &self.proj {
            conv.collect_params(out);
            bn.collect_params(out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskActivation {
    Sigmoid,
    /// Softmax over the spatial positions of each channel plane.
    SoftmaxPositions,
}

/// Simplest two-branch block: the mask branch is one 3x3 convolution plus an
/// activation, the residual branch is the identity.
pub struct BaseAttentionBlock {
    conv: Conv2dLayer,
    pub activation: MaskActivation,
}

impl BaseAttentionBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        activation: MaskActivation,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(rng, &format!("{name}.mask"), 3, channels, channels, 1, 1, true),
            activation,
        }
    }

    pub fn mask(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let pre = self.conv.forward(g, x)?;
        Ok(match self.activation {
            MaskActivation::Sigmoid => pre.sigmoid(),
            MaskActivation::SoftmaxPositions => pre.softmax(&[1, 2])?,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let m = self.mask(g, x)?;
        Ok(x.add(&x.mul(&m)?)?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.conv.collect_params(out);
    }
}

/// Symmetric encoder-decoder mask branch. Each down unit is maxpool 2x2 then
/// a residual unit, with a skip link taken at the unit's input; each up unit
/// is a 2x bilinear upsample, a residual unit and an elementwise sum with the
/// matching skip. A residual unit at the bottom runs even at depth zero; a
/// final sigmoid produces the mask.
pub struct HourglassMaskBranch {
    downs: Vec<ResidualUnit>,
    bottom: ResidualUnit,
    ups: Vec<ResidualUnit>,
    pub depth: usize,
}

impl HourglassMaskBranch {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        input_size: usize,
        bottom_size: usize,
    ) -> Result<Self> {
        let depth = hourglass_depth(input_size, bottom_size)?;
        let downs = (0..depth)
            .map(|i| ResidualUnit::new(rng, &format!("{name}.down{i}"), channels, channels, 1))
            .collect();
        let ups = (0..depth)
            .map(|i| ResidualUnit::new(rng, &format!("{name}.up{i}"), channels, channels, 1))
            .collect();
        Ok(Self {
            downs,
            bottom: ResidualUnit::new(rng, &format!("{name}.bottom"), channels, channels, 1),
            ups,
            depth,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for down in &self.downs {
            skips.push(cur.clone());
            cur = down.forward(g, &cur.maxpool2d(2, 2)?, training)?;
        }
        cur = self.bottom.forward(g, &cur, training)?;
        for (j, up) in self.ups.iter().enumerate() {
            let skip = &skips[self.depth - 1 - j];
            let shape = skip.shape();
            cur = up.forward(g, &cur.bilinear_upsample(shape[1], shape[2])?, training)?;
            cur = cur.add(skip)?;
        }
        Ok(cur.sigmoid())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        for d in &self.downs {
            d.collect_params(out);
        }
        self.bottom.collect_params(out);
        for u in &self.ups {
            u.collect_params(out);
        }
    }
}

/// Down-steps needed to halve `size` to `bottom`; errors when unreachable.
pub fn hourglass_depth(size: usize, bottom: usize) -> Result<usize> {
    let mut s = size;
    let mut depth = 0;
    while s > bottom {
        if s % 2 != 0 {
            return Err(NnError::BadHourglassSize { size, bottom });
        }
        s /= 2;
        depth += 1;
    }
    if s != bottom {
        return Err(NnError::BadHourglassSize { size, bottom });
    }
    Ok(depth)
}

/// Attention block with an hourglass mask branch and two residual units on
/// the residual branch; fused as `R + R ⊙ M`.
pub struct GlanBlock {
    res1: ResidualUnit,
    res2: ResidualUnit,
    pub mask_branch: HourglassMaskBranch,
}

impl GlanBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        input_size: usize,
        bottom_size: usize,
    ) -> Result<Self> {
        Ok(Self {
            res1: ResidualUnit::new(rng, &format!("{name}.res1"), channels, channels, 1),
            res2: ResidualUnit::new(rng, &format!("{name}.res2"), channels, channels, 1),
            mask_branch: HourglassMaskBranch::new(
                rng,
                &format!("{name}.hg"),
                channels,
                input_size,
                bottom_size,
            )?,
        })
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let r = self.res2.forward(g, &self.res1.forward(g, x, training)?, training)?;
        let m = self.mask_branch.forward(g, x, training)?;
        Ok(r.add(&r.mul(&m)?)?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.res1.collect_params(out);
        self.res2.collect_params(out);
        self.mask_branch.collect_params(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Residual stages only.
    Plain,
    /// Base attention blocks after the stem, after stage 2 and after stage 4.
    Base { activation: MaskActivation },
    /// GLAN blocks between the four residual stages.
    Glan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stage_channels: [usize; 4],
    pub stage_units: [usize; 4],
    pub stage_strides: [usize; 4],
    pub attention: AttentionKind,
    pub hourglass_bottom: usize,
}

impl NetworkConfig {
    /// Full-scale 50-layer plan (64/256/512/1024/2048 widths, 224 input).
    pub fn full(num_classes: usize, attention: AttentionKind) -> Self {
        Self {
            input_size: 224,
            in_channels: 3,
            num_classes,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stage_channels: [256, 512, 1024, 2048],
            stage_units: [1, 1, 1, 3],
            stage_strides: [1, 2, 2, 2],
            attention,
            hourglass_bottom: 7,
        }
    }

    /// Desk-scale plan: 56x56 input, width-multiplied channels.
    pub fn desk(num_classes: usize, attention: AttentionKind) -> Self {
        Self {
            input_size: 56,
            in_channels: 3,
            num_classes,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            stage_channels: [16, 24, 32, 32],
            stage_units: [1, 1, 1, 3],
            stage_strides: [2, 2, 2, 1],
            attention,
            hourglass_bottom: 7,
        }
    }

    /// Smallest runnable plan for quick experiments and seed sweeps.
    pub fn tiny(num_classes: usize, attention: AttentionKind) -> Self {
        Self {
            input_size: 28,
            in_channels: 3,
            num_classes,
            stem_channels: 6,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            stage_channels: [12, 16, 16, 16],
            stage_units: [1, 1, 1, 2],
            stage_strides: [2, 2, 1, 1],
            attention,
            hourglass_bottom: 7,
        }
    }

    fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (size + 2 * pad - kernel) / stride + 1
    }

    /// Spatial sizes after the stem and after each stage.
    pub fn spatial_plan(&self) -> (usize, [usize; 4]) {
        let mut s = Self::conv_out(
            self.input_size,
            self.stem_kernel,
            self.stem_stride,
            self.stem_kernel / 2,
        );
        if self.stem_pool {
            s /= 2;
        }
        let stem = s;
        let mut stages = [0; 4];
        for i in 0..4 {
            s = Self::conv_out(s, 3, self.stage_strides[i], 1);
            stages[i] = s;
        }
        (stem, stages)
    }
}

struct Stage {
    units: Vec<ResidualUnit>,
}

impl Stage {
    fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        for unit in &self.units {
            cur = unit.forward(g, &cur, training)?;
        }
        Ok(cur)
    }
}

enum AttentionBlocks {
    Plain,
    Base(Vec<BaseAttentionBlock>),
    Glan(Vec<GlanBlock>),
}

/// The classification network: stem convolution, four residual stages with
/// attention blocks, global average pooling and an affine classifier.
pub struct ConvNet {
    pub config: NetworkConfig,
    stem: Conv2dLayer,
    stem_bn: BatchNorm2d,
    stages: Vec<Stage>,
    attention: AttentionBlocks,
    classifier: AffineLayer,
    /// Output width/height of the final feature block.
    pub feature_size: usize,
}

impl ConvNet {
    pub fn new(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (stem_size, stage_sizes) = config.spatial_plan();
        let stem = Conv2dLayer::new(
            rng,
            "stem",
            config.stem_kernel,
            config.in_channels,
            config.stem_channels,
            config.stem_stride,
            config.stem_kernel / 2,
            false,
        );
        let stem_bn = BatchNorm2d::new("stem_bn", config.stem_channels);

        let mut stages = Vec::with_capacity(4);
        let mut cin = config.stem_channels;
        for s in 0..4 {
            let cout = config.stage_channels[s];
            let mut units = Vec::with_capacity(config.stage_units[s]);
            for u in 0..config.stage_units[s] {
                let stride = if u == 0 { config.stage_strides[s] } else { 1 };
                let in_ch = if u == 0 { cin } else { cout };
                units.push(ResidualUnit::new(
                    rng,
                    &format!("stage{}.u{u}", s + 1),
                    in_ch,
                    cout,
                    stride,
                ));
            }
            stages.push(Stage { units });
            cin = cout;
        }

        let attention = match config.attention {
            AttentionKind::Plain => AttentionBlocks::Plain,
            AttentionKind::Base { activation } => {
                // After the stem, after stage 2, after stage 4.
                let channels = [
                    config.stem_channels,
                    config.stage_channels[1],
                    config.stage_channels[3],
                ];
                AttentionBlocks::Base(
                    channels
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| {
                            BaseAttentionBlock::new(rng, &format!("attn{i}"), c, activation)
                        })
                        .collect(),
                )
            }
            AttentionKind::Glan => {
                // Between the four stages: on stage-1..3 outputs.
                let mut blocks = Vec::with_capacity(3);
                for i in 0..3 {
                    blocks.push(GlanBlock::new(
                        rng,
                        &format!("glan{i}"),
                        config.stage_channels[i],
                        stage_sizes[i],
                        config.hourglass_bottom.min(stage_sizes[i]),
                    )?);
                }
                AttentionBlocks::Glan(blocks)
            }
        };
        let _ = stem_size;

        let classifier = AffineLayer::new(
            rng,
            "classifier",
            config.stage_channels[3],
            config.num_classes,
        );
        Ok(Self {
            feature_size: stage_sizes[3],
            config,
            stem,
            stem_bn,
            stages,
            attention,
            classifier,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.config.in_channels {
            return Err(NnError::WrongChannels {
                got: if s.len() == 4 { s[3] } else { 0 },
                want: self.config.in_channels,
            });
        }
        if s[1] != self.config.input_size || s[2] != self.config.input_size {
            return Err(NnError::WrongInputSize {
                got: s[1],
                want: self.config.input_size,
            });
        }
        Ok(())
    }

    /// Stem and stages without pooling or classifier: the K×K×D feature block.
    pub fn feature_forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = self
            .stem_bn
            .forward(g, &self.stem.forward(g, x)?, training)?
            .relu();
        if let AttentionBlocks::Base(blocks) = &self.attention {
            cur = blocks[0].forward(g, &cur)?;
        }
        if self.config.stem_pool {
            cur = cur.maxpool2d(2, 2)?;
        }
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(g, &cur, training)?;
            match &self.attention {
                AttentionBlocks::Plain => {}
                AttentionBlocks::Base(blocks) => {
                    if i == 1 {
                        cur = blocks[1].forward(g, &cur)?;
                    } else if i == 3 {
                        cur = blocks[2].forward(g, &cur)?;
                    }
                }
                AttentionBlocks::Glan(blocks) => {
                    if i < 3 {
                        cur = blocks[i].forward(g, &cur, training)?;
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Class logits for a batch of images.
    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        let features = self.feature_forward(g, x, training)?;
        let pooled = features.mean(&[1, 2])?;
        self.classifier.forward(g, &pooled)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.stem.collect_params(&mut out);
        self.stem_bn.collect_params(&mut out);
        match &self.attention {
            AttentionBlocks::Plain => {}
            AttentionBlocks::Base(blocks) => {
                for b in blocks {
                    b.collect_params(&mut out);
                }
            }
            AttentionBlocks::Glan(blocks) => {
                for b in blocks {
                    b.collect_params(&mut out);
                }
            }
        }
        for s in &self.stages {
            for u in &s.units {
                u.collect_params(&mut out);
            }
        }
        self.classifier.collect_params(&mut out);
        out
    }

    pub fn glan_blocks(&self) -> Option<&[GlanBlock]> {
        match &self.attention {
            AttentionBlocks::Glan(blocks) => Some(blocks),
            _ => None,
        }
    }
}
