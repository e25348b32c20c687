//! The Bag-of-Queries network.
//!
//! Local features `X⁰` (from the convolutional stem or from precomputed
//! backbone tokens) pass through a cascade of encoder units. After each
//! encoder, a block of learnable queries first attends to itself (with a
//! residual connection) and then cross-attends to the current features.
//! Block outputs are stacked, projected along the feature axis and then the
//! query axis, flattened and L2-normalized.
//!
//! Tokens are always ordered row-major over the feature grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{encoder_forward, multi_head_attention, EncoderParams, MhaParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::init::{join, normal, xavier_uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the initial query bags.
pub const QUERY_INIT_STD: f64 = 0.02;
/// Each stem layer halves the resolution.
pub const STEM_LAYER_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum InputMode {
    /// `3 × H × W` images through a stack of stride-2 3×3 convolutions.
    Image {
        height: usize,
        width: usize,
        stem_channels: Vec<usize>,
    },
    /// `N × feature_dim` tokens from an external backbone, optionally laid
    /// out on a `rows × cols` grid.
    Features {
        feature_dim: usize,
        grid: Option<(usize, usize)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// 3×3 convolution over the feature grid, padding 1.
    Conv3x3,
    /// Per-token linear map.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub queries_per_block: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// Output width of the feature-axis projection (`c`).
    pub channel_proj: usize,
    /// Output width of the query-axis projection (`r`); `None` skips it.
    pub row_proj: Option<usize>,
    pub ffn_mult: usize,
    pub self_attention: bool,
    /// Layer-normalize each block output before projection.
    pub output_norm: bool,
    pub reduction: Reduction,
    pub input: InputMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 2,
            queries_per_block: 16,
            model_dim: 64,
            num_heads: 4,
            channel_proj: 64,
            row_proj: Some(8),
            ffn_mult: 4,
            self_attention: true,
            output_norm: true,
            reduction: Reduction::Conv3x3,
            input: InputMode::Image {
                height: 64,
                width: 64,
                stem_channels: vec![16, 32, 64],
            },
        }
    }
}

impl ModelConfig {
    /// Two blocks of 64 queries projected to a 128 × 32 = 4096-d descriptor,
    /// over a 20 × 20 grid of precomputed features.
    pub fn paper_scale() -> Self {
        ModelConfig {
            num_blocks: 2,
            queries_per_block: 64,
            model_dim: 128,
            num_heads: 8,
            channel_proj: 128,
            row_proj: Some(32),
            ffn_mult: 4,
            self_attention: true,
            output_norm: true,
            reduction: Reduction::Conv3x3,
            input: InputMode::Features {
                feature_dim: 256,
                grid: Some((20, 20)),
            },
        }
    }

    /// Width of the query-axis output (`r`).
    pub fn rows_out(&self) -> usize {
        self.row_proj.unwrap_or(self.num_blocks * self.queries_per_block)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.channel_proj * self.rows_out()
    }

    /// Channels entering the reduction layer.
    pub fn backbone_dim(&self) -> usize {
        match &self.input {
            InputMode::Image { stem_channels, .. } => *stem_channels.last().unwrap_or(&3),
            InputMode::Features { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn stem_stride(&self) -> usize {
        match &self.input {
            InputMode::Image { stem_channels, .. } => STEM_LAYER_STRIDE.pow(stem_channels.len() as u32),
            InputMode::Features { .. } => 1,
        }
    }

    /// Feature grid implied by the configuration, if any.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match &self.input {
            InputMode::Image { height, width, .. } => {
                Some((height / self.stem_stride(), width / self.stem_stride()))
            }
            InputMode::Features { grid, .. } => *grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("queries_per_block", self.queries_per_block),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("channel_proj", self.channel_proj),
            ("ffn_mult", self.ffn_mult),
            ("row_proj", self.rows_out()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        match &self.input {
            InputMode::Image {
                height,
                width,
                stem_channels,
            } => {
                if stem_channels.is_empty() || stem_channels.contains(&0) {
                    return Err(Error::Config("stem channels must be non-empty and positive".into()));
                }
                let s = self.stem_stride();
                if *height == 0 || *width == 0 || height % s != 0 || width % s != 0 {
                    return Err(Error::Config(format!(
                        "image size {height}x{width} is not divisible by stem stride {s}"
                    )));
                }
            }
            InputMode::Features { feature_dim, grid } => {
                if *feature_dim == 0 {
                    return Err(Error::Config("feature_dim must be positive".into()));
                }
                if self.reduction == Reduction::Conv3x3 && grid.is_none() {
                    return Err(Error::Config("convolutional reduction needs a feature grid".into()));
                }
                if matches!(grid, Some((0, _)) | Some((_, 0))) {
                    return Err(Error::Config("feature grid dimensions must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = Tensor> {
    /// `[out, in, 3, 3]`
    pub weight: T,
    pub bias: T,
}

impl ConvParams<Tensor> {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvParams {
            weight: xavier_uniform(&[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

impl<T> ConvParams<T> {
    fn map<'s, U, F: FnMut(&str, &'s T) -> U>(&'s self, prefix: &str, f: &mut F) -> ConvParams<U> {
        ConvParams {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut<'s, F: FnMut(&str, &'s mut T)>(&'s mut self, prefix: &str, f: &mut F) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReductionParams<T = Tensor> {
    Conv(ConvParams<T>),
    /// `weight: [d₀ × d]`, `bias: [d]`
    Linear { weight: T, bias: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = Tensor> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    /// Learnable query bag `[M × d]`, independent of the input.
    pub queries: T,
    pub self_attn: MhaParams<T>,
    pub cross_attn: MhaParams<T>,
    pub out_norm: Option<NormParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoqParams<T = Tensor> {
    pub stem: Vec<ConvParams<T>>,
    pub reduction: ReductionParams<T>,
    pub encoders: Vec<EncoderParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
    /// `W1: [d × c]`, applied to the feature axis.
    pub proj_channels: T,
    /// `W2: [(L·M) × r]`, applied to the query axis.
    pub proj_rows: Option<T>,
}

impl<T> BoqParams<T> {
    /// Applies `f` to every tensor in a fixed order, keeping the structure.
    pub fn map<'s, U, F: FnMut(&str, &'s T) -> U>(&'s self, f: &mut F) -> BoqParams<U> {
        let stem = self
            .stem
            .iter()
            .enumerate()
            .map(|(i, c)| c.map(&format!("stem.{i}"), f))
            .collect();
        let reduction = match &self.reduction {
            ReductionParams::Conv(c) => ReductionParams::Conv(c.map("reduction", f)),
            ReductionParams::Linear { weight, bias } => ReductionParams::Linear {
                weight: f("reduction.weight", weight),
                bias: f("reduction.bias", bias),
            },
        };
        let encoders = self
            .encoders
            .iter()
            .enumerate()
            .map(|(i, e)| e.map(&format!("encoders.{i}"), f))
            .collect();
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let prefix = format!("blocks.{i}");
                BlockParams {
                    queries: f(&join(&prefix, "queries"), &b.queries),
                    self_attn: b.self_attn.map(&join(&prefix, "self_attn"), f),
                    cross_attn: b.cross_attn.map(&join(&prefix, "cross_attn"), f),
                    out_norm: b.out_norm.as_ref().map(|n| NormParams {
                        gain: f(&join(&prefix, "out_norm.gain"), &n.gain),
                        bias: f(&join(&prefix, "out_norm.bias"), &n.bias),
                    }),
                }
            })
            .collect();
        BoqParams {
            stem,
            reduction,
            encoders,
            blocks,
            proj_channels: f("proj.channels", &self.proj_channels),
            proj_rows: self.proj_rows.as_ref().map(|w| f("proj.rows", w)),
        }
    }

    pub fn visit_mut<'s, F: FnMut(&str, &'s mut T)>(&'s mut self, f: &mut F) {
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&format!("stem.{i}"), f);
        }
        match &mut self.reduction {
            ReductionParams::Conv(c) => c.visit_mut("reduction", f),
            ReductionParams::Linear { weight, bias } => {
                f("reduction.weight", weight);
                f("reduction.bias", bias);
            }
        }
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("encoders.{i}"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("blocks.{i}");
            f(&join(&prefix, "queries"), &mut b.queries);
            b.self_attn.visit_mut(&join(&prefix, "self_attn"), f);
            b.cross_attn.visit_mut(&join(&prefix, "cross_attn"), f);
            if let Some(n) = &mut b.out_norm {
                f(&join(&prefix, "out_norm.gain"), &mut n.gain);
                f(&join(&prefix, "out_norm.bias"), &mut n.bias);
            }
        }
        f("proj.channels", &mut self.proj_channels);
        if let Some(w) = &mut self.proj_rows {
            f("proj.rows", w);
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    /// Every tensor with its dotted name, in traversal order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

impl BoqParams<Tensor> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let mut stem = Vec::new();
        if let InputMode::Image { stem_channels, .. } = &cfg.input {
            let mut c_in = 3;
            for &c_out in stem_channels {
                stem.push(ConvParams::new(c_in, c_out, &mut rng));
                c_in = c_out;
            }
        }
        let d0 = cfg.backbone_dim();
        let reduction = match cfg.reduction {
            Reduction::Conv3x3 => ReductionParams::Conv(ConvParams::new(d0, d, &mut rng)),
            Reduction::Linear => ReductionParams::Linear {
                weight: xavier_uniform(&[d0, d], d0, d, &mut rng),
                bias: Tensor::zeros(&[d]),
            },
        };
        let mut encoders = Vec::with_capacity(cfg.num_blocks);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            encoders.push(EncoderParams::new(d, cfg.num_heads, cfg.ffn_mult, &mut rng)?);
            blocks.push(BlockParams {
                queries: normal(&[cfg.queries_per_block, d], QUERY_INIT_STD, &mut rng),
                self_attn: MhaParams::new(d, cfg.num_heads, true, &mut rng)?,
                cross_attn: MhaParams::new(d, cfg.num_heads, true, &mut rng)?,
                out_norm: cfg.output_norm.then(|| NormParams {
                    gain: Tensor::ones(&[d]),
                    bias: Tensor::zeros(&[d]),
                }),
            });
        }
        let lm = cfg.num_blocks * cfg.queries_per_block;
        let proj_channels = xavier_uniform(&[d, cfg.channel_proj], d, cfg.channel_proj, &mut rng);
        let proj_rows = cfg.row_proj.map(|r| xavier_uniform(&[lm, r], lm, r, &mut rng));
        Ok(BoqParams {
            stem,
            reduction,
            encoders,
            blocks,
            proj_channels,
            proj_rows,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = BoqParams::init(cfg, 0)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, configuration expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in ours.iter().zip(&theirs) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Config(format!(
                    "parameter `{n1}` {:?} does not match expected `{n2}` {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        for b in &self.blocks {
            if b.self_attn.num_heads != cfg.num_heads || b.cross_attn.num_heads != cfg.num_heads {
                return Err(Error::Config("attention head count differs from configuration".into()));
            }
        }
        Ok(())
    }
}

/// Input to one forward pass.
#[derive(Clone, Debug)]
pub enum ModelInput {
    /// `[3, H, W]` image.
    Image(Tensor),
    /// `[N, d₀]` precomputed local features.
    Features(Tensor),
}

/// Runs the convolutional stem and flattens the final grid to `[N × d₀]`
/// tokens in row-major grid order.
pub fn feature_stem(tape: &mut Tape, image: Var, stem: &[ConvParams<Var>]) -> Result<(Var, (usize, usize))> {
    let shape = tape.shape(image).to_vec();
    let stride = STEM_LAYER_STRIDE.pow(stem.len() as u32);
    match shape[..] {
        [3, h, w] if h % stride == 0 && w % stride == 0 => {}
        _ => {
            return Err(Error::dim(
                "feature_stem",
                format!("image {shape:?} must be [3, H, W] with H, W divisible by {stride}"),
            ))
        }
    }
    let mut x = image;
    for layer in stem {
        x = tape.conv2d(x, layer.weight, Some(layer.bias), STEM_LAYER_STRIDE, 1)?;
        x = tape.relu(x)?;
    }
    let (c, gh, gw) = match tape.shape(x) {
        [c, gh, gw] => (*c, *gh, *gw),
        _ => unreachable!("conv2d output is 3-D"),
    };
    let flat = tape.reshape(x, &[c, gh * gw])?;
    Ok((tape.transpose(flat)?, (gh, gw)))
}

/// Maps `[N × d₀]` tokens to `[N × d]`. The convolutional form needs the
/// grid the tokens were flattened from.
pub fn reduce_channels(
    tape: &mut Tape,
    tokens: Var,
    grid: Option<(usize, usize)>,
    params: &ReductionParams<Var>,
) -> Result<Var> {
    let (n, d0) = match tape.shape(tokens) {
        [n, d0] => (*n, *d0),
        s => return Err(Error::dim("reduce_channels", format!("tokens must be a matrix, got {s:?}"))),
    };
    match params {
        ReductionParams::Linear { weight, bias } => {
            let y = tape.matmul(tokens, *weight)?;
            tape.add_row(y, *bias)
        }
        ReductionParams::Conv(conv) => {
            let (gh, gw) = grid.ok_or_else(|| Error::Config("convolutional reduction needs a feature grid".into()))?;
            if gh * gw != n {
                return Err(Error::dim(
                    "reduce_channels",
                    format!("grid {gh}x{gw} does not hold {n} tokens"),
                ));
            }
            let chw = tape.transpose(tokens)?;
            let chw = tape.reshape(chw, &[d0, gh, gw])?;
            let y = tape.conv2d(chw, conv.weight, Some(conv.bias), 1, 1)?;
            let d = tape.shape(y)[0];
            let y = tape.reshape(y, &[d, n])?;
            tape.transpose(y)
        }
    }
}

/// Self-attention over the query bag with a residual connection.
pub fn refine_queries(tape: &mut Tape, queries: Var, self_attn: &MhaParams<Var>) -> Result<Var> {
    tape.record_event("self_attention");
    let sa = multi_head_attention(tape, queries, queries, queries, self_attn)?;
    tape.add(sa.output, queries)
}

/// One block: optional query self-attention, then cross-attention from the
/// (refined) queries to the features. The cross-attention output carries
/// no residual from the queries. Returns the output and the cross-attention
/// weights `[h × M × N]`.
pub fn boq_block_forward(
    tape: &mut Tape,
    queries: Var,
    features: Var,
    block: &BlockParams<Var>,
    self_attention: bool,
) -> Result<(Var, Var)> {
    let q = if self_attention {
        refine_queries(tape, queries, &block.self_attn)?
    } else {
        queries
    };
    cross_attend(tape, q, features, block)
}

fn cross_attend(tape: &mut Tape, refined: Var, features: Var, block: &BlockParams<Var>) -> Result<(Var, Var)> {
    if tape.shape(features).first() == Some(&0) {
        return Err(Error::EmptyInput("boq_block_forward"));
    }
    tape.record_event("cross_attention");
    let cross = multi_head_attention(tape, refined, features, features, &block.cross_attn)?;
    Ok((cross.output, cross.weights))
}

/// Refined query bags, valid for one parameter version in evaluation mode.
#[derive(Clone, Debug)]
pub struct QueryCache {
    version: u64,
    refined: Vec<Tensor>,
}

impl QueryCache {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn refined(&self) -> &[Tensor] {
        &self.refined
    }
}

/// Handles to the interesting intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub descriptor: Var,
    /// Per block, before the optional output norm.
    pub block_outputs: Vec<Var>,
    /// Per block, `[h × M × N]`.
    pub cross_attention: Vec<Var>,
    pub grid: Option<(usize, usize)>,
}

/// A configured network with its parameters.
///
/// Every mutable access to the parameters bumps a version counter so that
/// query caches built from older parameters are rejected.
#[derive(Clone, Debug)]
pub struct BoqModel {
    config: ModelConfig,
    params: BoqParams<Tensor>,
    version: u64,
    training: bool,
}

impl BoqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = BoqParams::init(&config, seed)?;
        Ok(BoqModel {
            config,
            params,
            version: 0,
            training: false,
        })
    }

    pub fn from_parts(config: ModelConfig, params: BoqParams<Tensor>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(BoqModel {
            config,
            params,
            version: 0,
            training: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BoqParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BoqParams<Tensor> {
        self.version += 1;
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, BoqParams<Tensor>) {
        (self.config, self.params)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Registers the parameters on `tape`; with `trainable` they receive gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BoqParams<Var> {
        self.params.map(&mut |_, t| if trainable { tape.param(t) } else { tape.constant(t) })
    }

    /// Evaluates the query self-attention of every block once.
    pub fn precompute_query_context(&self) -> Result<QueryCache> {
        if self.training {
            return Err(Error::Contract(
                "query context cannot be cached in training mode".into(),
            ));
        }
        let mut tape = Tape::new();
        let mut refined = Vec::with_capacity(self.params.blocks.len());
        for block in &self.params.blocks {
            let b = BlockParams {
                queries: tape.constant(&block.queries),
                self_attn: block.self_attn.map("", &mut |_, t| tape.constant(t)),
                cross_attn: block.cross_attn.map("", &mut |_, t| tape.constant(t)),
                out_norm: None,
            };
            let q = if self.config.self_attention {
                refine_queries(&mut tape, b.queries, &b.self_attn)?
            } else {
                b.queries
            };
            refined.push(tape.tensor(q));
        }
        Ok(QueryCache {
            version: self.version,
            refined,
        })
    }

    fn check_cache(&self, cache: &QueryCache) -> Result<()> {
        if self.training {
            return Err(Error::Contract("query cache used in training mode".into()));
        }
        if cache.version != self.version {
            return Err(Error::Contract(format!(
                "stale query cache (built for parameter version {}, model is at {})",
                cache.version, self.version
            )));
        }
        Ok(())
    }

    /// Local features `X⁰` for one input.
    pub fn input_tokens(&self, tape: &mut Tape, vars: &BoqParams<Var>, input: &ModelInput) -> Result<(Var, Option<(usize, usize)>)> {
        let (tokens, grid) = match (&self.config.input, input) {
            (InputMode::Image { .. }, ModelInput::Image(img)) => {
                let x = tape.constant(img);
                let (tokens, grid) = feature_stem(tape, x, &vars.stem)?;
                (tokens, Some(grid))
            }
            (InputMode::Features { feature_dim, grid }, ModelInput::Features(f)) => {
                match f.shape() {
                    [_, d0] if d0 == feature_dim => {}
                    s => {
                        return Err(Error::dim(
                            "model_forward",
                            format!("features {s:?} do not have {feature_dim} columns"),
                        ))
                    }
                }
                (tape.constant(f), *grid)
            }
            (mode, _) => {
                return Err(Error::Config(format!("input does not match configured mode {mode:?}")))
            }
        };
        Ok((reduce_channels(tape, tokens, grid, &vars.reduction)?, grid))
    }

    /// Records a full forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &BoqParams<Var>,
        input: &ModelInput,
        cache: Option<&QueryCache>,
    ) -> Result<Forward> {
        if let Some(c) = cache {
            self.check_cache(c)?;
        }
        let (mut x, grid) = self.input_tokens(tape, vars, input)?;
        let mut outputs = Vec::with_capacity(vars.blocks.len());
        let mut block_outputs = Vec::with_capacity(vars.blocks.len());
        let mut cross_attention = Vec::with_capacity(vars.blocks.len());
        for (i, (encoder, block)) in vars.encoders.iter().zip(&vars.blocks).enumerate() {
            x = encoder_forward(tape, x, encoder)?;
            let (o, weights) = match cache {
                Some(c) => {
                    let q = tape.constant(&c.refined[i]);
                    cross_attend(tape, q, x, block)?
                }
                None => boq_block_forward(tape, block.queries, x, block, self.config.self_attention)?,
            };
            block_outputs.push(o);
            cross_attention.push(weights);
            outputs.push(match &block.out_norm {
                Some(n) => tape.layer_norm(o, n.gain, n.bias, LAYER_NORM_EPS)?,
                None => o,
            });
        }
        let stacked = tape.concat(&outputs, 0)?;
        let projected = tape.matmul(stacked, vars.proj_channels)?;
        let mut desc = tape.transpose(projected)?;
        if let Some(w2) = vars.proj_rows {
            desc = tape.matmul(desc, w2)?;
        }
        let desc = tape.reshape(desc, &[self.config.descriptor_dim()])?;
        let descriptor = tape.l2_normalize(desc)?;
        Ok(Forward {
            descriptor,
            block_outputs,
            cross_attention,
            grid,
        })
    }

    /// Descriptor for one input without recording gradients.
    pub fn embed(&self, input: &ModelInput, cache: Option<&QueryCache>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, input, cache)?;
        Ok(tape.tensor(fwd.descriptor))
    }

    /// Head-averaged cross-attention of selected queries in one block,
    /// reshaped to the feature grid. Each returned grid sums to one.
    pub fn export_attention(&self, input: &ModelInput, block_index: usize, query_indices: &[usize]) -> Result<Vec<Tensor>> {
        if block_index >= self.config.num_blocks {
            return Err(Error::Contract(format!(
                "block {block_index} out of range for {} blocks",
                self.config.num_blocks
            )));
        }
        let m = self.config.queries_per_block;
        if let Some(q) = query_indices.iter().find(|&&q| q >= m) {
            return Err(Error::Contract(format!("query {q} out of range for {m} queries")));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, input, None)?;
        let (gh, gw) = fwd
            .grid
            .ok_or_else(|| Error::Config("attention export needs a feature grid".into()))?;
        let weights = fwd.cross_attention[block_index];
        let (h, n) = (tape.shape(weights)[0], tape.shape(weights)[2]);
        let a = tape.value(weights);
        query_indices
            .iter()
            .map(|&q| {
                let mut grid = vec![0.0; n];
                for head in 0..h {
                    let row = &a[(head * m + q) * n..(head * m + q + 1) * n];
                    grid.iter_mut().zip(row).for_each(|(g, w)| *g += w);
                }
                grid.iter_mut().for_each(|g| *g /= h as f64);
                Tensor::new(&[gh, gw], grid)
            })
            .collect()
    }
}
