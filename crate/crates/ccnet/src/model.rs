//! The concatenation-fusion decoder network.
//!
//! The network maps 64-channel EEG to an 11-subband target (envelope plus
//! 10 mel subbands). It is a chain of identical blocks; each block runs a
//! 5-layer CNN stack, a per-timestep linear, a causal context layer and a
//! spatial attention layer, and the next block consumes
//! `concat([eeg, context, attention])`. Inside the stack, every Sconv output
//! is concatenated with the block input before its depthwise Tconv.
//!
//! The wiring is written once, generically over an [`Exec`], so the
//! inference path (plain tensors, intermediates dropped as they go dead) and
//! the training path (tape recording for backward) cannot drift apart.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, GraphError, ParamId, ParamSet, VarId};
use crate::ops;
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<crate::tensor::ShapeError> for ModelError {
    fn from(e: crate::tensor::ShapeError) -> Self {
        ModelError::Graph(GraphError::Shape(e))
    }
}

/// Every architectural hyperparameter.
///
/// Defaults follow the six-block configuration with VLAAI-lineage filter
/// sizes; everything is configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub eeg_channels: usize,
    /// Sconv output widths for stack layers 1-4 plus the layer-5 conv width.
    pub stack_filters: [usize; 5],
    /// Kernel length of the depthwise Tconvs and the layer-5 conv.
    pub stack_kernel: usize,
    /// Channel width H after each block's linear layer.
    pub hidden_width: usize,
    /// Kernel length of the output context layer.
    pub context_kernel: usize,
    /// 11 = envelope + 10 mel subbands; 10 drops the envelope slot.
    pub output_subbands: usize,
    pub leaky_slope: f64,
    pub attention_enabled: bool,
    /// Read the output head from the last context output only, instead of
    /// `concat([eeg, ctx, att])`.
    pub head_ctx_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 6,
            eeg_channels: 64,
            stack_filters: [256, 256, 256, 128, 128],
            stack_kernel: 8,
            hidden_width: 64,
            context_kernel: 32,
            output_subbands: 11,
            leaky_slope: 0.01,
            attention_enabled: true,
            head_ctx_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_blocks < 1 {
            return Err(ModelError::Config("num_blocks must be >= 1".into()));
        }
        if self.eeg_channels < 1 {
            return Err(ModelError::Config("eeg_channels must be >= 1".into()));
        }
        if self.stack_filters.iter().any(|&f| f < 1) {
            return Err(ModelError::Config("stack_filters entries must be >= 1".into()));
        }
        if self.stack_kernel < 1 || self.context_kernel < 1 {
            return Err(ModelError::Config("kernel sizes must be >= 1".into()));
        }
        if self.hidden_width < 1 {
            return Err(ModelError::Config("hidden_width must be >= 1".into()));
        }
        if self.output_subbands < 1 {
            return Err(ModelError::Config("output_subbands must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Config("leaky_slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Channel count entering block `idx` (0-based): raw EEG for block 0,
    /// `eeg + 2H` for every later block.
    pub fn block_input_channels(&self, idx: usize) -> usize {
        if idx == 0 {
            self.eeg_channels
        } else {
            self.eeg_channels + 2 * self.hidden_width
        }
    }

    /// Channel count entering the output head.
    pub fn head_input_channels(&self) -> usize {
        if self.head_ctx_only {
            self.hidden_width
        } else {
            self.eeg_channels + 2 * self.hidden_width
        }
    }
}

/// Tconv widths and stack output width for a block whose input has `c0`
/// channels: Tconv layer i sees `stack_filters[i] + c0` channels.
pub fn stack_widths(config: &ModelConfig, c0: usize) -> ([usize; 4], usize) {
    let f = &config.stack_filters;
    ([f[0] + c0, f[1] + c0, f[2] + c0, f[3] + c0], f[4])
}

#[derive(Debug, Clone)]
struct StackLayerIds {
    sconv_w: ParamId,
    sconv_b: ParamId,
    sconv_ln_g: ParamId,
    sconv_ln_b: ParamId,
    tconv_w: ParamId,
    tconv_b: ParamId,
    tconv_ln_g: ParamId,
    tconv_ln_b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    layers: Vec<StackLayerIds>,
    conv5_w: ParamId,
    conv5_b: ParamId,
    conv5_ln_g: ParamId,
    conv5_ln_b: ParamId,
    linear_w: ParamId,
    linear_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    ctx_ln_g: ParamId,
    ctx_ln_b: ParamId,
    att: Option<(ParamId, ParamId)>,
}

/// A built network: config, parameters and the wiring handles.
///
/// Immutable during inference; training mutates the parameter set and needs
/// exclusive access.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

fn init_uniform(rng: &mut ChaCha20Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Builds a model with all weights drawn uniform in +-1/sqrt(fan_in),
/// deterministically from `seed`; layer-norm affines start at gamma=1,
/// beta=0.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    audit_channel_bookkeeping(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let k = config.stack_kernel;
    let h = config.hidden_width;
    let mut blocks = Vec::with_capacity(config.num_blocks);

    for bi in 0..config.num_blocks {
        let c0 = config.block_input_channels(bi);
        let tag = format!("block{}", bi + 1);
        let mut layers = Vec::with_capacity(4);
        let mut c_in = c0;
        for li in 0..4 {
            let f = config.stack_filters[li];
            let tconv_c = f + c0;
            let sconv_w = params.add(
                &format!("{tag}.sconv{}.w", li + 1),
                &[f, c_in],
                init_uniform(&mut rng, f * c_in, c_in),
            );
            let sconv_b = params.add(
                &format!("{tag}.sconv{}.b", li + 1),
                &[f],
                init_uniform(&mut rng, f, c_in),
            );
            let sconv_ln_g = params.add(&format!("{tag}.sconv{}.ln.g", li + 1), &[f], vec![1.0; f]);
            let sconv_ln_b = params.add(&format!("{tag}.sconv{}.ln.b", li + 1), &[f], vec![0.0; f]);
            let tconv_w = params.add(
                &format!("{tag}.tconv{}.w", li + 1),
                &[tconv_c, k],
                init_uniform(&mut rng, tconv_c * k, k),
            );
            let tconv_b = params.add(
                &format!("{tag}.tconv{}.b", li + 1),
                &[tconv_c],
                init_uniform(&mut rng, tconv_c, k),
            );
            let tconv_ln_g = params.add(
                &format!("{tag}.tconv{}.ln.g", li + 1),
                &[tconv_c],
                vec![1.0; tconv_c],
            );
            let tconv_ln_b = params.add(
                &format!("{tag}.tconv{}.ln.b", li + 1),
                &[tconv_c],
                vec![0.0; tconv_c],
            );
            layers.push(StackLayerIds {
                sconv_w,
                sconv_b,
                sconv_ln_g,
                sconv_ln_b,
                tconv_w,
                tconv_b,
                tconv_ln_g,
                tconv_ln_b,
            });
            c_in = tconv_c;
        }
        let f5 = config.stack_filters[4];
        let conv5_w = params.add(
            &format!("{tag}.conv5.w"),
            &[f5, c_in, k],
            init_uniform(&mut rng, f5 * c_in * k, c_in * k),
        );
        let conv5_b = params.add(
            &format!("{tag}.conv5.b"),
            &[f5],
            init_uniform(&mut rng, f5, c_in * k),
        );
        let conv5_ln_g = params.add(&format!("{tag}.conv5.ln.g"), &[f5], vec![1.0; f5]);
        let conv5_ln_b = params.add(&format!("{tag}.conv5.ln.b"), &[f5], vec![0.0; f5]);
        let linear_w = params.add(
            &format!("{tag}.linear.w"),
            &[h, f5],
            init_uniform(&mut rng, h * f5, f5),
        );
        let linear_b = params.add(&format!("{tag}.linear.b"), &[h], init_uniform(&mut rng, h, f5));
        let ck = config.context_kernel;
        let ctx_w = params.add(
            &format!("{tag}.ctx.w"),
            &[h, h, ck],
            init_uniform(&mut rng, h * h * ck, h * ck),
        );
        let ctx_b = params.add(&format!("{tag}.ctx.b"), &[h], init_uniform(&mut rng, h, h * ck));
        let ctx_ln_g = params.add(&format!("{tag}.ctx.ln.g"), &[h], vec![1.0; h]);
        let ctx_ln_b = params.add(&format!("{tag}.ctx.ln.b"), &[h], vec![0.0; h]);
        let att = if config.attention_enabled {
            let att_w = params.add(
                &format!("{tag}.att.w"),
                &[h, h],
                init_uniform(&mut rng, h * h, h),
            );
            let att_b = params.add(&format!("{tag}.att.b"), &[h], init_uniform(&mut rng, h, h));
            Some((att_w, att_b))
        } else {
            None
        };
        blocks.push(BlockIds {
            layers,
            conv5_w,
            conv5_b,
            conv5_ln_g,
            conv5_ln_b,
            linear_w,
            linear_b,
            ctx_w,
            ctx_b,
            ctx_ln_g,
            ctx_ln_b,
            att,
        });
    }

    let hc = config.head_input_channels();
    let head_w = params.add(
        "head.w",
        &[config.output_subbands, hc],
        init_uniform(&mut rng, config.output_subbands * hc, hc),
    );
    let head_b = params.add(
        "head.b",
        &[config.output_subbands],
        init_uniform(&mut rng, config.output_subbands, hc),
    );

    Ok(Model {
        config: config.clone(),
        params,
        blocks,
        head_w,
        head_b,
    })
}

/// Verifies the closed-form channel arithmetic against a walk of the wiring.
///
/// Walk: Sconv_i maps the running width to `F_i`; the skip concat restores
/// `F_i + c0`; the depthwise Tconv preserves that; layer 5 maps to `F_5`.
fn audit_channel_bookkeeping(config: &ModelConfig) -> Result<(), ModelError> {
    for bi in 0..config.num_blocks {
        let c0 = config.block_input_channels(bi);
        let (expected_widths, expected_out) = stack_widths(config, c0);
        for li in 0..4 {
            let mut width = config.stack_filters[li]; // Sconv
            width += c0; // skip concat with the block input
            if width != expected_widths[li] {
                return Err(ModelError::Config(format!(
                    "block {} stack layer {} width {} != closed-form {}",
                    bi + 1,
                    li + 1,
                    width,
                    expected_widths[li]
                )));
            }
        }
        let width = config.stack_filters[4]; // layer-5 conv
        if width != expected_out {
            return Err(ModelError::Config(format!(
                "block {} stack output width {} != closed-form {}",
                bi + 1,
                width,
                expected_out
            )));
        }
    }
    Ok(())
}

/// Total scalar parameter count for a config, by closed-form enumeration of
/// every parameter shape (no model is built).
pub fn param_count(config: &ModelConfig) -> usize {
    let k = config.stack_kernel;
    let h = config.hidden_width;
    let mut total = 0;
    for bi in 0..config.num_blocks {
        let c0 = config.block_input_channels(bi);
        let mut c_in = c0;
        for li in 0..4 {
            let f = config.stack_filters[li];
            let tc = f + c0;
            total += f * c_in + f; // sconv w + b
            total += 2 * f; // sconv ln
            total += tc * k + tc; // tconv w + b
            total += 2 * tc; // tconv ln
            c_in = tc;
        }
        let f5 = config.stack_filters[4];
        total += f5 * c_in * k + f5; // conv5 w + b
        total += 2 * f5; // conv5 ln
        total += h * f5 + h; // linear
        total += h * h * config.context_kernel + h; // ctx conv
        total += 2 * h; // ctx ln
        if config.attention_enabled {
            total += h * h + h;
        }
    }
    let hc = config.head_input_channels();
    total += config.output_subbands * hc + config.output_subbands;
    total
}

/// Execution backend for the shared wiring: either plain tensors (inference)
/// or tape variables (training).
pub trait Exec {
    type V: Clone;
    fn constant(&mut self, t: Tensor3) -> Self::V;
    fn pointwise(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
    fn linear(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
    fn depthwise(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
    fn temporal(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
    fn layer_norm(&mut self, x: &Self::V, g: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn causal_pad(&mut self, x: &Self::V, amount: usize) -> Self::V;
    fn concat(&mut self, xs: &[&Self::V]) -> Result<Self::V, GraphError>;
    fn attention(&mut self, x: &Self::V, w: ParamId, b: ParamId) -> Result<Self::V, GraphError>;
}

impl<'p> Exec for Graph<'p> {
    type V = VarId;

    fn constant(&mut self, t: Tensor3) -> VarId {
        Graph::constant(self, t)
    }
    fn pointwise(&mut self, x: &VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        self.pointwise_conv(*x, w, b)
    }
    fn linear(&mut self, x: &VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        self.linear_per_timestep(*x, w, b)
    }
    fn depthwise(&mut self, x: &VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        self.depthwise_conv(*x, w, b)
    }
    fn temporal(&mut self, x: &VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        self.temporal_conv(*x, w, b)
    }
    fn layer_norm(&mut self, x: &VarId, g: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        Graph::layer_norm(self, *x, g, b)
    }
    fn leaky_relu(&mut self, x: &VarId, slope: f64) -> VarId {
        Graph::leaky_relu(self, *x, slope)
    }
    fn causal_pad(&mut self, x: &VarId, amount: usize) -> VarId {
        Graph::causal_pad(self, *x, amount)
    }
    fn concat(&mut self, xs: &[&VarId]) -> Result<VarId, GraphError> {
        let ids: Vec<VarId> = xs.iter().map(|v| **v).collect();
        self.concat_channels(&ids)
    }
    fn attention(&mut self, x: &VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        self.spatial_attention(*x, w, b)
    }
}

/// Tape-free executor: applies kernels directly and lets intermediates drop.
struct InferExec<'a> {
    params: &'a ParamSet,
}

impl<'a> Exec for InferExec<'a> {
    type V = Tensor3;

    fn constant(&mut self, t: Tensor3) -> Tensor3 {
        t
    }
    fn pointwise(&mut self, x: &Tensor3, w: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        Ok(ops::pointwise_conv(x, self.params.values(w), self.params.values(b))?)
    }
    fn linear(&mut self, x: &Tensor3, w: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        Ok(ops::linear_per_timestep(x, self.params.values(w), self.params.values(b))?)
    }
    fn depthwise(&mut self, x: &Tensor3, w: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        let kernel = *self.params.get(w).value.shape.last().unwrap();
        Ok(ops::depthwise_temporal_conv(
            x,
            self.params.values(w),
            self.params.values(b),
            kernel,
        )?)
    }
    fn temporal(&mut self, x: &Tensor3, w: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        let shape = &self.params.get(w).value.shape;
        Ok(ops::temporal_conv(
            x,
            self.params.values(w),
            self.params.values(b),
            shape[1],
            shape[2],
        )?)
    }
    fn layer_norm(&mut self, x: &Tensor3, g: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        let (out, _) = ops::layer_norm(x, self.params.values(g), self.params.values(b))?;
        Ok(out)
    }
    fn leaky_relu(&mut self, x: &Tensor3, slope: f64) -> Tensor3 {
        ops::leaky_relu(x, slope)
    }
    fn causal_pad(&mut self, x: &Tensor3, amount: usize) -> Tensor3 {
        ops::causal_pad(x, amount)
    }
    fn concat(&mut self, xs: &[&Tensor3]) -> Result<Tensor3, GraphError> {
        Ok(ops::concat_channels(xs)?)
    }
    fn attention(&mut self, x: &Tensor3, w: ParamId, b: ParamId) -> Result<Tensor3, GraphError> {
        let (out, _) = ops::spatial_attention(x, self.params.values(w), self.params.values(b))?;
        Ok(out)
    }
}

/// CNN stack: four Sconv/Tconv layers with skip concats, then the layer-5
/// full temporal conv. Preserves time length via causal padding.
fn stack_forward<E: Exec>(
    e: &mut E,
    cfg: &ModelConfig,
    ids: &BlockIds,
    block_input: &E::V,
) -> Result<E::V, GraphError> {
    let k = cfg.stack_kernel;
    let slope = cfg.leaky_slope;
    let mut x = block_input.clone();
    for layer in &ids.layers {
        let s = e.pointwise(&x, layer.sconv_w, layer.sconv_b)?;
        let s = e.layer_norm(&s, layer.sconv_ln_g, layer.sconv_ln_b)?;
        let s = e.leaky_relu(&s, slope);
        // the Sconv LLP's pad is applied after the skip concat so both
        // concat parts stay time-aligned (padding commutes with concat)
        let cat = e.concat(&[&s, block_input])?;
        let padded = e.causal_pad(&cat, k - 1);
        let t = e.depthwise(&padded, layer.tconv_w, layer.tconv_b)?;
        let t = e.layer_norm(&t, layer.tconv_ln_g, layer.tconv_ln_b)?;
        x = e.leaky_relu(&t, slope);
    }
    // the Tconv4 LLP pads for the layer-5 conv
    let padded = e.causal_pad(&x, k - 1);
    let c5 = e.temporal(&padded, ids.conv5_w, ids.conv5_b)?;
    let c5 = e.layer_norm(&c5, ids.conv5_ln_g, ids.conv5_ln_b)?;
    Ok(e.leaky_relu(&c5, slope))
}

/// One block: stack -> linear -> context layer -> attention. Returns
/// `(ctx, att)`; with attention disabled, `att` is the context output.
fn block_forward<E: Exec>(
    e: &mut E,
    cfg: &ModelConfig,
    ids: &BlockIds,
    eeg: &E::V,
    prev: Option<(&E::V, &E::V)>,
) -> Result<(E::V, E::V), GraphError> {
    let block_input = match prev {
        None => eeg.clone(),
        Some((ctx, att)) => e.concat(&[eeg, ctx, att])?,
    };
    let stack_out = stack_forward(e, cfg, ids, &block_input)?;
    let lin = e.linear(&stack_out, ids.linear_w, ids.linear_b)?;
    // context layer order: pad, conv, LeakyReLU, layer norm
    let padded = e.causal_pad(&lin, cfg.context_kernel - 1);
    let c = e.temporal(&padded, ids.ctx_w, ids.ctx_b)?;
    let c = e.leaky_relu(&c, cfg.leaky_slope);
    let ctx = e.layer_norm(&c, ids.ctx_ln_g, ids.ctx_ln_b)?;
    let att = match ids.att {
        Some((w, b)) => e.attention(&ctx, w, b)?,
        None => ctx.clone(),
    };
    Ok((ctx, att))
}

fn forward_on<E: Exec>(e: &mut E, model: &Model, eeg: &E::V) -> Result<E::V, GraphError> {
    let cfg = &model.config;
    let mut state: Option<(E::V, E::V)> = None;
    for ids in &model.blocks {
        let (ctx, att) = block_forward(e, cfg, ids, eeg, state.as_ref().map(|(c, a)| (c, a)))?;
        state = Some((ctx, att));
    }
    let (ctx, att) = state.expect("num_blocks >= 1");
    let head_in = if cfg.head_ctx_only {
        ctx
    } else {
        e.concat(&[eeg, &ctx, &att])?
    };
    e.pointwise(&head_in, model.head_w, model.head_b)
}

impl Model {
    /// Inference forward pass: `(B, eeg_channels, T)` to
    /// `(B, output_subbands, T)`, no tape retained.
    pub fn forward(&self, eeg: &Tensor3) -> Result<Tensor3, ModelError> {
        self.check_input(eeg)?;
        let mut e = InferExec { params: &self.params };
        let input = e.constant(eeg.clone());
        Ok(forward_on(&mut e, self, &input)?)
    }

    /// Records the forward pass on `g` (which must borrow `self.params`) and
    /// returns the prediction node.
    pub fn forward_graph(&self, g: &mut Graph<'_>, eeg: &Tensor3) -> Result<VarId, ModelError> {
        self.check_input(eeg)?;
        let input = g.constant(eeg.clone());
        Ok(forward_on(g, self, &input)?)
    }

    fn check_input(&self, eeg: &Tensor3) -> Result<(), ModelError> {
        if eeg.channels() != self.config.eeg_channels {
            return Err(crate::tensor::ShapeError::ChannelMismatch {
                expected: self.config.eeg_channels,
                got: eeg.channels(),
            }
            .into());
        }
        Ok(())
    }

    /// Zeroes one block's attention parameters (test/ablation hook): a zero
    /// score map makes the attention layer an exact identity.
    pub fn zero_attention(&mut self) {
        for b in 0..self.blocks.len() {
            if let Some((w, bias)) = self.blocks[b].att {
                self.params.get_mut(w).value.data.fill(0.0);
                self.params.get_mut(bias).value.data.fill(0.0);
            }
        }
    }
}
