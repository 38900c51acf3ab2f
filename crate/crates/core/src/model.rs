//! The four-stage dual-attention pyramid.
//!
//! Each stage is a strided patch-embedding convolution followed by `depth` dual
//! attention blocks. A block runs, with pre-norm residual connections:
//! spatial window attention, FFN, channel group attention, FFN.
//!
//! Parameters live in one flat, named list so that checkpoints and the
//! optimizer can walk them in a fixed order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, AttentionVars, ChannelScale};
use crate::autodiff::{Graph, Pad2d, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub embed_kernel: usize,
    pub embed_stride: usize,
    /// Symmetric zero padding of the embedding convolution.
    pub embed_pad: usize,
    /// Zero-pad bottom/right so the strided kernel covers every row and column,
    /// giving `ceil(input / stride)` outputs for a kernel equal to its stride.
    pub ceil_pad: bool,
    pub channels: usize,
    pub depth: usize,
    pub window_size: usize,
    /// Channels per head (spatial) and per group (channel).
    pub head_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub ffn_expansion: f64,
    pub channel_scale: ChannelScale,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl StageConfig {
    /// Spatial extent after this stage's patch embedding.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.embed_pad + self.extra_pad(input);
        if self.embed_kernel > padded {
            return Err(Error::Config(format!(
                "kernel {} does not fit a padded extent of {padded}",
                self.embed_kernel
            )));
        }
        Ok((padded - self.embed_kernel) / self.embed_stride + 1)
    }

    /// Bottom/right padding added on top of `embed_pad` by the ceil rule.
    pub fn extra_pad(&self, input: usize) -> usize {
        let padded = input + 2 * self.embed_pad;
        if !self.ceil_pad || padded < self.embed_kernel {
            return 0;
        }
        let rem = (padded - self.embed_kernel) % self.embed_stride;
        if rem == 0 { 0 } else { self.embed_stride - rem }
    }

    pub fn heads(&self) -> usize {
        self.channels / self.head_width
    }
}

impl ModelConfig {
    /// Four stages with widths 96/192/384/768, 7×7 windows, 32-channel heads
    /// and one dual block per stage, for 300×300 RGB input and ten classes.
    pub fn base() -> Self {
        let stage = |k, s, p, ceil, c| StageConfig {
            embed_kernel: k,
            embed_stride: s,
            embed_pad: p,
            ceil_pad: ceil,
            channels: c,
            depth: 1,
            window_size: 7,
            head_width: 32,
        };
        ModelConfig {
            input_size: 300,
            input_channels: 3,
            num_classes: 10,
            stages: vec![
                stage(7, 4, 3, false, 96),
                stage(2, 2, 0, true, 192),
                stage(2, 2, 0, true, 384),
                stage(2, 2, 0, true, 768),
            ],
            ffn_expansion: 4.0,
            channel_scale: ChannelScale::GroupWidth,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// A desk-scale two-stage model for 32×32 input (≈37k parameters).
    pub fn toy() -> Self {
        let mut cfg = ModelConfig::base();
        cfg.input_size = 32;
        cfg.stages.truncate(2);
        for (s, c) in cfg.stages.iter_mut().zip([16, 32]) {
            s.channels = c;
            s.head_width = 8;
            s.window_size = 4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_channels == 0 || self.num_classes == 0 {
            return bad("input size, input channels and class count must be >= 1".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if !(self.ffn_expansion > 0.0) || !self.ffn_expansion.is_finite() {
            return bad(format!("ffn expansion must be positive, got {}", self.ffn_expansion));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad(format!("layer norm eps must be positive, got {}", self.layer_norm_eps));
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init std must be positive, got {}", self.init_std));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.head_width == 0 || s.channels % s.head_width != 0 {
                return bad(format!(
                    "stage {}: {} channels not divisible by head width {}",
                    i + 1,
                    s.channels,
                    s.head_width
                ));
            }
            if s.depth == 0 || s.window_size == 0 || s.embed_kernel == 0 || s.embed_stride == 0 {
                return bad(format!("stage {}: depth, window, kernel and stride must be >= 1", i + 1));
            }
        }
        self.stage_sizes().map(|_| ())
    }

    /// Spatial extent at the output of every stage.
    pub fn stage_sizes(&self) -> Result<Vec<usize>> {
        let mut extent = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                extent = s.output_extent(extent)?;
                Ok(extent)
            })
            .collect()
    }

    pub fn ffn_hidden(&self, channels: usize) -> usize {
        ((channels as f64) * self.ffn_expansion).round().max(1.0) as usize
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.input_channels;
        for s in &self.stages {
            let c = s.channels;
            let hidden = self.ffn_hidden(c);
            let attention = (c * 3 * c + 3 * c) + (c * c + c);
            let ffn = (c * hidden + hidden) + (hidden * c + c);
            let norms = 4 * 2 * c;
            total += cin * c * s.embed_kernel * s.embed_kernel + c;
            total += s.depth * (2 * attention + 2 * ffn + norms);
            cin = c;
        }
        total + 2 * cin + cin * self.num_classes + self.num_classes
    }

    /// Stable 64-bit digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    qkv: LinearIdx,
    proj: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
struct FfnIdx {
    fc1: LinearIdx,
    fc2: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    norm1: NormIdx,
    spatial: AttnIdx,
    norm2: NormIdx,
    ffn1: FfnIdx,
    norm3: NormIdx,
    channel: AttnIdx,
    norm4: NormIdx,
    ffn2: FfnIdx,
}

#[derive(Clone, Debug)]
struct StageIdx {
    embed: LinearIdx,
    blocks: Vec<BlockIdx>,
}

#[derive(Clone, Copy, Debug)]
struct HeadIdx {
    norm: NormIdx,
    fc: LinearIdx,
}

/// An instantiated model: configuration plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stages: Vec<StageIdx>,
    head: HeadIdx,
}

/// Per-stage outputs recorded by [`Model::forward_traced`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stage_outputs: Vec<Var>,
    pub logits: Var,
}

struct Builder<'a, T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    std: f64,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>) -> Result<usize> {
        let t = Tensor::truncated_normal(shape, 0.0, self.std, self.rng)?;
        Ok(self.push(name, t))
    }

    fn linear(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<LinearIdx> {
        let weight = self.weight(format!("{prefix}.weight"), vec![cin, cout])?;
        let bias = self.push(format!("{prefix}.bias"), Tensor::zeros([cout]));
        Ok(LinearIdx { weight, bias })
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormIdx {
        NormIdx {
            gamma: self.push(format!("{prefix}.weight"), Tensor::ones([c])),
            beta: self.push(format!("{prefix}.bias"), Tensor::zeros([c])),
        }
    }

    fn attention(&mut self, prefix: &str, c: usize) -> Result<AttnIdx> {
        Ok(AttnIdx {
            qkv: self.linear(&format!("{prefix}.qkv"), c, 3 * c)?,
            proj: self.linear(&format!("{prefix}.proj"), c, c)?,
        })
    }

    fn ffn(&mut self, prefix: &str, c: usize, hidden: usize) -> Result<FfnIdx> {
        Ok(FfnIdx {
            fc1: self.linear(&format!("{prefix}.fc1"), c, hidden)?,
            fc2: self.linear(&format!("{prefix}.fc2"), hidden, c)?,
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with truncated-normal weights, zero biases and unit norm gains.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { names: Vec::new(), params: Vec::new(), std: config.init_std, rng: &mut rng };
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut cin = config.input_channels;
        for (si, s) in config.stages.iter().enumerate() {
            let c = s.channels;
            let k = s.embed_kernel;
            let p = format!("stages.{si}");
            let weight = b.weight(format!("{p}.embed.weight"), vec![c, cin, k, k])?;
            let bias = b.push(format!("{p}.embed.bias"), Tensor::zeros([c]));
            let hidden = config.ffn_hidden(c);
            let mut blocks = Vec::with_capacity(s.depth);
            for bi in 0..s.depth {
                let p = format!("{p}.blocks.{bi}");
                blocks.push(BlockIdx {
                    norm1: b.norm(&format!("{p}.norm1"), c),
                    spatial: b.attention(&format!("{p}.spatial_attn"), c)?,
                    norm2: b.norm(&format!("{p}.norm2"), c),
                    ffn1: b.ffn(&format!("{p}.ffn1"), c, hidden)?,
                    norm3: b.norm(&format!("{p}.norm3"), c),
                    channel: b.attention(&format!("{p}.channel_attn"), c)?,
                    norm4: b.norm(&format!("{p}.norm4"), c),
                    ffn2: b.ffn(&format!("{p}.ffn2"), c, hidden)?,
                });
            }
            stages.push(StageIdx { embed: LinearIdx { weight, bias }, blocks });
            cin = c;
        }
        let head = HeadIdx {
            norm: b.norm("head.norm", cin),
            fc: b.linear("head.fc", cin, config.num_classes)?,
        };
        Ok(Model { config: config.clone(), names: b.names, params: b.params, stages, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Number of scalar parameters actually allocated.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same architecture and weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stages: self.stages.clone(),
            head: self.head,
        }
    }

    /// Places every parameter on `g`, in [`Model::params`] order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Handles for block `block` of stage `stage`, given the output of [`Model::bind`].
    pub fn block_vars(&self, vars: &[Var], stage: usize, block: usize) -> Option<DualBlockVars> {
        let idx = self.stages.get(stage)?.blocks.get(block)?;
        let mut bv = idx.bind(vars);
        let width = self.config.stages[stage].head_width;
        bv.spatial.head_width = width;
        bv.channel.head_width = width;
        Some(bv)
    }

    /// Logits for a `B×C×S×S` image batch, evaluated without gradient recording.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let logits = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(logits).clone())
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<Var> {
        self.forward_traced(g, vars, images).map(|t| t.logits)
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let s = cfg.input_size;
        match g.shape(images) {
            [_, c, h, w] if *c == cfg.input_channels && *h == s && *w == s => {}
            other => {
                return Err(Error::shape(
                    "forward",
                    format!("expected B×{}×{s}×{s} images, got {other:?}", cfg.input_channels),
                ))
            }
        }
        if vars.len() != self.params.len() {
            return Err(Error::shape("forward", "parameter bindings do not match the model"));
        }
        let mut x = images;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for (si, (stage, idx)) in cfg.stages.iter().zip(&self.stages).enumerate() {
            if si > 0 {
                x = g.permute(x, &[0, 3, 1, 2])?;
            }
            x = patch_embed(g, x, vars[idx.embed.weight], vars[idx.embed.bias], stage)?;
            for block in &idx.blocks {
                let bv = block.bind(vars);
                x = dual_attention_block(g, x, &bv, stage, cfg)?;
            }
            stage_outputs.push(x);
        }
        let shape = g.shape(x).to_vec();
        let tokens = g.reshape(x, vec![shape[0], shape[1] * shape[2], shape[3]])?;
        let eps = T::of(cfg.layer_norm_eps);
        let h = self.head;
        let normed = g.layer_norm(tokens, vars[h.norm.gamma], vars[h.norm.beta], eps)?;
        let pooled = g.mean_axis(normed, 1)?;
        let logits = g.linear(pooled, vars[h.fc.weight], vars[h.fc.bias])?;
        Ok(ForwardTrace { stage_outputs, logits })
    }
}

/// Graph handles for one dual attention block.
#[derive(Clone, Copy, Debug)]
pub struct DualBlockVars {
    pub norms: [(Var, Var); 4],
    pub spatial: AttentionVars,
    pub channel: AttentionVars,
    /// (fc1 weight, fc1 bias, fc2 weight, fc2 bias) for the two FFNs.
    pub ffns: [(Var, Var, Var, Var); 2],
}

impl BlockIdx {
    fn bind(&self, v: &[Var]) -> DualBlockVars {
        let norm = |n: NormIdx| (v[n.gamma], v[n.beta]);
        let attn = |a: AttnIdx, width: usize| AttentionVars {
            qkv_weight: v[a.qkv.weight],
            qkv_bias: v[a.qkv.bias],
            proj_weight: v[a.proj.weight],
            proj_bias: v[a.proj.bias],
            head_width: width,
        };
        let ffn = |f: FfnIdx| (v[f.fc1.weight], v[f.fc1.bias], v[f.fc2.weight], v[f.fc2.bias]);
        DualBlockVars {
            norms: [norm(self.norm1), norm(self.norm2), norm(self.norm3), norm(self.norm4)],
            // head width is filled in by the caller's stage config
            spatial: attn(self.spatial, 0),
            channel: attn(self.channel, 0),
            ffns: [ffn(self.ffn1), ffn(self.ffn2)],
        }
    }
}

/// Strided convolution from an N×C×H×W map to a channels-last N×H'×W'×C' map.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var, s: &StageConfig) -> Result<Var> {
    let [_, _, h, w] = g.shape(x)[..] else {
        return Err(Error::shape("patch_embed", format!("expected N×C×H×W, got {:?}", g.shape(x))));
    };
    let pad = Pad2d {
        top: s.embed_pad,
        left: s.embed_pad,
        bottom: s.embed_pad + s.extra_pad(h),
        right: s.embed_pad + s.extra_pad(w),
    };
    let y = g.conv2d(x, weight, s.embed_stride, pad)?;
    let y = g.permute(y, &[0, 2, 3, 1])?;
    g.add_bias(y, bias)
}

fn ffn<T: Scalar>(g: &mut Graph<T>, x: Var, (w1, b1, w2, b2): (Var, Var, Var, Var)) -> Result<Var> {
    let hidden = g.linear(x, w1, b1)?;
    let hidden = g.gelu(hidden)?;
    g.linear(hidden, w2, b2)
}

/// One dual attention block on a `B×H×W×C` map.
pub fn dual_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &DualBlockVars,
    s: &StageConfig,
    cfg: &ModelConfig,
) -> Result<Var> {
    let c = *g.shape(x).last().expect("rank >= 1");
    if g.shape(x).len() != 4 || c != s.channels {
        return Err(Error::shape(
            "dual_attention_block",
            format!("expected B×H×W×{}, got {:?}", s.channels, g.shape(x)),
        ));
    }
    let eps = T::of(cfg.layer_norm_eps);
    let spatial = AttentionVars { head_width: s.head_width, ..p.spatial };
    let channel = AttentionVars { head_width: s.head_width, ..p.channel };

    let mut x = x;
    for step in 0..4 {
        let (gamma, beta) = p.norms[step];
        let h = g.layer_norm(x, gamma, beta, eps)?;
        let h = match step {
            0 => attention::spatial_window_attention(g, h, &spatial, s.window_size)?,
            2 => attention::channel_group_attention(g, h, &channel, cfg.channel_scale)?,
            _ => ffn(g, h, p.ffns[step / 2])?,
        };
        x = g.add(x, h)?;
    }
    Ok(x)
}
