//! Spatial window multi-head attention and channel group single-head attention.
//!
//! Both kernels take a channels-last `B×H×W×C` feature map and return one of the
//! same shape. They are composed from [`Graph`] primitives, so gradients come
//! for free.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, PAD_INDEX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of one attention kernel: a fused C→3C query/key/value map and a C→C
/// output projection. Linear weights are stored input-major (`in×out`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    /// C_h for the spatial kernel, C_g for the channel kernel.
    pub head_width: usize,
}

/// [`AttentionParams`] after being placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub head_width: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, head_width: usize, std: f64, rng: &mut R) -> Result<Self> {
        check_width(channels, head_width)?;
        Ok(AttentionParams {
            qkv_weight: Tensor::truncated_normal([channels, 3 * channels], 0.0, std, rng)?,
            qkv_bias: Tensor::zeros([3 * channels]),
            proj_weight: Tensor::truncated_normal([channels, channels], 0.0, std, rng)?,
            proj_bias: Tensor::zeros([channels]),
            head_width,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_bias.len()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AttentionVars {
        AttentionVars {
            qkv_weight: g.leaf(self.qkv_weight.clone(), trainable),
            qkv_bias: g.leaf(self.qkv_bias.clone(), trainable),
            proj_weight: g.leaf(self.proj_weight.clone(), trainable),
            proj_bias: g.leaf(self.proj_bias.clone(), trainable),
            head_width: self.head_width,
        }
    }
}

fn check_width(channels: usize, width: usize) -> Result<()> {
    if width == 0 || channels % width != 0 {
        return Err(Error::InvalidArgument(format!(
            "{channels} channels are not divisible by head/group width {width}"
        )));
    }
    Ok(())
}

/// Scale applied to channel-attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelScale {
    /// `1/sqrt(C_g)`, the number of channel tokens per group.
    #[default]
    GroupWidth,
    /// `1/sqrt(H·W)`, the channel token feature length.
    TokenLength,
}

/// Layout of a feature map cut into non-overlapping square windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub batch: usize,
    pub channels: usize,
    pub window_size: usize,
    pub original_h: usize,
    pub original_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// One flag per token of the padded grid, row-major; `true` marks a real token.
    pub pad_mask: Vec<bool>,
}

impl WindowGrid {
    pub fn new(batch: usize, h: usize, w: usize, channels: usize, window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::InvalidArgument("window size must be >= 1".into()));
        }
        let padded_h = h.div_ceil(window_size) * window_size;
        let padded_w = w.div_ceil(window_size) * window_size;
        let pad_mask = (0..padded_h * padded_w)
            .map(|i| i / padded_w < h && i % padded_w < w)
            .collect();
        Ok(WindowGrid {
            batch,
            channels,
            window_size,
            original_h: h,
            original_w: w,
            padded_h,
            padded_w,
            pad_mask,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_h / self.window_size) * (self.padded_w / self.window_size)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    pub fn has_padding(&self) -> bool {
        self.padded_h != self.original_h || self.padded_w != self.original_w
    }

    /// Padded-grid coordinates of token `t` in window `win` (of one image).
    fn coords(&self, win: usize, t: usize) -> (usize, usize) {
        let ws = self.window_size;
        let per_row = self.padded_w / ws;
        ((win / per_row) * ws + t / ws, (win % per_row) * ws + t % ws)
    }

    /// Whether token `t` of window `win` is a real (unpadded) token.
    pub fn is_real(&self, win: usize, t: usize) -> bool {
        let (y, x) = self.coords(win, t);
        self.pad_mask[y * self.padded_w + x]
    }
}

/// Cuts a `B×H×W×C` map into `(B·nW)×w²×C` windows, zero-padding bottom/right.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, fmap: Var, window_size: usize) -> Result<(Var, WindowGrid)> {
    let [b, h, w, c] = g.shape(fmap)[..] else {
        return Err(Error::shape("window_partition", format!("expected B×H×W×C, got {:?}", g.shape(fmap))));
    };
    let grid = WindowGrid::new(b, h, w, c, window_size)?;
    let (nw, tw) = (grid.windows_per_image(), grid.tokens_per_window());
    let mut index = Vec::with_capacity(b * nw * tw * c);
    for bi in 0..b {
        for win in 0..nw {
            for t in 0..tw {
                let (y, x) = grid.coords(win, t);
                let real = y < h && x < w;
                for ci in 0..c {
                    index.push(if real { ((bi * h + y) * w + x) * c + ci } else { PAD_INDEX });
                }
            }
        }
    }
    let windows = g.gather(fmap, vec![b * nw, tw, c], index)?;
    Ok((windows, grid))
}

/// Inverse of [`window_partition`]; padded tokens are discarded.
pub fn window_reverse<T: Scalar>(g: &mut Graph<T>, windows: Var, grid: &WindowGrid) -> Result<Var> {
    let (nw, tw) = (grid.windows_per_image(), grid.tokens_per_window());
    let expected = [grid.batch * nw, tw, grid.channels];
    if g.shape(windows) != expected {
        return Err(Error::shape(
            "window_reverse",
            format!("windows {:?} do not match grid {expected:?}", g.shape(windows)),
        ));
    }
    let (h, w, c, ws) = (grid.original_h, grid.original_w, grid.channels, grid.window_size);
    let per_row = grid.padded_w / ws;
    let mut index = Vec::with_capacity(grid.batch * h * w * c);
    for bi in 0..grid.batch {
        for y in 0..h {
            for x in 0..w {
                let win = (y / ws) * per_row + x / ws;
                let t = (y % ws) * ws + x % ws;
                for ci in 0..c {
                    index.push(((bi * nw + win) * tw + t) * c + ci);
                }
            }
        }
    }
    g.gather(windows, vec![grid.batch, h, w, c], index)
}

/// Splits a `rows×T×3C` fused projection into per-head tensors.
///
/// Returns `(rows·heads)×T×width` for `part` 0/1/2 (q/k/v), or with the last
/// two axes swapped when `transposed` is set.
fn split_heads<T: Scalar>(
    g: &mut Graph<T>,
    qkv: Var,
    part: usize,
    width: usize,
    transposed: bool,
) -> Result<Var> {
    let [rows, tokens, c3] = g.shape(qkv)[..] else { unreachable!("qkv is rank 3") };
    let c = c3 / 3;
    let heads = c / width;
    let mut index = Vec::with_capacity(rows * tokens * c);
    for r in 0..rows {
        for h in 0..heads {
            let src = |t: usize, d: usize| (r * tokens + t) * c3 + part * c + h * width + d;
            if transposed {
                for d in 0..width {
                    for t in 0..tokens {
                        index.push(src(t, d));
                    }
                }
            } else {
                for t in 0..tokens {
                    for d in 0..width {
                        index.push(src(t, d));
                    }
                }
            }
        }
    }
    let shape = if transposed { vec![rows * heads, width, tokens] } else { vec![rows * heads, tokens, width] };
    g.gather(qkv, shape, index)
}

/// Inverse of the untransposed [`split_heads`] layout: `(rows·heads)×T×width` → `rows×T×C`.
fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, rows: usize, transposed: bool) -> Result<Var> {
    let [rh, a, b] = g.shape(x)[..] else { unreachable!("heads are rank 3") };
    let heads = rh / rows;
    let (tokens, width) = if transposed { (b, a) } else { (a, b) };
    let c = heads * width;
    let mut index = Vec::with_capacity(rows * tokens * c);
    for r in 0..rows {
        for t in 0..tokens {
            for h in 0..heads {
                for d in 0..width {
                    let base = (r * heads + h) * tokens * width;
                    index.push(if transposed { base + d * tokens + t } else { base + t * width + d });
                }
            }
        }
    }
    g.gather(x, vec![rows, tokens, c], index)
}

/// Output of an attention kernel together with its post-softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// `(groups)×T×T` attention rows, one block per window-head or batch-group.
    pub weights: Var,
}

/// Multi-head self-attention computed independently inside each window.
pub fn spatial_window_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    window_size: usize,
) -> Result<Var> {
    spatial_window_attention_traced(g, x, p, window_size).map(|t| t.output)
}

pub fn spatial_window_attention_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    window_size: usize,
) -> Result<AttentionTrace> {
    let c = *g.shape(x).last().expect("rank >= 1");
    check_width(c, p.head_width)?;
    let heads = c / p.head_width;
    let (windows, grid) = window_partition(g, x, window_size)?;
    let rows = g.shape(windows)[0];
    let tokens = grid.tokens_per_window();

    let qkv = g.linear(windows, p.qkv_weight, p.qkv_bias)?;
    let q = split_heads(g, qkv, 0, p.head_width, false)?;
    let kt = split_heads(g, qkv, 1, p.head_width, true)?;
    let v = split_heads(g, qkv, 2, p.head_width, false)?;

    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (p.head_width as f64).sqrt()))?;
    let weights = if grid.has_padding() {
        let nw = grid.windows_per_image();
        let mut keep = Vec::with_capacity(rows * heads * tokens * tokens);
        for r in 0..rows {
            let real: Vec<bool> = (0..tokens).map(|t| grid.is_real(r % nw, t)).collect();
            for _ in 0..heads * tokens {
                keep.extend_from_slice(&real);
            }
        }
        g.softmax_masked(scores, &keep)?
    } else {
        g.softmax(scores, 2)?
    };
    let mixed = g.matmul(weights, v)?;
    let merged = merge_heads(g, mixed, rows, false)?;
    let projected = g.linear(merged, p.proj_weight, p.proj_bias)?;
    let output = window_reverse(g, projected, &grid)?;
    Ok(AttentionTrace { output, weights })
}

/// Single-head self-attention over channel tokens, within groups of `head_width` channels.
pub fn channel_group_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    scale: ChannelScale,
) -> Result<Var> {
    channel_group_attention_traced(g, x, p, scale).map(|t| t.output)
}

pub fn channel_group_attention_traced<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionVars,
    scale: ChannelScale,
) -> Result<AttentionTrace> {
    let shape = g.shape(x).to_vec();
    let [b, h, w, c] = shape[..] else {
        return Err(Error::shape("channel_group_attention", format!("expected B×H×W×C, got {shape:?}")));
    };
    check_width(c, p.head_width)?;
    let n = h * w;
    let tokens = g.reshape(x, vec![b, n, c])?;
    let qkv = g.linear(tokens, p.qkv_weight, p.qkv_bias)?;
    // channel tokens: each group is a C_g×(H·W) matrix
    let q = split_heads(g, qkv, 0, p.head_width, true)?;
    let k = split_heads(g, qkv, 1, p.head_width, false)?;
    let v = split_heads(g, qkv, 2, p.head_width, true)?;

    let scores = g.matmul(q, k)?;
    let denom = match scale {
        ChannelScale::GroupWidth => p.head_width,
        ChannelScale::TokenLength => n,
    };
    let scores = g.scale(scores, T::of(1.0 / (denom as f64).sqrt()))?;
    let weights = g.softmax(scores, 2)?;
    let mixed = g.matmul(weights, v)?;
    let merged = merge_heads(g, mixed, b, true)?;
    let projected = g.linear(merged, p.proj_weight, p.proj_bias)?;
    let output = g.reshape(projected, shape)?;
    Ok(AttentionTrace { output, weights })
}
