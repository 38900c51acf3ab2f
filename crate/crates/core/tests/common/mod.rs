//! Reference implementations used as test oracles. Plain loops over `f64`
//! slices, deliberately sharing no code with the library's kernels.
#![allow(dead_code)]

use davit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_scaled(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| v * scale)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

/// Row-major m×k times k×n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct nested-loop cross-correlation with asymmetric zero padding.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    (top, bottom, left, right): (usize, usize, usize, usize),
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape()[..] else { panic!() };
    let [co, _, k, _] = w.shape()[..] else { panic!() };
    let oh = (h + top + bottom - k) / stride + 1;
    let ow = (wd + left + right - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * stride + ki) as isize - top as isize;
                                let ix = (xo * stride + kj) as isize - left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[b, ci, iy as usize, ix as usize]) * w.at(&[o, ci, ki, kj]);
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

pub struct DenseAttention<'a> {
    pub qkv_w: &'a [f64],
    pub qkv_b: &'a [f64],
    pub proj_w: &'a [f64],
    pub proj_b: &'a [f64],
}

fn softmax_rows(scores: &mut [f64], len: usize) {
    for row in scores.chunks_mut(len) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
    }
}

fn project(x: &[f64], rows: usize, w: &[f64], b: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, cin, cout);
    for r in 0..rows {
        for j in 0..cout {
            y[r * cout + j] += b[j];
        }
    }
    y
}

/// Global multi-head self-attention over all H·W tokens of each image (no windows).
pub fn global_spatial_attention(x: &Tensor<f64>, p: &DenseAttention, head_width: usize) -> Vec<f64> {
    let [bsz, h, w, c] = x.shape()[..] else { panic!() };
    let n = h * w;
    let heads = c / head_width;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..bsz {
        let tokens = &x.data()[b * n * c..(b + 1) * n * c];
        let qkv = project(tokens, n, p.qkv_w, p.qkv_b, c, 3 * c);
        let mut merged = vec![0.0; n * c];
        for hd in 0..heads {
            let get = |t: usize, part: usize, d: usize| qkv[t * 3 * c + part * c + hd * head_width + d];
            let mut scores = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    scores[i * n + j] =
                        (0..head_width).map(|d| get(i, 0, d) * get(j, 1, d)).sum::<f64>() / (head_width as f64).sqrt();
                }
            }
            softmax_rows(&mut scores, n);
            for i in 0..n {
                for d in 0..head_width {
                    merged[i * c + hd * head_width + d] = (0..n).map(|j| scores[i * n + j] * get(j, 2, d)).sum();
                }
            }
        }
        out.extend(project(&merged, n, p.proj_w, p.proj_b, c, c));
    }
    out
}

/// Self-attention between channel tokens (feature length H·W) within groups.
pub fn channel_attention(x: &Tensor<f64>, p: &DenseAttention, group_width: usize, scale: f64) -> Vec<f64> {
    let [bsz, h, w, c] = x.shape()[..] else { panic!() };
    let n = h * w;
    let groups = c / group_width;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..bsz {
        let tokens = &x.data()[b * n * c..(b + 1) * n * c];
        let qkv = project(tokens, n, p.qkv_w, p.qkv_b, c, 3 * c);
        let mut merged = vec![0.0; n * c];
        for gi in 0..groups {
            let ch = |part: usize, i: usize, pos: usize| qkv[pos * 3 * c + part * c + gi * group_width + i];
            let mut scores = vec![0.0; group_width * group_width];
            for i in 0..group_width {
                for j in 0..group_width {
                    scores[i * group_width + j] = (0..n).map(|pos| ch(0, i, pos) * ch(1, j, pos)).sum::<f64>() * scale;
                }
            }
            softmax_rows(&mut scores, group_width);
            for i in 0..group_width {
                for pos in 0..n {
                    merged[pos * c + gi * group_width + i] =
                        (0..group_width).map(|j| scores[i * group_width + j] * ch(2, j, pos)).sum();
                }
            }
        }
        out.extend(project(&merged, n, p.proj_w, p.proj_b, c, c));
    }
    out
}

/// Standard normal CDF from the Maclaurin series of erf (converges fast for |x| ≤ 3).
pub fn phi(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let mut term = z;
    let mut sum = z;
    for n in 1..80 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
}

