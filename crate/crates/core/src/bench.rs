//! Inference throughput measurement.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_name: String,
    pub param_count: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Wall-clock seconds spent in the timed loop.
    pub elapsed_s: f64,
    /// `batch_size · timed_iters / elapsed_s`.
    pub fps: f64,
    pub lat_mean_ms: f64,
    pub lat_p50_ms: f64,
    pub lat_p95_ms: f64,
    pub environment: String,
}

/// One CSV row; the column order is part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model_name: String,
    pub param_count: usize,
    pub batch_size: usize,
    pub fps: f64,
    pub lat_mean_ms: f64,
    pub lat_p50_ms: f64,
    pub lat_p95_ms: f64,
    pub environment: String,
}

impl From<&BenchReport> for BenchRow {
    fn from(r: &BenchReport) -> Self {
        BenchRow {
            model_name: r.model_name.clone(),
            param_count: r.param_count,
            batch_size: r.batch_size,
            fps: r.fps,
            lat_mean_ms: r.lat_mean_ms,
            lat_p50_ms: r.lat_p50_ms,
            lat_p95_ms: r.lat_p95_ms,
            environment: r.environment.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Measurements per model; the median-fps one is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams { batch_size: 1, warmup_iters: 20, timed_iters: 100, repeats: 1, seed: 0 }
    }
}

pub fn environment() -> String {
    format!(
        "{}-{}, {} worker threads, cpu",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `timed_iters` inference forwards on one fixed random batch of
/// `input_shape` after `warmup_iters` untimed ones.
pub fn measure_fps<T: Scalar>(
    model: &Model<T>,
    name: &str,
    input_shape: &[usize],
    warmup_iters: usize,
    timed_iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    if timed_iters == 0 {
        return Err(Error::InvalidArgument("timed_iters must be at least 1".into()));
    }
    let cfg = model.config();
    match input_shape {
        [b, c, h, w] if *b >= 1 && *c == cfg.input_channels && *h == cfg.input_size && *w == cfg.input_size => {}
        _ => {
            return Err(Error::shape(
                "measure_fps",
                format!("input {input_shape:?}, model takes B×{0}×{1}×{1}", cfg.input_channels, cfg.input_size),
            ))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new(0.0, 1.0).expect("valid range");
    let n: usize = input_shape.iter().product();
    let input = Tensor::new(input_shape.to_vec(), (0..n).map(|_| T::of(uniform.sample(&mut rng))).collect())?;
    for _ in 0..warmup_iters {
        model.forward(&input)?;
    }
    let mut lat = Vec::with_capacity(timed_iters);
    let start = Instant::now();
    for _ in 0..timed_iters {
        let t0 = Instant::now();
        std::hint::black_box(model.forward(&input)?);
        lat.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let elapsed_s = start.elapsed().as_secs_f64();
    if !(elapsed_s > 0.0) {
        return Err(Error::InvalidArgument("timer resolution too coarse: zero elapsed time".into()));
    }
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    lat.sort_by(f64::total_cmp);
    let batch = input_shape[0];
    Ok(BenchReport {
        model_name: name.to_owned(),
        param_count: model.count_params(),
        batch_size: batch,
        warmup_iters,
        timed_iters,
        elapsed_s,
        fps: (batch * timed_iters) as f64 / elapsed_s,
        lat_mean_ms: mean,
        lat_p50_ms: percentile(&lat, 0.5),
        lat_p95_ms: percentile(&lat, 0.95),
        environment: environment(),
    })
}

/// Benchmarks each named config one at a time, fastest first.
pub fn compare_models(configs: &[(String, ModelConfig)], params: &BenchParams) -> Result<Vec<BenchReport>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no models to compare".into()));
    }
    if params.repeats == 0 || params.batch_size == 0 {
        return Err(Error::InvalidArgument("repeats and batch_size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let model = Model::<f32>::build(cfg, params.seed)?;
        let shape = [params.batch_size, cfg.input_channels, cfg.input_size, cfg.input_size];
        let mut runs = (0..params.repeats)
            .map(|_| measure_fps(&model, name, &shape, params.warmup_iters, params.timed_iters, params.seed))
            .collect::<Result<Vec<_>>>()?;
        runs.sort_by(|a, b| a.fps.total_cmp(&b.fps));
        out.push(runs.swap_remove(runs.len() / 2));
    }
    out.sort_by(|a, b| b.fps.total_cmp(&a.fps));
    Ok(out)
}

pub fn write_csv<W: Write>(reports: &[BenchReport], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in reports {
        w.serialize(BenchRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<BenchRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Fixed-width table for terminals.
pub fn render_table(reports: &[BenchReport]) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
        "model", "params", "batch", "fps", "mean ms", "p50 ms", "p95 ms"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>6} {:>10.2} {:>10.3} {:>10.3} {:>10.3}",
            r.model_name, r.param_count, r.batch_size, r.fps, r.lat_mean_ms, r.lat_p50_ms, r.lat_p95_ms
        );
    }
    s
}
