use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use davit::bench::{self, BenchReport};
use davit::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use davit::data::synthetic::{self, SynthConfig};
use davit::data::{load_dataset, save_dataset, split_dataset, Dataset};
use davit::train::{evaluate, fit, EvalReport};
use davit::{Error, Model, ModelConfig, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct TrainArgs {
    pub init_from: Option<PathBuf>,
    pub force: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Train/validation split exactly as `train` makes it, so `eval` sees the same data.
fn split(cfg: &RunConfig, model: &ModelConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let ds: Dataset<f32> = load_dataset(cfg.manifest()?, None)?;
    if ds.num_classes() != model.num_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes but model.num_classes is {}",
            ds.num_classes(),
            model.num_classes
        )));
    }
    let size = ds.image_size()?;
    if size != model.input_size {
        return Err(Error::Config(format!("images are {size}×{size}, model expects {}", model.input_size)));
    }
    let holdout: HashSet<String> = cfg.data.holdout_tags.iter().cloned().collect();
    split_dataset(&ds, cfg.data.train_fraction, cfg.data.split_seed, &holdout)
}

fn load_model(path: &Path, config: &ModelConfig, force: bool) -> Result<(Model<f32>, CheckpointMeta)> {
    let loaded = load_checkpoint::<f32>(path, config, force)?;
    if !loaded.hash_matches {
        eprintln!(
            "warning: {} was written for config hash {:016x}, current config hashes to {:016x}; loading anyway (--force)",
            path.display(),
            loaded.meta.config_hash,
            config.hash()
        );
    }
    Ok((loaded.model, loaded.meta))
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    cfg.validate_for_training()?;
    let model_cfg = cfg.model_config()?;
    let policy = cfg.policy()?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (mut train_set, val_set) = split(cfg, &model_cfg)?;
    let threshold = cfg.eval.threshold;

    let mut model = match &args.init_from {
        None => Model::<f32>::build(&model_cfg, cfg.train.seed)?,
        Some(path) => {
            let (model, meta) = load_model(path, &model_cfg, args.force)?;
            let n = train_set.weight_tagged(&cfg.data.hard_tag, cfg.data.hard_weight)?;
            let report = evaluate(&model, &val_set, threshold)?;
            eprintln!(
                "resumed from {} (epoch {}, recorded val accuracy {}); epoch-0 val accuracy {}; {n} `{}` samples weighted {}",
                path.display(),
                meta.epoch,
                meta.val_accuracy,
                report.accuracy as f32,
                cfg.data.hard_tag,
                cfg.data.hard_weight
            );
            write_json(&out.join("init_eval.json"), &report)?;
            model
        }
    };

    let hash = model_cfg.hash();
    let metrics_path = out.join("metrics.jsonl");
    let partial = out.join("metrics.jsonl.partial");
    let mut metrics = BufWriter::new(File::create(&partial).map_err(io_err(&partial))?);
    let mut best: Option<f64> = None;
    fit(&mut model, &train_set, &val_set, &cfg.train, &policy, threshold, |rec, m, state| {
        let line = serde_json::to_string(rec).expect("plain data serializes");
        writeln!(metrics, "{line}").and_then(|_| metrics.flush()).map_err(io_err(&partial))?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train_acc {:.4}  val_acc {:.4}  rejected {}",
            rec.epoch, rec.lr, rec.train_loss, rec.train_acc, rec.val_acc, rec.rejected
        );
        let meta = CheckpointMeta { epoch: rec.epoch as u32, val_accuracy: rec.val_acc as f32, config_hash: hash };
        if best.is_none_or(|b| rec.val_acc > b) {
            best = Some(rec.val_acc);
            save_checkpoint(&out.join("best.ckpt"), m, Some(state), &meta)?;
        }
        if rec.epoch + 1 == cfg.train.total_epochs {
            save_checkpoint(&out.join("last.ckpt"), m, Some(state), &meta)?;
        }
        Ok(())
    })?;
    drop(metrics);
    fs::rename(&partial, &metrics_path).map_err(io_err(&metrics_path))?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    epoch: u32,
    recorded_val_accuracy: f32,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, force: bool, output: Option<&Path>) -> Result<()> {
    cfg.validate_eval()?;
    let model_cfg = cfg.model_config()?;
    let (model, meta) = load_model(checkpoint, &model_cfg, force)?;
    let (_, val_set) = split(cfg, &model_cfg)?;
    let report = evaluate(&model, &val_set, cfg.eval.threshold)?;
    let out = EvalOutput { checkpoint, epoch: meta.epoch, recorded_val_accuracy: meta.val_accuracy, report: &report };
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(&cfg.output.dir).map_err(io_err(&cfg.output.dir))?;
            cfg.output.dir.join("eval.json")
        }
    };
    write_json(&path, &out)?;
    println!("{}", serde_json::to_string(&out).expect("plain data serializes"));
    Ok(())
}

fn widened(cfg: &ModelConfig, factor: usize) -> ModelConfig {
    let mut c = cfg.clone();
    c.stages.iter_mut().for_each(|s| s.channels *= factor);
    c
}

pub fn bench(cfg: &RunConfig, seed: u64) -> Result<Vec<BenchReport>> {
    let model_cfg = cfg.model_config()?;
    if cfg.bench.width_multipliers.is_empty() || cfg.bench.width_multipliers.contains(&0) {
        return Err(Error::Config("bench.width_multipliers must be non-empty and positive".into()));
    }
    let configs: Vec<(String, ModelConfig)> = cfg
        .bench
        .width_multipliers
        .iter()
        .map(|&k| (format!("width_x{k}"), widened(&model_cfg, k)))
        .collect();
    for (name, c) in &configs {
        c.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
    }
    let reports = bench::compare_models(&configs, &cfg.bench.params(seed))?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("bench.csv");
    bench::write_csv(&reports, File::create(&path).map_err(io_err(&path))?)?;
    print!("{}", bench::render_table(&reports));
    Ok(reports)
}

#[derive(Serialize)]
pub struct Inspection {
    pub input_size: usize,
    pub stage_sizes: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub param_count: usize,
    pub logits_width: usize,
    pub config_hash: String,
}

/// Shapes and sizes from the config alone; nothing is allocated or run.
pub fn inspect(cfg: &RunConfig, json: bool) -> Result<()> {
    let m = cfg.model_config()?;
    let info = Inspection {
        input_size: m.input_size,
        stage_sizes: m.stage_sizes()?,
        stage_channels: m.stages.iter().map(|s| s.channels).collect(),
        stage_heads: m.stages.iter().map(|s| s.heads()).collect(),
        param_count: m.param_count(),
        logits_width: m.num_classes,
        config_hash: format!("{:016x}", m.hash()),
    };
    if json {
        println!("{}", serde_json::to_string(&info).expect("plain data serializes"));
        return Ok(());
    }
    println!("input        {0}×{0}×{1}", m.input_size, m.input_channels);
    for (i, ((s, c), h)) in info.stage_sizes.iter().zip(&info.stage_channels).zip(&info.stage_heads).enumerate() {
        println!("stage {}      {s}×{s}×{c}  ({h} heads/groups, depth {})", i + 1, m.stages[i].depth);
    }
    println!("logits       {}", info.logits_width);
    println!("parameters   {}", info.param_count);
    println!("config hash  {}", info.config_hash);
    Ok(())
}

pub fn synth(out: &Path, cfg: &SynthConfig) -> Result<()> {
    let ds = synthetic::generate::<f32>(cfg)?;
    save_dataset(&ds, out)?;
    println!("{}", out.join("manifest.csv").display());
    Ok(())
}
