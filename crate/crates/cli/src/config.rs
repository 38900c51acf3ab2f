//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]`,
//! `[eval]`, `[bench]` and `[output]` sections. Unknown keys are rejected and
//! relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use davit::bench::BenchParams;
use davit::data::augment::AugmentPolicy;
use davit::{ChannelScale, Error, ModelConfig, Result, TrainConfig};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Base,
    Toy,
}

/// A preset plus optional overrides; per-stage lists must match the preset's
/// stage count.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub input_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub depths: Option<Vec<usize>>,
    pub window_size: Option<usize>,
    pub head_width: Option<usize>,
    pub ffn_expansion: Option<f64>,
    pub channel_scale: Option<ChannelScale>,
    pub layer_norm_eps: Option<f64>,
    pub init_std: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Base => ModelConfig::base(),
            Preset::Toy => ModelConfig::toy(),
        };
        let n = cfg.stages.len();
        let per_stage = |name: &str, v: &Vec<usize>| {
            if v.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("model.{name} lists {} values for {n} stages", v.len())))
            }
        };
        if let Some(v) = &self.channels {
            per_stage("channels", v)?;
            cfg.stages.iter_mut().zip(v).for_each(|(s, &c)| s.channels = c);
        }
        if let Some(v) = &self.depths {
            per_stage("depths", v)?;
            cfg.stages.iter_mut().zip(v).for_each(|(s, &d)| s.depth = d);
        }
        for s in &mut cfg.stages {
            s.window_size = self.window_size.unwrap_or(s.window_size);
            s.head_width = self.head_width.unwrap_or(s.head_width);
        }
        cfg.input_size = self.input_size.unwrap_or(cfg.input_size);
        cfg.num_classes = self.num_classes.unwrap_or(cfg.num_classes);
        cfg.ffn_expansion = self.ffn_expansion.unwrap_or(cfg.ffn_expansion);
        cfg.channel_scale = self.channel_scale.unwrap_or(cfg.channel_scale);
        cfg.layer_norm_eps = self.layer_norm_eps.unwrap_or(cfg.layer_norm_eps);
        cfg.init_std = self.init_std.unwrap_or(cfg.init_std);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Tags always sent to the validation split.
    pub holdout_tags: Vec<String>,
    /// `"default"`, `"none"`, or a path to a policy file.
    pub policy: String,
    /// Tag whose samples get `hard_weight` when resuming with `--init-from`.
    pub hard_tag: String,
    pub hard_weight: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            train_fraction: 0.8,
            split_seed: 0,
            holdout_tags: Vec::new(),
            policy: "default".into(),
            hard_tag: "hard".into(),
            hard_weight: 4.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub repeats: usize,
    /// Each entry benchmarks the model with every stage's channels scaled by it.
    pub width_multipliers: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let p = BenchParams::default();
        BenchSection {
            batch_size: p.batch_size,
            warmup_iters: p.warmup_iters,
            timed_iters: p.timed_iters,
            repeats: p.repeats,
            width_multipliers: vec![1],
        }
    }
}

impl BenchSection {
    pub fn params(&self, seed: u64) -> BenchParams {
        BenchParams {
            batch_size: self.batch_size,
            warmup_iters: self.warmup_iters,
            timed_iters: self.timed_iters,
            repeats: self.repeats,
            seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.data.manifest.as_mut() {
            rebase(m);
        }
        rebase(&mut cfg.output.dir);
        if !matches!(cfg.data.policy.as_str(), "default" | "none") && Path::new(&cfg.data.policy).is_relative() {
            cfg.data.policy = base.join(&cfg.data.policy).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.data.manifest.as_deref().ok_or_else(|| Error::Config("data.manifest is not set".into()))
    }

    pub fn policy(&self) -> Result<AugmentPolicy> {
        match self.data.policy.as_str() {
            "default" => Ok(AugmentPolicy::default_policy()),
            "none" => Ok(AugmentPolicy::default()),
            path => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
                AugmentPolicy::parse(&text)
            }
        }
    }

    /// Checks everything a training run needs before any data is loaded.
    pub fn validate_for_training(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        self.policy()?;
        self.validate_eval()?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!("data.train_fraction must be in (0, 1), got {}", d.train_fraction)));
        }
        if !(d.hard_weight > 0.0 && d.hard_weight.is_finite()) {
            return Err(Error::Config(format!("data.hard_weight must be positive, got {}", d.hard_weight)));
        }
        let manifest = self.manifest()?;
        if !manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", manifest.display())));
        }
        Ok(())
    }

    pub fn validate_eval(&self) -> Result<()> {
        let t = self.eval.threshold;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Config(format!("eval.threshold must be in [0, 1), got {t}")));
        }
        Ok(())
    }
}
