//! Experiment configuration files.
//!
//! TOML with a fixed set of sections; unknown sections or keys are rejected.
//! `[experiment]` with `name`, `seeds` and `strategy` is required, everything
//! else has defaults. File paths may contain `{seed}`, expanded per run seed,
//! and are resolved relative to the config file.
//!
//! ```toml
//! [experiment]
//! name = "sbl"
//! seeds = [0, 1, 2]
//! strategy = "small_backbone_large_head"
//!
//! [loss]
//! lambda = 0.1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::coord_sgd::{FixedStrategy, SgdConfig};
use crate::error::{Error, Result};
use crate::l2o::L2OConfig;
use crate::nets::{ActionMode, Architecture};
use crate::proxy::DivergenceForm;
use crate::training::FineTuneConfig;

/// How per-coordinate scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Fixed(FixedStrategy),
    RandomPolicy,
    /// Train a policy with REINFORCE, save it, then run it once.
    L2OTrain,
    /// Run a saved policy.
    L2OApply,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed(f) => f.name(),
            Strategy::RandomPolicy => "random_policy",
            Strategy::L2OTrain => "l2o_train",
            Strategy::L2OApply => "l2o_apply",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_policy" => Ok(Strategy::RandomPolicy),
            "l2o_train" => Ok(Strategy::L2OTrain),
            "l2o_apply" => Ok(Strategy::L2OApply),
            other => other.parse().map(Strategy::Fixed).map_err(|_| {
                Error::Config(format!(
                    "unknown strategy {other:?}; expected all_large, small_backbone_large_head, head_only, \
                     random_policy, l2o_train or l2o_apply"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Synthetic source training images per seed.
    pub train_count: usize,
    /// Target validation images per seed.
    pub val_count: usize,
    /// Domain seed = run seed + offset.
    pub seed_offset: u64,
    /// Pre-generated datasets used instead of rendering.
    pub source_file: Option<String>,
    pub target_file: Option<String>,
    pub base_val_file: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 1000,
            val_count: 500,
            seed_offset: 0,
            source_file: None,
            target_file: None,
            base_val_file: None,
        }
    }
}

/// Reference-model pretraining on the base domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub target_accuracy: f64,
    /// Saved classifier used instead of pretraining.
    pub reference_file: Option<String>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            train_count: 4000,
            val_count: 1000,
            max_epochs: 30,
            batch_size: 32,
            sgd: SgdConfig {
                eta_base: 0.02,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            target_accuracy: 0.9,
            reference_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub strategy: Strategy,
    pub out_dir: PathBuf,
    pub arch: String,
    pub data: DataConfig,
    pub reference: ReferenceConfig,
    /// `seed` is overwritten per run.
    pub fine_tune: FineTuneConfig,
    pub l2o: L2OConfig,
    pub policy_file: Option<String>,
    pub apply_mode: ActionMode,
    /// Worker threads over seeds.
    pub threads: usize,
}

impl RunConfig {
    /// Defaults for everything but the required keys.
    pub fn new(name: &str, seeds: Vec<u64>, strategy: Strategy) -> Self {
        RunConfig {
            name: name.to_string(),
            seeds,
            strategy,
            out_dir: PathBuf::from("runs").join(name),
            arch: "toy_cnn".into(),
            data: DataConfig::default(),
            reference: ReferenceConfig::default(),
            fine_tune: FineTuneConfig {
                epochs: 15,
                ..FineTuneConfig::default()
            },
            l2o: L2OConfig::default(),
            policy_file: None,
            apply_mode: ActionMode::Greedy,
            threads: 1,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parse config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = raw.into_config(base_dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("experiment name {:?} must be non-empty without path separators", self.name));
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        Architecture::by_name(&self.arch).map_err(|e| Error::Config(e.to_string()))?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return bad("data counts must be positive".into());
        }
        let r = &self.reference;
        if r.train_count == 0 || r.val_count == 0 || r.batch_size == 0 || r.max_epochs == 0 {
            return bad("pretrain sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&r.target_accuracy) {
            return bad("pretrain target_accuracy must lie in [0, 1]".into());
        }
        check_sgd(&r.sgd, "pretrain")?;
        check_sgd(&self.fine_tune.sgd, "optim")?;
        self.fine_tune.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.l2o.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        match (self.strategy, &self.policy_file) {
            (Strategy::L2OApply, None) => return bad("strategy l2o_apply needs l2o.policy_file".into()),
            (Strategy::L2OApply, Some(_)) | (_, None) => {}
            (s, Some(_)) => return bad(format!("l2o.policy_file is only used by l2o_apply, not {}", s.name())),
        }
        for seed in &self.seeds {
            for p in self.referenced_files(*seed) {
                if !p.is_file() {
                    return bad(format!("referenced file {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    /// Every input file for `seed`, after `{seed}` expansion.
    pub fn referenced_files(&self, seed: u64) -> Vec<PathBuf> {
        [
            &self.data.source_file,
            &self.data.target_file,
            &self.data.base_val_file,
            &self.reference.reference_file,
            &self.policy_file,
        ]
        .into_iter()
        .flatten()
        .map(|p| expand(p, seed))
        .collect()
    }

    /// Domain seed of run `seed`.
    pub fn data_seed(&self, seed: u64) -> u64 {
        seed.wrapping_add(self.data.seed_offset)
    }

    /// Output directory of run `seed`.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }
}

/// Substitute `{seed}` in a configured path.
pub fn expand(path: &str, seed: u64) -> PathBuf {
    PathBuf::from(path.replace("{seed}", &seed.to_string()))
}

fn check_sgd(s: &SgdConfig, section: &str) -> Result<()> {
    let ok = s.eta_base > 0.0
        && s.eta_base.is_finite()
        && (0.0..1.0).contains(&s.momentum)
        && s.weight_decay >= 0.0
        && s.weight_decay.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "[{section}] needs eta > 0, momentum in [0, 1) and weight_decay >= 0"
        )))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: RawExperiment,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    pretrain: RawPretrain,
    #[serde(default)]
    loss: RawLoss,
    #[serde(default)]
    optim: RawOptim,
    #[serde(default)]
    l2o: RawL2O,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: String,
    seeds: Vec<u64>,
    strategy: String,
    out_dir: Option<String>,
    threads: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    arch: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawData {
    train_count: Option<usize>,
    val_count: Option<usize>,
    seed_offset: Option<u64>,
    source_file: Option<String>,
    target_file: Option<String>,
    base_val_file: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPretrain {
    train_count: Option<usize>,
    val_count: Option<usize>,
    max_epochs: Option<usize>,
    batch_size: Option<usize>,
    eta: Option<f32>,
    momentum: Option<f32>,
    weight_decay: Option<f32>,
    target_accuracy: Option<f64>,
    reference_file: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    lambda: Option<f32>,
    divergence: Option<String>,
    dense_mode: Option<bool>,
    patch_grid: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    eta_base: Option<f32>,
    momentum: Option<f32>,
    weight_decay: Option<f32>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawL2O {
    unroll: Option<usize>,
    policy_lr: Option<f32>,
    policy_epochs: Option<usize>,
    clip_norm: Option<f64>,
    baseline: Option<bool>,
    baseline_decay: Option<f64>,
    normalize_obs: Option<bool>,
    hidden: Option<usize>,
    policy_file: Option<String>,
    mode: Option<String>,
}

fn resolve(base: &Path, p: Option<String>) -> Option<String> {
    p.map(|p| {
        if Path::new(&p).is_absolute() {
            p
        } else {
            base.join(p).to_string_lossy().into_owned()
        }
    })
}

impl RawConfig {
    fn into_config(self, base: &Path) -> Result<RunConfig> {
        let e = self.experiment;
        let strategy: Strategy = e.strategy.parse()?;
        let mut cfg = RunConfig::new(&e.name, e.seeds, strategy);
        if let Some(o) = e.out_dir {
            cfg.out_dir = base.join(o);
        }
        if let Some(t) = e.threads {
            cfg.threads = t;
        }
        if let Some(a) = self.model.arch {
            cfg.arch = a;
        }

        let d = self.data;
        let data = &mut cfg.data;
        data.train_count = d.train_count.unwrap_or(data.train_count);
        data.val_count = d.val_count.unwrap_or(data.val_count);
        data.seed_offset = d.seed_offset.unwrap_or(data.seed_offset);
        data.source_file = resolve(base, d.source_file);
        data.target_file = resolve(base, d.target_file);
        data.base_val_file = resolve(base, d.base_val_file);

        let p = self.pretrain;
        let r = &mut cfg.reference;
        r.train_count = p.train_count.unwrap_or(r.train_count);
        r.val_count = p.val_count.unwrap_or(r.val_count);
        r.max_epochs = p.max_epochs.unwrap_or(r.max_epochs);
        r.batch_size = p.batch_size.unwrap_or(r.batch_size);
        r.sgd.eta_base = p.eta.unwrap_or(r.sgd.eta_base);
        r.sgd.momentum = p.momentum.unwrap_or(r.sgd.momentum);
        r.sgd.weight_decay = p.weight_decay.unwrap_or(r.sgd.weight_decay);
        r.target_accuracy = p.target_accuracy.unwrap_or(r.target_accuracy);
        r.reference_file = resolve(base, p.reference_file);

        let l = self.loss;
        let loss = &mut cfg.fine_tune.loss;
        loss.lambda = l.lambda.unwrap_or(loss.lambda);
        if let Some(f) = l.divergence {
            loss.form = f.parse::<DivergenceForm>()?;
        }
        loss.dense_mode = l.dense_mode.unwrap_or(loss.dense_mode);
        loss.patch_grid = l.patch_grid.unwrap_or(loss.patch_grid);

        let o = self.optim;
        let ft = &mut cfg.fine_tune;
        ft.sgd.eta_base = o.eta_base.unwrap_or(ft.sgd.eta_base);
        ft.sgd.momentum = o.momentum.unwrap_or(ft.sgd.momentum);
        ft.sgd.weight_decay = o.weight_decay.unwrap_or(ft.sgd.weight_decay);
        ft.epochs = o.epochs.unwrap_or(ft.epochs);
        ft.batch_size = o.batch_size.unwrap_or(ft.batch_size);

        let q = self.l2o;
        let l2o = &mut cfg.l2o;
        l2o.unroll = q.unroll.unwrap_or(l2o.unroll);
        l2o.policy_lr = q.policy_lr.unwrap_or(l2o.policy_lr);
        l2o.policy_epochs = q.policy_epochs.unwrap_or(l2o.policy_epochs);
        l2o.clip_norm = q.clip_norm.unwrap_or(l2o.clip_norm);
        l2o.baseline = q.baseline.unwrap_or(l2o.baseline);
        l2o.baseline_decay = q.baseline_decay.unwrap_or(l2o.baseline_decay);
        l2o.normalize_obs = q.normalize_obs.unwrap_or(l2o.normalize_obs);
        l2o.hidden = q.hidden.unwrap_or(l2o.hidden);
        cfg.policy_file = resolve(base, q.policy_file);
        if let Some(m) = q.mode {
            cfg.apply_mode = m.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}
