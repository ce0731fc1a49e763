//! Running configured experiments: per-seed data and reference preparation,
//! strategy dispatch, on-disk logs, λ sweeps and strategy comparisons.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use super::config::{expand, RunConfig, Strategy};
use super::logs::{write_policy_log, write_table, RunLogWriter};
use super::plot::{line_chart, Series};
use crate::benchmark::{
    accuracy_with, generate, generate_range, pretrain_with, Dataset, DomainKind, DomainSpec, PretrainConfig,
};
use crate::coord_sgd::OptState;
use crate::error::{Error, Result};
use crate::l2o::{apply_policy_with, new_policy, train_policy, PolicyEpochLog};
use crate::nets::{Architecture, Checkpoint, Classifier, DualHeadModel, PolicyNetwork, DEFAULT_ACTIONS};
use crate::rng::derive_seed;
use crate::training::{fine_tune_with, FixedController, RandomController, RunRecord, TaskData};

/// Everything a run of one seed needs before fine-tuning.
pub struct SeedContext {
    pub seed: u64,
    pub reference: Classifier,
    /// Old-task accuracy of the untouched reference on the base split.
    pub reference_accuracy: f64,
    pub data: TaskData,
}

/// Result of one seed's run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub strategy: Strategy,
    pub lambda: f32,
    pub record: RunRecord,
    /// Live and frozen model tensors plus optimizer velocities.
    pub checkpoint: Checkpoint,
    pub reference_accuracy: f64,
    pub total_steps: usize,
    /// Trained policy and its per-epoch log (l2o_train only).
    pub policy: Option<(Checkpoint, Vec<PolicyEpochLog>)>,
    pub policy_train_secs: f64,
    pub wall_time_s: f64,
}

impl RunOutput {
    pub fn best_epoch(&self) -> usize {
        let best = self.record.best_target();
        self.record
            .epochs
            .iter()
            .find(|e| e.target_accuracy == best)
            .map(|e| e.epoch)
            .unwrap_or(0)
    }

    /// Key = value summary text.
    pub fn summary(&self, cfg: &RunConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# asg summary v{}", super::logs::SCHEMA_VERSION);
        let _ = writeln!(s, "experiment = {}", cfg.name);
        let _ = writeln!(s, "strategy = {}", self.strategy.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "final_target_accuracy = {}", self.record.final_target());
        let _ = writeln!(s, "best_target_accuracy = {}", self.record.best_target());
        let _ = writeln!(s, "best_epoch = {}", self.best_epoch());
        let _ = writeln!(s, "final_retention = {}", self.record.final_retention());
        let _ = writeln!(s, "reference_retention = {}", self.reference_accuracy);
        if self.policy.is_some() {
            let _ = writeln!(s, "policy_train_time_s = {:.1}", self.policy_train_secs);
        }
        let _ = writeln!(s, "wall_time_s = {:.1}", self.wall_time_s);
        s
    }
}

struct CachedReference {
    checkpoint: Checkpoint,
}

type ReferenceSlot = Arc<OnceLock<std::result::Result<CachedReference, String>>>;

fn reference_cache() -> &'static Mutex<HashMap<String, ReferenceSlot>> {
    static CACHE: OnceLock<Mutex<HashMap<String, ReferenceSlot>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Pretrain (or fetch from the in-process cache) the reference classifier.
/// Pretraining is deterministic in its inputs, so runs that share them share
/// one reference.
pub fn cached_reference(spec: &DomainSpec, cfg: &PretrainConfig, arch: &Architecture) -> Result<Classifier> {
    let key = format!("{spec:?}|{cfg:?}|{arch:?}");
    let cell = reference_cache()
        .lock()
        .expect("reference cache poisoned")
        .entry(key)
        .or_default()
        .clone();
    let entry = cell.get_or_init(|| {
        pretrain_with(spec, cfg, arch)
            .map(|p| CachedReference {
                checkpoint: p.classifier.to_checkpoint(),
            })
            .map_err(|e| e.to_string())
    });
    match entry {
        Ok(c) => Classifier::from_checkpoint(arch, &c.checkpoint),
        Err(msg) => Err(Error::Training(msg.clone())),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?.0)
}

/// Pretraining settings of run `seed`.
pub fn pretrain_config(cfg: &RunConfig, seed: u64) -> PretrainConfig {
    let r = &cfg.reference;
    PretrainConfig {
        arch: cfg.arch.clone(),
        train_count: r.train_count,
        val_count: r.val_count,
        max_epochs: r.max_epochs,
        batch_size: r.batch_size,
        sgd: r.sgd.clone(),
        target_accuracy: r.target_accuracy,
        seed,
    }
}

/// Domain specs (base, source, target) of run `seed`.
pub fn domain_specs(cfg: &RunConfig, seed: u64) -> [DomainSpec; 3] {
    let s = cfg.data_seed(seed);
    [
        DomainSpec::new(DomainKind::Base, s),
        DomainSpec::new(DomainKind::SyntheticSource, s),
        DomainSpec::new(DomainKind::RealTarget, s),
    ]
}

/// Load or render the datasets and load or pretrain the reference.
pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<SeedContext> {
    let arch = Architecture::by_name(&cfg.arch).map_err(|e| e.in_stage("config"))?;
    let [base, source, target] = domain_specs(cfg, seed);
    let d = &cfg.data;
    let r = &cfg.reference;
    let data = (|| -> Result<TaskData> {
        let train = match &d.source_file {
            Some(p) => load_dataset(&expand(p, seed))?,
            None => generate(&source, d.train_count)?,
        };
        let target_val = match &d.target_file {
            Some(p) => load_dataset(&expand(p, seed))?,
            None => generate_range(&target, d.train_count as u64, (d.train_count + d.val_count) as u64)?,
        };
        let base_val = match &d.base_val_file {
            Some(p) => load_dataset(&expand(p, seed))?,
            None => generate_range(&base, r.train_count as u64, (r.train_count + r.val_count) as u64)?,
        };
        Ok(TaskData {
            train,
            target_val,
            base_val,
        })
    })()
    .map_err(|e| e.in_stage("data"))?;

    let reference = match &r.reference_file {
        Some(p) => Checkpoint::load(&expand(p, seed)).and_then(|ck| Classifier::from_checkpoint(&arch, &ck)),
        None => cached_reference(&base, &pretrain_config(cfg, seed), &arch),
    }
    .map_err(|e| e.in_stage("reference"))?;
    let reference_accuracy =
        accuracy_with(&data.base_val, |x| reference.forward(x)).map_err(|e| e.in_stage("reference"))?;
    Ok(SeedContext {
        seed,
        reference,
        reference_accuracy,
        data,
    })
}

/// Fresh dual-head model around the seed's reference.
pub fn fresh_model(ctx: &SeedContext, index: u64) -> DualHeadModel {
    DualHeadModel::from_pretrained(&ctx.reference, derive_seed(ctx.seed, "new-head", index))
}

fn model_checkpoint(model: &DualHeadModel, opt: &OptState) -> Checkpoint {
    let named = model.named_tensors();
    let mut ck = Checkpoint::from_tensors(named.iter().map(|(n, t)| (n.as_str(), t)));
    let map = model.coordinate_map();
    for (name, shape, v) in opt.velocity_entries(&map) {
        ck.push(name, &shape, v.to_vec());
    }
    ck
}

/// Fine-tune one seed under `cfg.strategy`; `on_epoch` sees the growing
/// record after each epoch.
pub fn run_seed(
    cfg: &RunConfig,
    ctx: &SeedContext,
    on_epoch: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<RunOutput> {
    let started = Instant::now();
    let seed = ctx.seed;
    let ft = crate::training::FineTuneConfig {
        seed,
        ..cfg.fine_tune.clone()
    };
    let l2o = crate::l2o::L2OConfig {
        seed,
        ..cfg.l2o.clone()
    };
    let model = fresh_model(ctx, 0);
    let coords = model.coordinate_map().len();
    let action_seed = derive_seed(seed, "run-actions", 0);
    let mut policy_out = None;
    let mut policy_secs = 0.0;
    let stage = "fine-tune";
    let (record, opt) = match cfg.strategy {
        Strategy::Fixed(f) => {
            let mut ctl = FixedController::new(&f.scales(coords))?;
            fine_tune_with(&model, &ctx.data, &ft, &mut ctl, on_epoch)
        }
        Strategy::RandomPolicy => {
            let mut ctl = RandomController::new(coords, action_seed);
            fine_tune_with(&model, &ctx.data, &ft, &mut ctl, on_epoch)
        }
        Strategy::L2OTrain => {
            let t0 = Instant::now();
            let mut policy = new_policy(&l2o, coords)?;
            let logs = train_policy(&mut policy, &l2o, &ft, &ctx.data, |e| Ok(fresh_model(ctx, 1 + e as u64)))
                .map_err(|e| e.in_stage("policy-training"))?;
            policy_secs = t0.elapsed().as_secs_f64();
            policy_out = Some((policy.to_checkpoint(), logs));
            apply_policy_with(&mut policy, cfg.apply_mode, &model, &ctx.data, &ft, &l2o, action_seed, on_epoch)
        }
        Strategy::L2OApply => {
            let path = expand(cfg.policy_file.as_deref().expect("validated"), seed);
            let mut policy = Checkpoint::load(&path)
                .and_then(|ck| PolicyNetwork::from_checkpoint(&ck))
                .map_err(|e| e.in_stage("policy-load"))?;
            apply_policy_with(&mut policy, cfg.apply_mode, &model, &ctx.data, &ft, &l2o, action_seed, on_epoch)
        }
    }
    .map_err(|e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(stage),
    })?;
    Ok(RunOutput {
        seed,
        strategy: cfg.strategy,
        lambda: cfg.fine_tune.loss.lambda,
        total_steps: ft.total_steps(ctx.data.train.len()),
        checkpoint: model_checkpoint(&model, &opt),
        record,
        reference_accuracy: ctx.reference_accuracy,
        policy: policy_out,
        policy_train_secs: policy_secs,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Run `job(i)` for i in 0..n on up to `threads` workers, preserving order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

fn run_one(cfg: &RunConfig, seed: u64, write: bool) -> Result<RunOutput> {
    let ctx = prepare_seed(cfg, seed)?;
    if !write {
        return run_seed(cfg, &ctx, &mut |_| Ok(()));
    }
    let dir = cfg.seed_dir(seed);
    let coords: Vec<String> = fresh_model(&ctx, 0)
        .coordinate_map()
        .names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut writer = RunLogWriter::create(&dir, &coords).map_err(|e| e.in_stage("write-logs"))?;
    let out = run_seed(cfg, &ctx, &mut |rec| writer.append(rec).map_err(|e| e.in_stage("write-logs")))?;
    (|| -> Result<()> {
        out.checkpoint.save(&dir.join("checkpoint.asg1"))?;
        if let Some((ck, logs)) = &out.policy {
            ck.save(&dir.join("policy.asg1"))?;
            write_policy_log(&dir.join("policy_epochs.csv"), logs)?;
        }
        fs::write(dir.join("summary.txt"), out.summary(cfg))?;
        Ok(())
    })()
    .map_err(|e| e.in_stage("write-outputs"))?;
    Ok(out)
}

/// Run every seed; with `write`, logs go to `cfg.out_dir/seed_<s>/` and an
/// aggregate `summary.txt` to `cfg.out_dir`.
pub fn execute(cfg: &RunConfig, write: bool) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    if write {
        fs::create_dir_all(&cfg.out_dir)?;
    }
    let results = parallel_map(cfg.seeds.len(), cfg.threads, |i| run_one(cfg, cfg.seeds[i], write));
    let outs = results.into_iter().collect::<Result<Vec<_>>>()?;
    if write {
        fs::write(cfg.out_dir.join("summary.txt"), aggregate_summary(cfg, &outs))?;
    }
    Ok(outs)
}

/// [`execute`] writing all run files.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RunOutput>> {
    execute(cfg, true)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_summary(cfg: &RunConfig, outs: &[RunOutput]) -> String {
    let col = |f: &dyn Fn(&RunOutput) -> f64| mean_std(&outs.iter().map(f).collect::<Vec<_>>());
    let (ft, fts) = col(&|o| o.record.final_target());
    let (bt, bts) = col(&|o| o.record.best_target());
    let (rt, rts) = col(&|o| o.record.final_retention());
    let (rr, _) = col(&|o| o.reference_accuracy);
    let mut s = String::new();
    let _ = writeln!(s, "# asg summary v{}", super::logs::SCHEMA_VERSION);
    let _ = writeln!(s, "experiment = {}", cfg.name);
    let _ = writeln!(s, "strategy = {}", cfg.strategy.name());
    let _ = writeln!(s, "lambda = {}", cfg.fine_tune.loss.lambda);
    let _ = writeln!(s, "seeds = {:?}", cfg.seeds);
    if let Some(o) = outs.first() {
        let _ = writeln!(s, "total_steps = {}", o.total_steps);
    }
    let _ = writeln!(s, "final_target_accuracy = {ft:.4} ± {fts:.4}");
    let _ = writeln!(s, "best_target_accuracy = {bt:.4} ± {bts:.4}");
    let _ = writeln!(s, "final_retention = {rt:.4} ± {rts:.4}");
    let _ = writeln!(s, "reference_retention = {rr:.4}");
    s
}

/// One row of a λ sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f32,
    pub final_target: (f64, f64),
    pub best_target: (f64, f64),
    pub retention: (f64, f64),
    pub seeds: usize,
}

pub const DEFAULT_LAMBDA_GRID: [f32; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

/// Run `cfg` once per λ (plus a λ = 0 control when asked) and tabulate
/// mean ± std over seeds. Runs go to `out_dir/lambda_<λ>/`, the table to
/// `out_dir/sweep.csv`.
pub fn sweep_lambda(cfg: &RunConfig, lambdas: &[f32], control: bool, write: bool) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config(format!("lambda {bad} must be finite and >= 0")));
    }
    let mut grid: Vec<f32> = Vec::new();
    if control && !lambdas.contains(&0.0) {
        grid.push(0.0);
    }
    grid.extend_from_slice(lambdas);
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let mut c = cfg.clone();
        c.fine_tune.loss.lambda = lambda;
        c.out_dir = cfg.out_dir.join(format!("lambda_{lambda}"));
        let outs = execute(&c, write)?;
        let pick = |f: &dyn Fn(&RunOutput) -> f64| mean_std(&outs.iter().map(f).collect::<Vec<_>>());
        rows.push(SweepRow {
            lambda,
            final_target: pick(&|o| o.record.final_target()),
            best_target: pick(&|o| o.record.best_target()),
            retention: pick(&|o| o.record.final_retention()),
            seeds: outs.len(),
        });
    }
    if write {
        let header = [
            "lambda",
            "final_target_mean",
            "final_target_std",
            "best_target_mean",
            "best_target_std",
            "retention_mean",
            "retention_std",
            "seeds",
        ]
        .map(String::from);
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.lambda.to_string(),
                    r.final_target.0.to_string(),
                    r.final_target.1.to_string(),
                    r.best_target.0.to_string(),
                    r.best_target.1.to_string(),
                    r.retention.0.to_string(),
                    r.retention.1.to_string(),
                    r.seeds.to_string(),
                ]
            })
            .collect();
        write_table(&cfg.out_dir.join("sweep.csv"), "sweep", &header, &table)?;
    }
    Ok(rows)
}

/// Per-epoch seed-mean target accuracy of one strategy.
#[derive(Debug, Clone)]
pub struct StrategyCurve {
    pub label: String,
    pub strategy: Strategy,
    pub mean_by_epoch: Vec<f64>,
    pub final_targets: Vec<f64>,
    /// Fraction of all chosen actions per action index.
    pub action_frequencies: Vec<f64>,
}

impl StrategyCurve {
    pub fn final_mean(&self) -> f64 {
        mean_std(&self.final_targets).0
    }
}

/// Run several configs on shared data seeds and overlay their target curves.
/// Writes `compare.csv` and `compare.svg` to `out_dir` when given.
pub fn compare_strategies(cfgs: &[RunConfig], out_dir: Option<&Path>) -> Result<Vec<StrategyCurve>> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::Config("comparison needs at least one config".into()))?;
    for c in &cfgs[1..] {
        let data_seeds: Vec<u64> = c.seeds.iter().map(|&s| c.data_seed(s)).collect();
        let first_seeds: Vec<u64> = first.seeds.iter().map(|&s| first.data_seed(s)).collect();
        if data_seeds != first_seeds || c.data != first.data {
            return Err(Error::Config(format!(
                "config {:?} uses different data seeds or data settings than {:?}",
                c.name, first.name
            )));
        }
        if c.fine_tune.sgd.eta_base != first.fine_tune.sgd.eta_base {
            return Err(Error::Config(format!(
                "config {:?} uses eta_base {} but {:?} uses {}",
                c.name, c.fine_tune.sgd.eta_base, first.name, first.fine_tune.sgd.eta_base
            )));
        }
        if c.fine_tune.epochs != first.fine_tune.epochs {
            return Err(Error::Config("compared configs must train for the same number of epochs".into()));
        }
    }
    let mut names: Vec<&str> = cfgs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != cfgs.len() {
        return Err(Error::Config("compared configs need distinct experiment names".into()));
    }
    let mut curves = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        let mut c = c.clone();
        if let Some(dir) = out_dir {
            c.out_dir = dir.join(&c.name);
        }
        let outs = execute(&c, out_dir.is_some())?;
        curves.push(curve_of(&c.name, c.strategy, &outs));
    }
    if let Some(dir) = out_dir {
        write_comparison(dir, &curves)?;
    }
    Ok(curves)
}

/// Summarize finished runs of one strategy.
pub fn curve_of(label: &str, strategy: Strategy, outs: &[RunOutput]) -> StrategyCurve {
    let epochs = outs.iter().map(|o| o.record.epochs.len()).min().unwrap_or(0);
    let mean_by_epoch = (0..epochs)
        .map(|e| mean_std(&outs.iter().map(|o| o.record.epochs[e].target_accuracy).collect::<Vec<_>>()).0)
        .collect();
    let mut counts = [0usize; DEFAULT_ACTIONS];
    for o in outs {
        for s in &o.record.steps {
            for &a in &s.action.indices {
                counts[a.min(DEFAULT_ACTIONS - 1)] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    StrategyCurve {
        label: label.to_string(),
        strategy,
        mean_by_epoch,
        final_targets: outs.iter().map(|o| o.record.final_target()).collect(),
        action_frequencies: counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect(),
    }
}

pub fn write_comparison(dir: &Path, curves: &[StrategyCurve]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let epochs = curves.iter().map(|c| c.mean_by_epoch.len()).max().unwrap_or(0);
    let mut header = vec!["epoch".to_string()];
    header.extend(curves.iter().map(|c| c.label.clone()));
    let rows: Vec<Vec<String>> = (0..epochs)
        .map(|e| {
            let mut r = vec![(e + 1).to_string()];
            r.extend(
                curves
                    .iter()
                    .map(|c| c.mean_by_epoch.get(e).map(|v| v.to_string()).unwrap_or_default()),
            );
            r
        })
        .collect();
    write_table(&dir.join("compare.csv"), "compare", &header, &rows)?;
    let series: Vec<Series> = curves
        .iter()
        .map(|c| Series {
            label: c.label.clone(),
            points: c
                .mean_by_epoch
                .iter()
                .enumerate()
                .map(|(e, &v)| ((e + 1) as f64, v))
                .collect(),
        })
        .collect();
    fs::write(
        dir.join("compare.svg"),
        line_chart("target accuracy by epoch (seed mean)", "epoch", "target accuracy", &series),
    )?;
    Ok(())
}

/// Output path of a seed directory's file.
pub fn seed_file(cfg: &RunConfig, seed: u64, name: &str) -> PathBuf {
    cfg.seed_dir(seed).join(name)
}
