use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asg_core::benchmark::{accuracy_with, generate_range, DomainKind, DomainSpec, LabelKind};
use asg_core::coord_sgd::FixedStrategy;
use asg_core::harness::experiment::{cached_reference, domain_specs, pretrain_config};
use asg_core::harness::{self, plot, verify, RunConfig, Strategy};
use asg_core::nets::{ArchKind, Architecture};
use asg_core::{Error, Result};

/// Proxy-guided synthetic-to-real transfer with learned per-layer learning rates.
#[derive(Parser)]
#[command(name = "asg", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent seeds.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render base, source and target datasets to ASGD files.
    GenData,
    /// Pretrain the reference classifier on the base domain.
    Pretrain,
    /// Fine-tune with the configured strategy and write run logs.
    Run,
    /// Repeat the configured run over a grid of guidance weights.
    SweepLambda {
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = harness::DEFAULT_LAMBDA_GRID.to_vec())]
        lambdas: Vec<f32>,
        /// Skip the λ = 0 control row.
        #[arg(long)]
        no_control: bool,
    },
    /// Run several configs on shared seeds and overlay their target curves.
    Compare {
        /// Configs to compare (in addition to --config).
        configs: Vec<PathBuf>,
    },
    /// Plot a moving average of an action trace, one panel per coordinate.
    PlotActions {
        trace: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
    /// Run the built-in invariant checks.
    Verify,
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::new("default", vec![0], Strategy::Fixed(FixedStrategy::SmallBackboneLargeHead)),
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let kind = match Architecture::by_name(&cfg.arch)?.kind {
        ArchKind::ToyCnn => LabelKind::Class,
        ArchKind::ToyDenseNet => LabelKind::Mask,
    };
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let [base, source, target] = domain_specs(cfg, seed);
        let counts = |spec: &DomainSpec| match spec.kind {
            DomainKind::Base => (cfg.reference.train_count, cfg.reference.val_count),
            _ => (cfg.data.train_count, cfg.data.val_count),
        };
        for spec in [&base, &source, &target] {
            let (train, val) = counts(spec);
            for (split, lo, hi) in [("train", 0, train), ("val", train, train + val)] {
                let path = dir.join(format!("{}_{split}.asgd", spec.kind.name()));
                generate_range(spec, lo as u64, hi as u64)?.save(&path, kind)?;
                println!("wrote {} ({} images)", path.display(), hi - lo);
            }
        }
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let arch = Architecture::by_name(&cfg.arch)?;
    for &seed in &cfg.seeds {
        let [base, ..] = domain_specs(cfg, seed);
        let pc = pretrain_config(cfg, seed);
        let classifier = cached_reference(&base, &pc, &arch).map_err(|e| e.in_stage("pretrain"))?;
        let val = generate_range(&base, pc.train_count as u64, (pc.train_count + pc.val_count) as u64)?;
        let acc = accuracy_with(&val, |x| classifier.forward(x))?;
        let dir = cfg.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("reference.asg1");
        classifier.to_checkpoint().save(&path)?;
        println!("seed {seed}: base validation accuracy {acc:.4}, wrote {}", path.display());
    }
    Ok(())
}

fn print_runs(outs: &[harness::RunOutput]) {
    for o in outs {
        println!(
            "seed {}: final target {:.4}, best {:.4}, retention {:.4} (reference {:.4}), {} steps",
            o.seed,
            o.record.final_target(),
            o.record.best_target(),
            o.record.final_retention(),
            o.reference_accuracy,
            o.total_steps
        );
    }
}

fn plot_actions(trace: &Path, window: usize, out: Option<&Path>) -> Result<()> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let t = harness::read_action_trace(trace)?;
    let svg = plot::action_panels(&t, window);
    let path = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.join("actions.svg")
        }
        None => trace.with_extension("svg"),
    };
    std::fs::write(&path, svg)?;
    println!("wrote {} ({} coordinates, {} steps)", path.display(), t.coordinates.len(), t.steps());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => gen_data(&base_config(cli)?),
        Command::Pretrain => pretrain(&base_config(cli)?),
        Command::Run => {
            let cfg = base_config(cli)?;
            let outs = harness::run_experiment(&cfg)?;
            print_runs(&outs);
            println!("logs in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::SweepLambda { lambdas, no_control } => {
            let cfg = base_config(cli)?;
            let rows = harness::sweep_lambda(&cfg, lambdas, !no_control, true)?;
            println!("lambda  final_target        retention");
            for r in rows {
                println!(
                    "{:<7} {:.4} ± {:.4}   {:.4} ± {:.4}",
                    r.lambda, r.final_target.0, r.final_target.1, r.retention.0, r.retention.1
                );
            }
            println!("table in {}", cfg.out_dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Compare { configs } => {
            let paths: Vec<&PathBuf> = cli.config.iter().chain(configs).collect();
            if paths.len() < 2 {
                return Err(Error::Config("compare needs at least two configs".into()));
            }
            let mut cfgs = Vec::with_capacity(paths.len());
            for p in paths {
                let mut c = RunConfig::from_file(p)?;
                apply_overrides(cli, &mut c)?;
                cfgs.push(c);
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/compare"));
            let curves = harness::compare_strategies(&cfgs, Some(&out))?;
            for c in curves {
                println!("{:<28} final target {:.4}", c.label, c.final_mean());
            }
            println!("chart in {}", out.join("compare.svg").display());
            Ok(())
        }
        Command::PlotActions { trace, window } => plot_actions(trace, *window, cli.out.as_deref()),
        Command::Verify => {
            let results = verify::run_all(cli.seed.unwrap_or(0));
            let mut failed = 0;
            for r in &results {
                println!("{} {:<36} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += !r.passed as usize;
            }
            if failed > 0 {
                return Err(Error::Training(format!("{failed} of {} checks failed", results.len())));
            }
            println!("all {} checks passed", results.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
