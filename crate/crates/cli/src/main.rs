use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mdacl_core::gradcheck::{run_battery, BatteryConfig};
use mdacl_core::report::{
    execute_gen_data, execute_suite, execute_train, render_run, resolve_out_root, run_dir, ConfigFile, MANIFEST_FILE,
};
use mdacl_core::sim::AblationRow;
use mdacl_core::{ExperimentManifest, GeneratorConfig, RunConfig, RunKind, SuiteSpec, WeightingStrategy};

/// Modality-dominance-aware fusion experiments on a synthetic two-modality benchmark.
///
/// Configuration precedence, lowest to highest: built-in defaults, the
/// `--config` TOML file, command-line flags. The output root is `--out-dir`,
/// else `$MDACL_OUT_DIR`, else `./runs`; each run writes into
/// `<root>/<run id>/`.
#[derive(Parser, Debug)]
#[command(name = "mdacl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic samples and a preview image.
    GenData(GenDataArgs),
    /// Train one model and record per-step metrics.
    Train(TrainArgs),
    /// Run the grad-boost, weighting and ablation experiments over several seeds.
    Suite(SuiteArgs),
    /// Compare every analytic gradient against finite differences.
    GradCheck(GradCheckArgs),
    /// Re-render plots from a finished run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML file with optional [run] and [generator] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Diversity/response blend of the dominance index.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<WeightingStrategy>,
    /// Multiplier on modality A's encoder gradients.
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    #[arg(long)]
    enable_mdi: bool,
    #[arg(long)]
    enable_hcg_low: bool,
    #[arg(long)]
    enable_hcg_high: bool,
    #[arg(long)]
    enable_miw: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Exponential smoothing of the dominance scores (0 disables).
    #[arg(long)]
    score_ema: Option<f64>,
    /// Add the auxiliary detection losses to the training objective.
    #[arg(long)]
    aux_in_objective: bool,
    #[arg(long)]
    eval_samples: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<(RunConfig, GeneratorConfig)> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut run = file.run;
        macro_rules! set {
            ($($field:ident <- $flag:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { run.$field = v; })*
            };
        }
        set!(
            steps <- steps,
            lr <- lr,
            delta <- delta,
            alpha <- alpha,
            beta <- beta,
            gamma <- gamma,
            strategy <- strategy,
            grad_boost_lambda <- lambda,
            batch_size <- batch_size,
            momentum <- momentum,
            weight_decay <- weight_decay,
            score_ema <- score_ema,
            eval_samples <- eval_samples,
        );
        run.enable_mdi |= self.enable_mdi;
        run.enable_hcg_low |= self.enable_hcg_low;
        run.enable_hcg_high |= self.enable_hcg_high;
        run.enable_miw |= self.enable_miw;
        run.aux_in_objective |= self.aux_in_objective;
        Ok((run, file.generator))
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Replay the exact configuration stored in a manifest.
    #[arg(long, conflicts_with_all = [
        "config", "steps", "lr", "delta", "alpha", "beta", "gamma", "strategy", "lambda",
        "enable_mdi", "enable_hcg_low", "enable_hcg_high", "enable_miw", "batch_size",
        "momentum", "weight_decay", "score_ema", "aux_in_objective", "eval_samples", "seed",
    ])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of seeds; seeds are 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    grad_boost: Option<Vec<f64>>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    weighting: Option<Vec<WeightingStrategy>>,
    /// Comma-separated ablation rows; without a value, every row.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_missing_value = "all")]
    ablation: Option<Vec<String>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Randomised instances per check.
    #[arg(long, default_value_t = BatteryConfig::default().instances)]
    instances: usize,
    #[arg(long, default_value_t = BatteryConfig::default().seed)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A run directory containing manifest.json.
    run_dir: PathBuf,
}

fn parse_strategy(s: &str) -> Result<WeightingStrategy, String> {
    s.parse().map_err(|e: mdacl_core::Error| e.to_string())
}

fn ablation_rows(names: &[String]) -> anyhow::Result<Vec<AblationRow>> {
    let standard = AblationRow::standard();
    if names.iter().any(|n| n == "all") {
        return Ok(standard);
    }
    names
        .iter()
        .map(|n| {
            standard.iter().find(|r| &r.name == n).cloned().with_context(|| {
                let known: Vec<_> = standard.iter().map(|r| r.name.as_str()).collect();
                format!("unknown ablation row '{n}' (known: {})", known.join(", "))
            })
        })
        .collect()
}

fn finish(manifest: &ExperimentManifest, dir: &Path) {
    println!("run id:  {}", manifest.run_id);
    println!("run dir: {}", dir.display());
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.5}"))
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let (mut run, generator) = args.config.load()?;
    if let Some(s) = args.seed {
        run.seed = s;
    }
    let mut m = ExperimentManifest::new(RunKind::GenData, run, generator, None, Some(args.count))?;
    let dir = run_dir(&resolve_out_root(args.out_dir.as_deref()), &m);
    let samples = execute_gen_data(&mut m, &dir)?;
    println!("wrote {} samples", samples.len());
    finish(&m, &dir);
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut m = match &args.manifest {
        Some(path) => ExperimentManifest::load(path)?,
        None => {
            let (mut run, generator) = args.config.load()?;
            if let Some(s) = args.seed {
                run.seed = s;
            }
            ExperimentManifest::new(RunKind::Train, run, generator, None, None)?
        }
    };
    let dir = run_dir(&resolve_out_root(args.out_dir.as_deref()), &m);
    let res = execute_train(&mut m, &dir)?;
    let s = &res.summary;
    println!(
        "steps {}  final loss {}  gradient bias {}  iou both {:.4}  a-only {:.4}  b-only {:.4}",
        s.steps,
        fmt_opt(s.final_task_loss),
        fmt_opt(s.gradient_bias),
        s.eval.both,
        s.eval.a_only,
        s.eval.b_only
    );
    finish(&m, &dir);
    Ok(())
}

fn suite(args: SuiteArgs) -> anyhow::Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (base, generator) = args.config.load()?;
    let any = args.grad_boost.is_some() || args.weighting.is_some() || args.ablation.is_some();
    let spec = SuiteSpec {
        grad_boost: match args.grad_boost {
            Some(v) => v,
            None if !any => vec![1.0, 3.0, 5.0],
            None => Vec::new(),
        },
        weighting: match args.weighting {
            Some(v) => v,
            None if !any => WeightingStrategy::ALL.to_vec(),
            None => Vec::new(),
        },
        ablation: match args.ablation {
            Some(v) => ablation_rows(&v)?,
            None if !any => AblationRow::standard(),
            None => Vec::new(),
        },
        seeds: SuiteSpec::seeds(args.seeds),
    };
    let mut m = ExperimentManifest::new(RunKind::Suite, base, generator, Some(spec), None)?;
    let dir = run_dir(&resolve_out_root(args.out_dir.as_deref()), &m);
    let report = execute_suite(&mut m, &dir)?;
    println!(
        "{:<11} {:<14} {:>3} {:>6} {:>18} {:>18} {:>8} {:>8}",
        "group", "label", "n", "failed", "gradient bias", "iou both", "a-only", "b-only"
    );
    for a in &report.aggregates {
        println!(
            "{:<11} {:<14} {:>3} {:>6} {:>9.5}±{:<8.5} {:>9.5}±{:<8.5} {:>8.4} {:>8.4}",
            a.group,
            a.label,
            a.iou_both.n,
            a.failed,
            a.gradient_bias.mean,
            a.gradient_bias.se,
            a.iou_both.mean,
            a.iou_both.se,
            a.iou_a_only.mean,
            a.iou_b_only.mean
        );
    }
    println!("{} cells", report.cells.len());
    finish(&m, &dir);
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} cells failed (see summary.csv)", report.cells.len());
    }
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> anyhow::Result<()> {
    let checks = run_battery(&BatteryConfig {
        instances: args.instances,
        seed: args.seed,
    })?;
    println!(
        "{:<44} {:>9} {:>7} {:>8} {:>12} {:>12} {:>8} {:>6}",
        "check", "instances", "passed", "rejected", "max rel err", "max abs err", "rel tol", "result"
    );
    for c in &checks {
        println!(
            "{:<44} {:>9} {:>7} {:>8} {:>12.3e} {:>12.3e} {:>8.0e} {:>6}",
            c.name,
            c.instances,
            c.passed,
            c.rejected,
            c.max_rel_err,
            c.max_abs_err,
            c.rel_tol,
            if c.ok() { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.ok()).count();
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    if !args.run_dir.join(MANIFEST_FILE).is_file() {
        bail!("{} does not contain {MANIFEST_FILE}", args.run_dir.display());
    }
    for p in render_run(&args.run_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Suite(a) => suite(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
