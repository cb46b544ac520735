use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use selective_kd::datamodel::{load_dataset, save_dataset, Split};
use selective_kd::harness::{self, ExperimentConfig, PreparedTeacher};
use selective_kd::{synthgen, EvalResult, Setting};

#[derive(Parser)]
#[command(name = "skd", version, about = "Teacher-student distillation with pseudo-label filtering on synthetic slice stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.total_iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        Ok(base.with_overrides(&pairs)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one setting and evaluate it on the test split.
    Train {
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Completed baseline run to use as teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Re-score a run's checkpoint and check it against the stored metrics.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Tabulate runs with paired p-values against the first one.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Annotation-fraction sweep of baseline, selective and selective-weak.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `a..b` in steps of 0.1, or a comma-separated list.
        #[arg(long, default_value = "0.1..1.0")]
        fractions: String,
        /// Number of seeds, counted up from the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

fn print_metrics(label: &str, r: &EvalResult) {
    for (domain, m) in &r.domains {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!("{label} {domain:>3}  auc {}  ci [{}, {}]  pos {} neg {}", f(m.auc), f(m.ci_low), f(m.ci_high), m.n_pos, m.n_neg);
    }
}

fn gen_data(cfg: &ConfigArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let extra: Vec<(&str, String)> = seed.map(|s| ("seed", s.to_string())).into_iter().collect();
    let cfg = cfg.resolve(&extra)?;
    let ds = synthgen::generate_dataset(&cfg.synth, cfg.seed)?;
    save_dataset(&ds, out)?;
    let count = |s: Split| ds.stacks_in(s).count();
    println!(
        "wrote {} stacks to {} (train {}, val {}, test {})",
        ds.stacks.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    println!("dataset sha256 {}", ds.content_hash()?);
    Ok(())
}

fn train(setting: Setting, data: &Path, cfg: &ConfigArgs, seed: Option<u64>, out: &Path, teacher: Option<&Path>) -> Result<()> {
    let mut extra = vec![("setting", serde_json::to_string(&setting)?)];
    extra.push(("data", serde_json::to_string(data)?));
    if let Some(s) = seed {
        extra.push(("seed", s.to_string()));
    }
    let cfg = cfg.resolve(&extra)?;
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let prepared = match teacher {
        Some(dir) if setting.uses_teacher() => Some(PreparedTeacher::from_run(dir, &ds, &cfg.loss)?),
        Some(_) => bail!("--teacher only applies to distillation settings"),
        None => None,
    };
    let run = harness::run_setting(&cfg, &ds, prepared.as_ref(), out)?;
    println!("run {} ({})", run.dir.display(), setting.display_name());
    for (k, v) in &run.metrics.selection {
        println!("selected {k}: {v}");
    }
    print_metrics("test", &run.metrics.test);
    Ok(())
}

fn eval(run: &Path, data: &Path) -> Result<()> {
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let r = harness::reevaluate_run(run, &ds)?;
    print_metrics("test", &r.fresh);
    if r.max_abs_diff > 1e-6 {
        bail!("re-evaluated metrics differ from {} by {:.3e}", run.join(harness::METRICS_FILE).display(), r.max_abs_diff);
    }
    println!("matches stored metrics (max abs diff {:.1e})", r.max_abs_diff);
    Ok(())
}

fn compare(runs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let table = harness::compare_runs(runs)?;
    print!("{}", table.to_text());
    if let Some(path) = csv {
        table.write_csv(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep(cfg: &ConfigArgs, fractions: &str, seeds: u64, out: &Path) -> Result<()> {
    let cfg = cfg.resolve(&[])?;
    let fractions = harness::parse_fractions(fractions)?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let result = harness::run_sweep_settings(&cfg, &fractions, &seeds, &harness::SWEEP_SETTINGS, Some(out), |row| {
        match (&row.error, row.auc) {
            (Some(e), _) => eprintln!("seed {} fraction {:.1} {}: failed: {e}", row.seed, row.fraction, row.setting.cli_name()),
            (None, Some(a)) => eprintln!("seed {} fraction {:.1} {}: auc {a:.4}", row.seed, row.fraction, row.setting.cli_name()),
            (None, None) => eprintln!("seed {} fraction {:.1} {}: auc undefined", row.seed, row.fraction, row.setting.cli_name()),
        }
    })?;
    for p in &result.summary {
        let auc = p.mean_auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!("{:.1} {:>14} mean auc {auc} over {} seeds", p.fraction, p.setting.cli_name(), p.n_seeds);
    }
    let failed = result.failures().count();
    if failed > 0 {
        eprintln!("{failed} sweep cells failed; see sweep.csv");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, seed, out } => gen_data(&cfg, seed, &out),
        Command::Train { setting, data, cfg, seed, out, teacher } => train(setting, &data, &cfg, seed, &out, teacher.as_deref()),
        Command::Eval { run, data } => eval(&run, &data),
        Command::Compare { runs, csv } => compare(&runs, csv.as_deref()),
        Command::Sweep { cfg, fractions, seeds, out } => sweep(&cfg, &fractions, seeds, &out),
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
