use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use qml::config::ExperimentConfig;
use qml::{cmd_ablation, cmd_evaluate, cmd_generate, cmd_train, verify, Arm, LoadedConfig, CHECKPOINT_FILE};
use qml_core::numerics::OpKind;

#[derive(Parser)]
#[command(name = "qml", version, about = "Quadruplet metric learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, split and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate the config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "features.csv")]
        out: PathBuf,
    },
    /// Train, evaluate on unseen classes and write all artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the unseen classes of its split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.qml`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Photo queries against a sketch gallery.
        #[arg(long)]
        reverse: bool,
    },
    /// Train every (variant, seed) cell and summarize.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated arms, e.g. `raqua,bidtri,comtri,raqua+meta,raqua-cls`.
        #[arg(long, value_delimiter = ',', default_value = "raqua,bidtri,comtri,alltri,sinqua")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run gradient checks, oracles and invariants.
    Verify {
        /// Test hook: scale the gradient of one op kind.
        #[arg(long, hide = true)]
        perturb_op: Option<String>,
    },
    /// Print a config preset (`default` or `ablation`).
    Config {
        #[arg(long, default_value = "default")]
        preset: String,
    },
}

fn load(common: &Common) -> Result<LoadedConfig> {
    let mut loaded = LoadedConfig::from_path(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        loaded.config = loaded.config.with_seed(seed);
    }
    loaded.config.validate()?;
    Ok(loaded)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, out } => {
            let loaded = load(&common)?;
            if common.dry_run {
                println!("config ok");
                return Ok(true);
            }
            let ds = cmd_generate(&loaded.config, &out)?;
            println!(
                "wrote {} samples over {} classes to {}",
                ds.len(),
                ds.num_classes(),
                out.display()
            );
        }
        Command::Train { common, out } => {
            let loaded = load(&common)?;
            if common.dry_run {
                println!("config ok");
                return Ok(true);
            }
            let dir = out.unwrap_or_else(|| loaded.config.output_dir.clone());
            let outcome = cmd_train(&loaded, Some(&dir))?;
            println!("{}", outcome.metrics.to_json());
            println!("artifacts in {}", dir.display());
        }
        Command::Evaluate {
            common,
            out,
            checkpoint,
            reverse,
        } => {
            let loaded = load(&common)?;
            let dir = out.unwrap_or_else(|| loaded.config.output_dir.clone());
            let ck = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            if common.dry_run {
                println!("config ok");
                return Ok(true);
            }
            let m = cmd_evaluate(&loaded, &ck, reverse || loaded.config.eval.reverse, Some(&dir))?;
            println!("{}", m.to_json());
        }
        Command::Ablation {
            common,
            out,
            variants,
            seeds,
            jobs,
        } => {
            let loaded = load(&common)?;
            let arms = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Arm>>>()?;
            if common.dry_run {
                println!("config ok: {} arms x {} seeds", arms.len(), seeds.len());
                return Ok(true);
            }
            let dir = out.unwrap_or_else(|| loaded.config.output_dir.join("ablation"));
            let summary = cmd_ablation(&loaded, &arms, &seeds, jobs, Some(&dir))?;
            for (arm, m) in &summary.medians {
                println!("{arm:<16} median map_all {:.4}  prec_at_100 {:.4}", m.map_all, m.prec_at_100);
            }
            println!("summary in {}", dir.join(qml::SUMMARY_FILE).display());
        }
        Command::Verify { perturb_op } => {
            let op = perturb_op
                .map(|s| OpKind::parse(&s).with_context(|| format!("unknown op `{s}`")))
                .transpose()?;
            let results = verify::run_suite(op);
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            println!("{}", if ok { "all checks passed" } else { "verification FAILED" });
            return Ok(ok);
        }
        Command::Config { preset } => {
            let c = match preset.as_str() {
                "default" => ExperimentConfig::default(),
                "ablation" => ExperimentConfig::ablation_preset(),
                other => anyhow::bail!("unknown preset `{other}`"),
            };
            println!("{}", c.to_json());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QML_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
