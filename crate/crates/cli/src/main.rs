use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use provlm::config::RunConfig;
use provlm::harness::{run_batch, run_scenario, scenario_files, BackendSpec, Counters, MetricsReport};
use provlm::sim::frames::write_frames;
use provlm::sim::{render, SimScene};
use provlm::vlm::http::HttpConfig;

#[derive(Parser)]
#[command(name = "provlm", version, about = "Progressive VLM planning over a synthetic RGB-D world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Scripted,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the scenario's own seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "scripted")]
        backend: Backend,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every scenario in a directory several times and aggregate.
    Batch {
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        reps: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed for per-run seed derivation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "scripted")]
        backend: Backend,
        /// Write the aggregate report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write every per-run report into this directory.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
    /// Print the metrics of a run or batch report.
    Score { report: PathBuf },
    /// Render a scenario's first frame as PNGs.
    Render {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(anyhow::Error::msg),
        None => Ok(RunConfig::default()),
    }
}

fn backend_spec(b: Backend) -> Result<BackendSpec> {
    Ok(match b {
        Backend::Scripted => BackendSpec::Scripted,
        Backend::Http => BackendSpec::Http(HttpConfig::from_env()?),
    })
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn metrics_table(m: &MetricsReport) -> String {
    format!("SLPC {}\nTPSR {}\nMSR  {}\nTSR  {}", fmt_metric(m.slpc), fmt_metric(m.tpsr), fmt_metric(m.msr), fmt_metric(m.tsr))
}

fn score(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).context("report is not JSON")?;
    let counters: Counters = if let Some(totals) = v.get("totals") {
        serde_json::from_value(totals.clone()).context("batch totals")?
    } else if let Some(inputs) = v.get("metric_inputs") {
        Counters::from_inputs(&serde_json::from_value(inputs.clone()).context("run metric inputs")?)
    } else {
        bail!("{} is neither a run report nor a batch report", path.display());
    };
    Ok(counters.metrics()?)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, config, seed, backend, report } => {
            let cfg = load_config(config.as_deref())?;
            let scene = SimScene::load(&scenario)?;
            let seed = seed.unwrap_or(scene.rng_seed);
            let run = run_scenario(scene, &cfg, &backend_spec(backend)?, seed)?;
            eprintln!("{}: {:?} after {} iterations", run.scenario, run.termination, run.iterations);
            eprintln!("{}", metrics_table(&Counters::from_inputs(&run.metric_inputs).metrics()?));
            emit(&serde_json::to_string_pretty(&run)?, report.as_deref())
        }
        Command::Batch { dir, reps, config, seed, backend, report, runs_dir } => {
            let cfg = load_config(config.as_deref())?;
            let paths = scenario_files(&dir)?;
            if paths.is_empty() {
                bail!("no scenario files in {}", dir.display());
            }
            let (batch, runs) = run_batch(&paths, &cfg, &backend_spec(backend)?, reps, seed)?;
            if let Some(d) = runs_dir {
                std::fs::create_dir_all(&d)?;
                for (r, s) in runs.iter().zip(&batch.runs) {
                    let p = d.join(format!("{}_{}.json", r.scenario, s.rep));
                    std::fs::write(&p, serde_json::to_string_pretty(r)?).with_context(|| format!("writing {}", p.display()))?;
                }
            }
            for f in &batch.failures {
                eprintln!("failed: {} {}", f.path, f.error);
            }
            eprintln!("{} runs, {} failures", batch.runs.len(), batch.failures.len());
            eprintln!("{}", metrics_table(&batch.metrics));
            emit(&batch.to_json(), report.as_deref())?;
            if !batch.failures.is_empty() {
                bail!("batch incomplete: {} of its runs or scenarios failed", batch.failures.len());
            }
            Ok(())
        }
        Command::Score { report } => {
            println!("{}", metrics_table(&score(&report)?));
            Ok(())
        }
        Command::Render { scenario, out } => {
            let scene = SimScene::load(&scenario)?;
            let (obs, gt) = render(&scene);
            for p in write_frames(&out, &scene.name, &obs, &gt)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
