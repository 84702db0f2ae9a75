//! `pnd` command line: probe generation, evaluation, ablation, traces and
//! hyperparameter sweeps on the planted world.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::decoder::{generate, DecodeConfig, Selection};
use crate::error::{PndError, Result};
use crate::harness::{
    derive_seed, run_ablation, run_eval, run_sweep, summary_rows, unix_now, write_csv, AblationTable, Benchmark,
    HarnessConfig, Probe, ProbeSet, Strategy, SCHEMA_VERSION,
};
use crate::toy::caption_prompt;

#[derive(Debug, Parser)]
#[command(name = "pnd", version, about = "Contrastive decoding benchmark on a planted vision-language model")]
struct Cli {
    /// key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra key=value setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long = "noise-step", global = true)]
    noise_step: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "max-tokens", global = true)]
    max_tokens: Option<usize>,
    /// `greedy` or `temperature:<t>`.
    #[arg(long, global = true)]
    selection: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate balanced yes/no probe sets.
    ProbeGen {
        #[command(flatten)]
        out: OutArgs,
        /// Only this strategy (default: every configured strategy).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Score one decoding configuration; writes a JSON report.
    Eval {
        #[command(flatten)]
        out: OutArgs,
        /// Summary CSV, one row per strategy.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Probe sets written by `probe-gen` instead of generating them.
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Baseline, single-path and full contrast side by side.
    Ablate {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Decode one prompt and dump the per-step trace as JSON lines.
    Trace {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Ask whether this object is present; captions the scene otherwise.
        #[arg(long)]
        object: Option<usize>,
    },
    /// Grid over alpha, gamma, beta, tau, lambda and noise step; writes CSV.
    Sweep {
        #[command(flatten)]
        out: OutArgs,
        /// Grid axis such as `alpha=0,0.5,1` (also `grid.alpha` in the config).
        #[arg(long = "grid", value_name = "AXIS=VALUES")]
        grid: Vec<String>,
        #[arg(long)]
        probes: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeFile {
    schema_version: u32,
    sets: Vec<ProbeSet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationReport {
    schema_version: u32,
    generated_at: u64,
    world_seed: u64,
    scene_seed: u64,
    probe_seed: u64,
    config: DecodeConfig,
    tables: Vec<AblationTable>,
}

#[derive(Debug, Serialize)]
struct TraceHeader<'a> {
    schema_version: u32,
    prompt: &'a [usize],
    tokens: &'a [usize],
    labels: Vec<String>,
    stopped: bool,
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PndError::config(format!("cannot read {}: {e}", path.display())))?;
            HarnessConfig::from_key_values(&text)?
        }
        None => HarnessConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PndError::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    let d = &mut cfg.decode;
    if let Some(v) = cli.alpha {
        d.alpha = v;
    }
    if let Some(v) = cli.gamma {
        d.gamma = v;
    }
    if let Some(v) = cli.beta {
        d.beta = v;
    }
    if let Some(v) = cli.lambda {
        d.lambda = v;
    }
    if let Some(v) = cli.tau {
        d.tau = v;
    }
    if let Some(v) = cli.noise_step {
        d.noise_step = v;
    }
    if let Some(v) = cli.seed {
        d.seed = v;
    }
    if let Some(v) = cli.max_tokens {
        d.max_tokens = v;
    }
    if let Some(s) = &cli.selection {
        d.selection = s.parse::<Selection>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut out = open_out(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn probe_sets(bench: &Benchmark, cfg: &HarnessConfig, file: Option<&Path>) -> Result<Vec<ProbeSet>> {
    match file {
        None => bench.probe_sets(cfg),
        Some(path) => {
            let parsed: ProbeFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if parsed.schema_version != SCHEMA_VERSION {
                return Err(PndError::input(format!(
                    "probe file schema {} is not {SCHEMA_VERSION}",
                    parsed.schema_version
                )));
            }
            Ok(parsed.sets)
        }
    }
}

fn apply_grid(cfg: &mut HarnessConfig, axes: &[String]) -> Result<()> {
    for axis in axes {
        let (k, v) = axis
            .split_once('=')
            .ok_or_else(|| PndError::config(format!("--grid expects AXIS=VALUES, got '{axis}'")))?;
        let key = format!("grid.{}", k.trim().trim_start_matches("grid.").replace('-', "_"));
        cfg.apply(&key, v)?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Command::Sweep { grid, .. } = &cli.command {
        apply_grid(&mut cfg, grid)?;
    }
    let bench = Benchmark::from_config(&cfg)?;
    match &cli.command {
        Command::ProbeGen { out, strategy } => {
            if let Some(s) = strategy {
                cfg.strategies = vec![s.parse::<Strategy>()?];
            }
            let sets = bench.probe_sets(&cfg)?;
            write_json(
                &ProbeFile {
                    schema_version: SCHEMA_VERSION,
                    sets,
                },
                out.out.as_deref(),
            )
        }
        Command::Eval { out, csv, probes } => {
            let sets = probe_sets(&bench, &cfg, probes.as_deref())?;
            let report = run_eval(&bench, &cfg, &sets, &cfg.decode)?;
            write_json(&report, out.out.as_deref())?;
            if let Some(path) = csv {
                write_csv(&summary_rows(&report), File::create(path)?)?;
            }
            Ok(())
        }
        Command::Ablate { out, probes } => {
            let sets = probe_sets(&bench, &cfg, probes.as_deref())?;
            let tables = sets
                .iter()
                .map(|s| run_ablation(&bench, s, &cfg.decode))
                .collect::<Result<Vec<_>>>()?;
            write_json(
                &AblationReport {
                    schema_version: SCHEMA_VERSION,
                    generated_at: unix_now(),
                    world_seed: bench.world.seed,
                    scene_seed: cfg.scene_seed,
                    probe_seed: cfg.probe_seed,
                    config: cfg.decode.clone(),
                    tables,
                },
                out.out.as_deref(),
            )
        }
        Command::Trace { out, scene, object } => {
            if *scene >= bench.scenes.len() {
                return Err(PndError::config(format!(
                    "scene {scene} outside a corpus of {}",
                    bench.scenes.len()
                )));
            }
            let prompt = match object {
                Some(x) => {
                    if *x >= bench.world.n_objects() {
                        return Err(PndError::config(format!("unknown object {x}")));
                    }
                    bench.probe_prompt(&Probe {
                        scene_index: *scene,
                        object: *x,
                        strategy: Strategy::Random,
                        ground_truth: bench.scenes[*scene].contains(*x),
                    })
                }
                None => caption_prompt(&bench.world),
            };
            let decode = DecodeConfig {
                seed: derive_seed(cfg.decode.seed, *scene as u64),
                ..cfg.decode.clone()
            };
            let generation = generate(&bench.world, bench.features(*scene), &prompt, &decode)?;
            let mut w = open_out(out.out.as_deref())?;
            let header = TraceHeader {
                schema_version: SCHEMA_VERSION,
                prompt: &prompt,
                tokens: &generation.tokens,
                labels: generation.tokens.iter().map(|&t| bench.world.label(t)).collect(),
                stopped: generation.stopped,
            };
            serde_json::to_writer(&mut w, &header)?;
            w.write_all(b"\n")?;
            generation.trace.write_jsonl(&mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Sweep { out, probes, .. } => {
            let sets = probe_sets(&bench, &cfg, probes.as_deref())?;
            let rows = run_sweep(&bench, &sets, &cfg.decode, &cfg.grid)?;
            let mut w = open_out(out.out.as_deref())?;
            write_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for usage
/// or config errors, 1 for anything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pnd: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
