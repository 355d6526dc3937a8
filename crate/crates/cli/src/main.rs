use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semistatic_vem::runner::{
    ablate, ablation_csv, run_scenario, write_outputs, AblationSpec, RunError,
};
use semistatic_vem::sim::{preset, ScenarioConfig, ScenarioError, PRESET_NAMES};
use semistatic_vem::vem::{Variant, VemConfig};

/// Variational-EM SLAM for semi-static scenes on simulated 2D worlds.
#[derive(Parser)]
#[command(name = "semistatic-vem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and run the pipeline over every frame.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Existing directory for the CSV reports.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG charts of the frame-1 EM traces.
        #[arg(long, requires = "out")]
        svg: bool,
    },
    /// Compare objective variants over a range of seeds.
    Ablate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Seeds as a list (`0,3,7`) or a half-open range (`0..20`).
        #[arg(long, default_value = "0..20", value_parser = parse_seeds)]
        seeds: SeedList,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,point_estimate,no_max_mixture,gate_by_E_pi"
        )]
        variants: Vec<Variant>,
        /// Existing directory for per-cell reports and `ablation.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in scenarios.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Check a scenario JSON file and report every problem found.
    Validate { config: PathBuf },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as JSON, ready to edit and pass back with `--config`.
    Show {
        name: String,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct ScenarioArgs {
    #[arg(long)]
    preset: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    em_iters: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |e: std::num::ParseIntError| format!("invalid seed in `{s}`: {e}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(bad)?,
            b.trim().parse().map_err(bad)?,
        );
        if a >= b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((a..b).collect()));
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(bad))
        .collect::<Result<Vec<u64>, String>>()
        .map(SeedList)
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(RunError),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Run(e)
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(ScenarioConfig::from_json(&text)?)
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig, CliError> {
        match (&self.preset, &self.config) {
            (_, Some(path)) => load_config(path),
            (Some(name), None) => Ok(preset(name)?),
            (None, None) => Ok(preset(PRESET_NAMES[0])?),
        }
    }
}

impl PipelineArgs {
    fn config(&self, variant: Variant) -> Result<VemConfig, CliError> {
        let mut vem = VemConfig {
            variant,
            ..VemConfig::default()
        };
        if let Some(n) = self.em_iters {
            vem.em_iters = n;
        }
        if let Some(m) = self.window {
            vem.window = m;
        }
        vem.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(vem)
    }
}

fn check_out_dir(out: &Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(dir) if !dir.is_dir() => Err(RunError::MissingOutDir(dir.clone()).into()),
        _ => Ok(()),
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            scenario,
            pipeline,
            seed,
            variant,
            out,
            svg,
        } => {
            let mut cfg = scenario.resolve()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let vem = pipeline.config(variant)?;
            check_out_dir(&out)?;
            let result = run_scenario(&cfg, &vem)?;
            let m = &result.metrics;
            println!("scenario        {} (seed {})", cfg.name, cfg.seed);
            println!("variant         {variant}");
            println!("frames          {}", result.frames.len());
            println!("ate             {:.6} m", m.ate);
            println!("mpe             {:.6} m", m.mpe);
            println!("change prec.    {:.3}", m.change_precision);
            println!("change recall   {:.3}", m.change_recall);
            println!("mode flips      {}", m.mode_flips);
            println!("runtime         {:.3} s", m.runtime);
            if let Some(dir) = out {
                for path in write_outputs(&result, &dir, svg)? {
                    log::info!("wrote {}", path.display());
                }
            }
        }
        Command::Ablate {
            scenario,
            pipeline,
            seeds,
            variants,
            out,
        } => {
            let cfg = scenario.resolve()?;
            let vem = pipeline.config(Variant::Full)?;
            check_out_dir(&out)?;
            let spec = AblationSpec {
                variants,
                seeds: seeds.0,
            };
            let rows = ablate(&cfg, &vem, &spec, out.as_deref())?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Preset { action } => match action {
            PresetAction::List => {
                for name in PRESET_NAMES {
                    let cfg = preset(name)?;
                    println!(
                        "{name:<16} {:>2} objects, {} moves, {} frames",
                        cfg.objects.len(),
                        cfg.moves.len(),
                        cfg.robot_path.len()
                    );
                }
            }
            PresetAction::Show { name } => println!("{}", preset(&name)?.to_json()),
        },
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            println!(
                "{}: ok ({} objects, {} moves, {} frames)",
                config.display(),
                cfg.objects.len(),
                cfg.moves.len(),
                cfg.robot_path.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMISTATIC_VEM_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage_error() { 2 } else { 1 })
        }
    }
}
