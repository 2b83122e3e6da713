use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pitwi::crafter::{self, Quota};
use pitwi::cube::DatasetManifest;
use pitwi::harness::{self, Ablation, ExperimentConfig, HarnessError};
use pitwi::lake::{self, GenerationMethod};
use pitwi::world::Domain;

#[derive(Parser)]
#[command(name = "pitwi", version, about = "Run pattern-induced grounding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Lake,
    Crafter,
    Cube,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Domain {
        match d {
            DomainArg::Lake => Domain::Lake,
            DomainArg::Crafter => Domain::Crafter,
            DomainArg::Cube => Domain::Cube,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoInference,
    NoReweight,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config; only `domain` is required inside it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Domain with default settings, when no config file is given.
    #[arg(long)]
    domain: Option<DomainArg>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    map_size: Option<usize>,
    /// Keep per-episode traces.
    #[arg(long)]
    trace: bool,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated maps or the cube dataset.
    Generate {
        domain: DomainArg,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid side; defaults to 16 (lake) or 64 (crafter).
        #[arg(long)]
        size: Option<usize>,
        /// Scramble length for cube states.
        #[arg(long, default_value_t = 20)]
        moves: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment.
    Run(RunArgs),
    /// Evaluate a frozen library, typically on larger maps.
    Ood {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        library: PathBuf,
    },
    /// Summarise a report or run directory.
    Inspect { path: PathBuf },
    /// Check a report or run directory against the schema and its invariants.
    Validate { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match (&args.config, args.domain) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            let c = ExperimentConfig::from_json_str(&text)?;
            if let Some(d) = args.domain {
                if Domain::from(d) != c.domain {
                    return Err(HarnessError::Config("--domain disagrees with the config file".into()));
                }
            }
            c
        }
        (None, Some(d)) => ExperimentConfig::for_domain(d.into()),
        (None, None) => return Err(HarnessError::Config("give --config or --domain".into())),
    };
    if let Some(n) = args.episodes {
        config.episodes = n;
    }
    if let Some(s) = &args.seeds {
        config.seeds = s.clone();
    }
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(a) = args.ablation {
        config.ablation = match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoInference => Ablation::NoInference,
            AblationArg::NoReweight => Ablation::NoReweight,
        };
    }
    if let Some(n) = args.map_size {
        config.map_size = n;
    }
    config.record_trace |= args.trace;
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Generate { domain, count, seed, size, moves, out } => generate(domain.into(), count, seed, size, moves, &out),
        Command::Run(args) => {
            let config = load_config(&args)?;
            let output = harness::run_experiment(&config)?;
            harness::write_run_dir(&args.out, &output)?;
            print_summary(&output.report);
            Ok(())
        }
        Command::Ood { run, library } => {
            let config = load_config(&run)?;
            let frozen = harness::load_library(&library).map_err(|e| HarnessError::Config(e.to_string()))?;
            let output = harness::run_ood(&config, &frozen)?;
            harness::write_run_dir(&run.out, &output)?;
            print_summary(&output.report);
            Ok(())
        }
        Command::Inspect { path } => {
            let report = harness::read_report(&report_path(&path))?;
            print_summary(&report);
            for t in &report.trials {
                let a = &t.aggregates;
                println!(
                    "  seed {} trial {}: planning {:.2}% grounding {:.2}% reveals {:.2} proposals {}",
                    t.seed,
                    t.trial,
                    100.0 * a.planning_accuracy,
                    100.0 * a.grounding_accuracy,
                    a.mean_reveals,
                    a.proposals
                );
            }
            Ok(())
        }
        Command::Validate { path } => {
            let problems = if path.is_dir() {
                harness::audit_run_dir(&path)?
            } else {
                let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io { path: path.clone(), source: e })?;
                let json = serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Malformed { what: path.display().to_string(), reason: e.to_string() })?;
                harness::audit_report(&json)
            };
            if problems.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for p in &problems {
                    println!("{p}");
                }
                Err(HarnessError::Malformed { what: path.display().to_string(), reason: format!("{} problem(s)", problems.len()) })
            }
        }
    }
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    }
}

fn print_summary(report: &harness::RunReport) {
    let c = &report.config;
    let a = &report.aggregates;
    println!("{} {:?}: {} episodes x {} run(s)", c.domain.name(), c.ablation, c.episodes, report.trials.len());
    println!("  planning accuracy   {:.2}%", 100.0 * a.planning_accuracy);
    println!("  grounding accuracy  {:.2}%", 100.0 * a.grounding_accuracy);
    println!("  mean reveals        {:.2}", a.mean_reveals);
    println!("  perception tokens   {:.1} in / {:.1} out", a.perception_in, a.perception_out);
    println!("  proposal tokens     {:.1} in / {:.1} out per proposal ({} proposals)", a.proposal_in, a.proposal_out, a.proposals);
    println!("  total tokens        {:.1} in / {:.1} out", a.total_in, a.total_out);
}

fn generate(domain: Domain, count: usize, seed: u64, size: Option<usize>, moves: usize, out: &Path) -> Result<(), HarnessError> {
    let config_err = |m: String| HarnessError::Config(m);
    match domain {
        Domain::Lake => {
            let size = size.unwrap_or(16);
            let templates = lake::default_templates();
            for i in 0..count {
                let s = seed + i as u64;
                let map = lake::generate_map(&templates, size, lake::min_path_for(size), s, GenerationMethod::Reject).map_err(|e| {
                    match e {
                        lake::LakeError::BadSize(_) => config_err(e.to_string()),
                        _ => HarnessError::Generation { seed: s, reason: e.to_string() },
                    }
                })?;
                let text = serde_json::to_string_pretty(&map).expect("map serializes");
                harness::write_atomic(&out.join(format!("lake_{s}.json")), &text)?;
            }
        }
        Domain::Crafter => {
            let size = size.unwrap_or(64);
            if size < 16 {
                return Err(config_err(format!("crafter maps need size >= 16, got {size}")));
            }
            for i in 0..count {
                let s = seed + i as u64;
                let map = crafter::generate_world(s, size, &Quota::default())
                    .map_err(|e| HarnessError::Generation { seed: s, reason: e.to_string() })?;
                let text = serde_json::to_string(&map).expect("map serializes");
                harness::write_atomic(&out.join(format!("crafter_{s}.json")), &text)?;
            }
        }
        Domain::Cube => {
            if count == 0 {
                return Err(config_err("count must be positive".into()));
            }
            let manifest = DatasetManifest::generate(seed, count, moves);
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            harness::write_atomic(&out.join("cube_dataset.json"), &text)?;
        }
    }
    println!("wrote {} to {}", domain.name(), out.display());
    Ok(())
}
