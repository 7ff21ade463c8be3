use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sco_adversary::harness::{
    cmd_acceptance, cmd_gen_codebook, cmd_risk, cmd_run, cmd_verify, EventPolicy, ExperimentConfig,
    Family, Seeds, OUTPUT_ENV, SUITES,
};
use sco_adversary::risk::RiskReport;

#[derive(Parser)]
#[command(
    name = "sco-adversary",
    version,
    about = "Adversarial SCO instances for GD and one-pass SGD"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a nearly orthogonal sign codebook and write it as JSON.
    GenCodebook {
        /// Number of vectors.
        #[arg(short = 'N', long)]
        universe: usize,
        /// Dimension; defaults to max(256, ceil(178 log2 N)).
        #[arg(long)]
        dprime: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = "codebook.json")]
        out: PathBuf,
    },
    /// Sample, optimize, verify and report risks for each seed.
    Run(RunArgs),
    /// Re-check a stored run directory.
    Verify {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Recompute the risk reports of a stored run directory.
    Risk {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Run an acceptance suite and print one PASS/FAIL line per criterion.
    Acceptance {
        /// Suite name, or `all`.
        #[arg(default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: String,
        /// Write the results as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Every flag overrides the matching field of the TOML config, if one is
/// given.
#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(short = 'T', long = "T")]
    t: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Warn instead of failing when eta exceeds the theorem step size.
    #[arg(long)]
    no_theorem_mode: bool,
    #[arg(short = 'N', long = "N")]
    universe: Option<usize>,
    #[arg(long)]
    dprime: Option<usize>,
    #[arg(long)]
    codebook_seed: Option<u64>,
    /// `1,2,5` or `0..10`.
    #[arg(long)]
    seeds: Option<Seeds>,
    #[arg(long)]
    projected: bool,
    /// Suffix lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    suffix: Option<Vec<usize>>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    smoothing: bool,
    #[arg(long)]
    smoothing_samples: Option<usize>,
    #[arg(long)]
    event: Option<EventPolicy>,
    #[arg(long)]
    max_draws: Option<usize>,
    /// Output root; falls back to the config, then the environment.
    #[arg(short, long, env = OUTPUT_ENV)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.family) {
            (Some(path), _) => ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            (None, Some(family)) => ExperimentConfig::new(family),
            (None, None) => anyhow::bail!("give either --config or --family"),
        };
        if let Some(f) = self.family {
            cfg.family = f;
        }
        set(&mut cfg.n, self.n);
        set(&mut cfg.t, self.t);
        set(&mut cfg.universe, self.universe);
        set(&mut cfg.codebook_seed, self.codebook_seed);
        set(&mut cfg.seeds, self.seeds);
        set(&mut cfg.suffix, self.suffix);
        set(&mut cfg.mc_samples, self.mc_samples);
        set(&mut cfg.smoothing_samples, self.smoothing_samples);
        set(&mut cfg.event, self.event);
        set(&mut cfg.max_draws, self.max_draws);
        if self.eta.is_some() {
            cfg.eta = self.eta;
        }
        if self.dprime.is_some() {
            cfg.dprime = self.dprime;
        }
        if self.out.is_some() {
            cfg.output = self.out;
        }
        cfg.theorem_mode &= !self.no_theorem_mode;
        cfg.projected |= self.projected;
        cfg.smoothing |= self.smoothing;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn print_risk(reports: &[RiskReport]) {
    for r in reports {
        let closed = r
            .population_closed
            .map(|c| format!(" (closed form {c:.6})"))
            .unwrap_or_default();
        println!(
            "{} m={}: empirical {:.6}, population {:.6} ± {:.1e}{closed}, excess {:.6}",
            r.family, r.m, r.empirical, r.population.mean, r.population.stderr, r.excess
        );
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenCodebook {
            universe,
            dprime,
            seed,
            out,
        } => {
            let cb = cmd_gen_codebook(universe, dprime, seed, &out)?;
            println!(
                "wrote {} vectors of dimension {} to {}",
                cb.len(),
                cb.dim(),
                out.display()
            );
            Ok(true)
        }
        Command::Run(args) => {
            let summary = cmd_run(&args.into_config()?)?;
            for s in &summary.seeds {
                println!("{}: verify {}", s.dir.display(), verdict(s.verify.pass));
                print_risk(&s.risk);
            }
            Ok(summary.pass)
        }
        Command::Verify { run_dir } => {
            let report = cmd_verify(&run_dir)?;
            for c in &report.checks {
                let status = c.pass.map_or("SKIP", verdict);
                println!("{status} {}", c.name);
            }
            println!("{}", verdict(report.pass));
            Ok(report.pass)
        }
        Command::Risk {
            run_dir,
            mc_samples,
        } => {
            print_risk(&cmd_risk(&run_dir, mc_samples)?);
            Ok(true)
        }
        Command::Acceptance { suite, out } => {
            let (pass, results) = cmd_acceptance(&suite, out.as_deref())?;
            for r in &results {
                println!("{}", r.line());
            }
            Ok(pass)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
