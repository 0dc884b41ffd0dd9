use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mbisac::baselines::SchemeId;
use mbisac::harness::{self, MonteCarloResult};
use mbisac::model::SystemConfig;
use mbisac::Result;

#[derive(Parser)]
#[command(name = "mbisac", version, about = "Multi-band cooperative ISAC sum sensing-rate optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Defaults(Common),
    /// Run every scheme on one channel realization.
    Trial(Common),
    /// Monte Carlo campaign; one CSV row per (trial, scheme).
    Mc(Common),
    /// Per-iteration objective of each scheme on one realization.
    Converge(Common),
    /// Mean sum SR versus transmit power.
    Sweep(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel seed (trial/converge) or base seed (mc/sweep); defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated schemes, e.g. proposed,eq-pow-split,bs1-only,upper-bound,increased-cr.
    #[arg(long)]
    schemes: Option<String>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Comma-separated transmit powers in W for the sweep.
    #[arg(long, default_value = "0.001,0.01,0.1,1,10")]
    powers: String,
    /// Keep only the first N base stations of the configuration.
    #[arg(long)]
    bands: Option<usize>,
    /// Worker threads (all cores when omitted).
    #[arg(long)]
    threads: Option<usize>,
    /// Emit one JSON record per trial instead of CSV.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn config(&self) -> Result<SystemConfig> {
        let mut cfg = match &self.config {
            Some(p) => SystemConfig::load(p)?,
            None => SystemConfig::default(),
        };
        if let Some(n) = self.bands {
            if n == 0 || n > cfg.num_bands() {
                return Err(mbisac::IsacError::InvalidArgument(format!("--bands must be in 1..={}", cfg.num_bands())));
            }
            cfg = cfg.with_bands(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &SystemConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    fn schemes(&self, cfg: &SystemConfig, default: Vec<SchemeId>) -> Result<Vec<SchemeId>> {
        match &self.schemes {
            Some(s) => SchemeId::parse_list(s),
            None => Ok(default),
        }
        .and_then(|v| {
            for s in &v {
                if let SchemeId::BsOnly(b) = s {
                    if *b >= cfg.num_bands() {
                        return Err(mbisac::IsacError::InvalidArgument(format!("{s}: only {} bands", cfg.num_bands())));
                    }
                }
            }
            Ok(v)
        })
    }

    fn powers(&self) -> Result<Vec<f64>> {
        self.powers
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| mbisac::IsacError::InvalidArgument(format!("power '{p}': {e}")))
            })
            .collect()
    }

    fn output(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        })
    }
}

fn write_mc(mc: &MonteCarloResult, json: bool, out: &mut dyn Write) -> Result<()> {
    if json {
        mc.write_json_lines(&mut *out)?;
    } else {
        mc.write_csv(&mut *out)?;
    }
    out.flush()?;
    Ok(())
}

fn summarize(mc: &MonteCarloResult) {
    for st in mc.stats() {
        let se = st.stderr_sr_bits.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4e}"));
        eprintln!(
            "{:<14} mean SR {:.6e} bit/s  stderr {se}  completed {}/{}",
            st.scheme.to_string(),
            st.mean_sr_bits,
            st.completed,
            st.completed + st.failed
        );
    }
    if let Some(r) = mc.paired_mean_ratio(SchemeId::Proposed, SchemeId::EqPowSplit) {
        eprintln!("proposed / eq-pow-split = {r:.4}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Defaults(c) => {
            let mut out = c.output()?;
            write!(out, "{}", c.config()?.to_toml_string())?;
            out.flush()?;
            Ok(true)
        }
        Command::Trial(c) => {
            let cfg = c.config()?;
            let schemes = c.schemes(&cfg, SchemeId::all(cfg.num_bands()))?;
            let seed = c.seed(&cfg);
            let trial = harness::run_trial(&cfg, 0, seed, &schemes)?;
            let mc = MonteCarloResult { base_seed: seed, schemes, trials: vec![trial] };
            write_mc(&mc, c.json, &mut c.output()?)?;
            Ok(mc.all_completed())
        }
        Command::Mc(c) => {
            let cfg = c.config()?;
            let schemes = c.schemes(&cfg, SchemeId::all(cfg.num_bands()))?;
            let mc = harness::run_montecarlo(&cfg, c.trials, c.seed(&cfg), &schemes, c.threads)?;
            write_mc(&mc, c.json, &mut c.output()?)?;
            summarize(&mc);
            Ok(mc.all_completed())
        }
        Command::Converge(c) => {
            let cfg = c.config()?;
            let schemes = c.schemes(&cfg, vec![SchemeId::Proposed, SchemeId::EqPowSplit])?;
            let traces = harness::convergence_trace(&cfg, c.seed(&cfg), &schemes)?;
            let mut out = c.output()?;
            harness::write_convergence_csv(&traces, &mut out)?;
            out.flush()?;
            Ok(true)
        }
        Command::Sweep(c) => {
            let cfg = c.config()?;
            let schemes = c.schemes(&cfg, SchemeId::all(cfg.num_bands()))?;
            let sweep = harness::sweep_power(&cfg, &c.powers()?, c.trials, c.seed(&cfg), &schemes, c.threads)?;
            let mut out = c.output()?;
            if c.json {
                serde_json::to_writer_pretty(&mut out, &sweep).map_err(io::Error::from)?;
                writeln!(out)?;
            } else {
                sweep.write_csv(&mut out)?;
            }
            out.flush()?;
            Ok(sweep.all_completed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some schemes did not complete; see the failure records");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
