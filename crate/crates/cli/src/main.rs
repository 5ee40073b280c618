use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use invrl::risk::RiskMeasure;
use invrl_cli::{cmd_fit, cmd_risk, cmd_scramble, cmd_simulate, RewardScheme, RunConfig};

/// Fit Q-learning choice models to trading logs.
#[derive(Parser)]
#[command(name = "invrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit random, myopic and full models to every active player.
    Fit(Overrides),
    /// Compare the ranked risk bins against random scrambles.
    Scramble {
        /// Player to test; repeat for several. Every active player if omitted.
        #[arg(long = "player")]
        players: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic market and agent population.
    Simulate {
        #[arg(long)]
        n_agents: Option<usize>,
        #[arg(long)]
        sells_min: Option<usize>,
        #[arg(long)]
        sells_max: Option<usize>,
        #[arg(long)]
        holding_days: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Classify the stocks in a price file.
    Risk(Overrides),
}

/// Values given here replace the config file's.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    transactions: Option<PathBuf>,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lrt_confidence: Option<f64>,
    #[arg(long)]
    ci_confidence: Option<f64>,
    #[arg(long)]
    chance_threshold: Option<f64>,
    #[arg(long)]
    n_scrambles: Option<usize>,
    #[arg(long)]
    cap: Option<usize>,
    /// `beta` or `riskiness`.
    #[arg(long, value_parser = parse_enum::<RiskMeasure>)]
    risk: Option<RiskMeasure>,
    /// Only `cost_basis`.
    #[arg(long, value_parser = parse_enum::<RewardScheme>)]
    reward: Option<RewardScheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    min_sells: Option<usize>,
    #[arg(long)]
    min_span_days: Option<i64>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

impl Overrides {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(out, lrt_confidence, ci_confidence, chance_threshold, n_scrambles, risk, reward, seed, min_sells, min_span_days);
        for (slot, v) in [
            (&mut c.transactions, self.transactions),
            (&mut c.prices, self.prices),
            (&mut c.benchmark, self.benchmark),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        if self.cap.is_some() {
            c.cap = self.cap;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> anyhow::Result<invrl_cli::Status> {
    match cli.command {
        Command::Fit(o) => cmd_fit(&o.resolve()?),
        Command::Risk(o) => cmd_risk(&o.resolve()?),
        Command::Scramble { players, overrides } => cmd_scramble(&overrides.resolve()?, &players),
        Command::Simulate {
            n_agents,
            sells_min,
            sells_max,
            holding_days,
            overrides,
        } => {
            let mut c = overrides.resolve()?;
            let s = &mut c.simulate;
            s.n_agents = n_agents.unwrap_or(s.n_agents);
            s.sells_min = sells_min.unwrap_or(s.sells_min);
            s.sells_max = sells_max.unwrap_or(s.sells_max);
            s.holding_days = holding_days.unwrap_or(s.holding_days);
            cmd_simulate(&c)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
