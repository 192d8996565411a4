use std::fs;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topoaddr_sim::harness::{generate_random, run, sweep, GenParams, Scenario};

#[derive(Parser)]
#[command(name = "topoaddr", about = "Simulate hierarchical address allocation in ad hoc networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and check invariants at every settled point.
    Run {
        scenario: String,
        #[arg(long)]
        trace: Option<String>,
        #[arg(long)]
        metrics: Option<String>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a random scenario.
    Gen {
        #[arg(long, default_value_t = 20)]
        nodes: u64,
        #[arg(long, default_value_t = 0.0)]
        churn: f64,
        #[arg(long, default_value_t = 0.0)]
        mobility: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        batch: u64,
        #[arg(long, default_value_t = 2)]
        lookups: u32,
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
    },
    /// Parse and validate a scenario.
    Validate { scenario: String },
    /// Per-join message counts across network sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "50,150,400")]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        probes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(path: &str) -> Result<Scenario, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("{path}: {e}");
        ExitCode::from(2)
    })?;
    Scenario::parse(&text).map_err(|e| {
        eprintln!("{path}: {e}");
        ExitCode::from(2)
    })
}

fn write(path: &str, body: &str) -> Result<(), ExitCode> {
    fs::write(path, body).map_err(|e| {
        eprintln!("{path}: {e}");
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match real_main(cli) {
        Ok(code) | Err(code) => code,
    }
}

fn real_main(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.cmd {
        Cmd::Validate { scenario } => {
            let s = load(&scenario)?;
            println!("ok: {} events, horizon {}", s.events.len(), s.header.horizon);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gen { nodes, churn, mobility, seed, batch, lookups, drop } => {
            if nodes == 0 || churn < 0.0 || mobility < 0.0 || !(0.0..=1.0).contains(&drop) {
                eprintln!("nodes must be >= 1, rates >= 0, drop in [0, 1]");
                return Err(ExitCode::from(2));
            }
            let p = GenParams { nodes, batch, churn, mobility, lookups, drop, seed };
            print!("{}", generate_random(&p).render());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { scenario, trace, metrics, seed } => {
            let mut s = load(&scenario)?;
            if let Some(seed) = seed {
                s.header.seed = seed;
            }
            let out = run(&s);
            if let Some(p) = trace {
                write(&p, out.trace())?;
            }
            let report = out.metrics().map_err(|e| {
                eprintln!("{e}");
                ExitCode::from(1)
            })?;
            if let Some(p) = metrics {
                write(&p, &report.to_string())?;
            }
            let mut bad = false;
            for c in &out.checkpoints {
                if !c.quiescent {
                    bad = true;
                    let busy: Vec<String> = c.busy.iter().map(|(n, w)| format!("{n}:{}", w.join("+"))).collect();
                    println!("checkpoint {}: did not settle ({} in flight; busy {})", c.at, c.in_flight, busy.join(" "));
                }
                for v in &c.violations {
                    bad = true;
                    println!("checkpoint {}: {v}", c.at);
                }
            }
            let configured = out.world.nodes().filter(|n| n.address().is_some()).count();
            println!(
                "{} checkpoints, {} nodes configured, {} messages",
                out.checkpoints.len(),
                configured,
                report.total_messages()
            );
            Ok(if bad { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Cmd::Sweep { sizes, probes, seed } => {
            if sizes.is_empty() || probes == 0 {
                eprintln!("need at least one size and one probe");
                return Err(ExitCode::from(2));
            }
            println!("{:>6} {:>10}  join costs", "nodes", "configured");
            let mut constants = Vec::new();
            for n in sizes {
                let row = sweep::join_cost(n, probes, seed);
                let costs: Vec<String> = row.costs.iter().map(|c| c.to_string()).collect();
                println!("{:>6} {:>10}  {}", row.nodes, row.configured, costs.join(" "));
                constants.push(row.constant());
            }
            match constants.first() {
                Some(Some(c)) if constants.iter().all(|x| *x == Some(*c)) => {
                    println!("constant join cost c = {c}");
                    Ok(ExitCode::SUCCESS)
                }
                _ => {
                    println!("join cost differs across sizes");
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}
