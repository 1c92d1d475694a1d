//! Experiment driver CLI. Exit status: 0 on success, 1 when a verb's
//! embedded assertion fails (e.g. `check-model` finds a violation when none
//! was expected), 2 on usage or configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cachebar::config::ExperimentConfig;
use cachebar::driver::{
    run_check_model, run_classify, run_footprint, run_optimize, run_simulate_fr, run_simulate_pp,
    Expectation, RunOutcome,
};

#[derive(Parser)]
#[command(
    name = "cachebar",
    version,
    about = "Deterministic simulator and analysis toolkit for last-level-cache side-channel defenses"
)]
struct Cli {
    /// Experiment configuration file (TOML); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (also via CACHEBAR_OUT).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Exhaustively check the two-domain non-interference model.
    CheckModel(CheckModelArgs),
    /// Solve the budget-distribution optimization.
    Optimize(OptimizeArgs),
    /// Run the Flush-Reload covert-channel experiment.
    SimulateFr(SimulateFrArgs),
    /// Run Prime-Probe trials.
    SimulatePp(SimulatePpArgs),
    /// Train and evaluate the demand classifier, with aggregation.
    Classify(ClassifyArgs),
    /// Compare memory footprints across sharing policies.
    Footprint(FootprintArgs),
}

#[derive(Args)]
struct CheckModelArgs {
    /// Disable the flush that accompanies timer demotions.
    #[arg(long)]
    no_flush_on_demote: bool,
    /// Disable the flush that accompanies copy merges.
    #[arg(long)]
    no_flush_on_merge: bool,
    /// Let the attacker interleave operations arbitrarily.
    #[arg(long)]
    relax_protocol: bool,
    /// Expected verdict; defaults to `verified` when both fixes are on.
    #[arg(long, value_parser = ["verified", "violation"])]
    expect: Option<String>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Cache associativity (lines per set).
    #[arg(long)]
    w: Option<usize>,
    /// Number of colluding attacker domains.
    #[arg(long)]
    m: Option<usize>,
    /// Security/performance balance knob, in (0, 1).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Search restarts.
    #[arg(long)]
    starts: Option<usize>,
    /// Annealing iterations per start.
    #[arg(long)]
    iterations: Option<usize>,
    /// Cap the largest budget the search may use.
    #[arg(long)]
    max_budget: Option<usize>,
}

#[derive(Args)]
struct SimulateFrArgs {
    #[arg(long)]
    trials: Option<usize>,
    /// Sender accesses per Flush-Reload interval (0 = idle sender).
    #[arg(long)]
    interval: Option<usize>,
}

#[derive(Args)]
struct SimulatePpArgs {
    #[arg(long)]
    trials: Option<usize>,
    /// Victim demand d.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    q_v: Option<usize>,
    #[arg(long)]
    q_a: Option<usize>,
    /// Symmetric measurement-noise probability.
    #[arg(long)]
    noise: Option<f64>,
    /// Also run a continuous interval simulation of this many intervals.
    #[arg(long)]
    intervals: Option<usize>,
    /// Budget distribution file for interval redraws.
    #[arg(long)]
    pmf: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Budget distribution file; omitted, the optimizer runs first.
    #[arg(long)]
    pmf: Option<PathBuf>,
    #[arg(long)]
    train_per_cell: Option<usize>,
    #[arg(long)]
    test_per_cell: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct FootprintArgs {
    /// `idle`, `busy25`, or a trace file path.
    #[arg(long)]
    workload: Option<String>,
    #[arg(long)]
    domains: Option<u32>,
    #[arg(long)]
    shared_pages: Option<u64>,
    #[arg(long)]
    private_pages: Option<u64>,
    #[arg(long)]
    ticks: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    // Flags win over the config file.
    let mut pmf_flag: Option<PathBuf> = None;
    let mut expect = None;
    match &cli.verb {
        Verb::CheckModel(a) => {
            if a.no_flush_on_demote {
                cfg.model.flush_on_demote = false;
            }
            if a.no_flush_on_merge {
                cfg.model.flush_on_merge = false;
            }
            if a.relax_protocol {
                cfg.model.protocol = false;
            }
            expect = a.expect.as_deref().map(|s| match s {
                "verified" => Expectation::Verified,
                _ => Expectation::Violation,
            });
        }
        Verb::Optimize(a) => {
            if let Some(w) = a.w {
                cfg.optimizer.ways = w;
            }
            if let Some(m) = a.m {
                cfg.optimizer.attackers = m;
            }
            if let Some(e) = a.epsilon {
                cfg.optimizer.epsilon = e;
            }
            if let Some(s) = a.starts {
                cfg.optimizer.starts = s;
            }
            if let Some(i) = a.iterations {
                cfg.optimizer.iterations = i;
            }
            if let Some(c) = a.max_budget {
                cfg.optimizer.max_budget = c;
            }
        }
        Verb::SimulateFr(a) => {
            if let Some(t) = a.trials {
                cfg.flush_reload.trials = t;
            }
            if let Some(i) = a.interval {
                cfg.flush_reload.interval = i;
            }
        }
        Verb::SimulatePp(a) => {
            if let Some(t) = a.trials {
                cfg.prime_probe.trials = t;
            }
            if let Some(d) = a.d {
                cfg.prime_probe.demand = d;
            }
            if let Some(q) = a.q_v {
                cfg.prime_probe.victim_budget = q;
            }
            if let Some(q) = a.q_a {
                cfg.prime_probe.attacker_budget = q;
            }
            if let Some(n) = a.noise {
                cfg.prime_probe.noise = n;
            }
            if let Some(i) = a.intervals {
                cfg.prime_probe.intervals = i;
            }
            pmf_flag.clone_from(&a.pmf);
        }
        Verb::Classify(a) => {
            if let Some(t) = a.train_per_cell {
                cfg.classify.train_per_cell = t;
            }
            if let Some(t) = a.test_per_cell {
                cfg.classify.test_per_cell = t;
            }
            if let Some(n) = a.noise {
                cfg.classify.noise = n;
            }
            pmf_flag.clone_from(&a.pmf);
        }
        Verb::Footprint(a) => {
            if let Some(w) = &a.workload {
                cfg.footprint.workload.clone_from(w);
            }
            if let Some(d) = a.domains {
                cfg.footprint.domains = d;
            }
            if let Some(s) = a.shared_pages {
                cfg.footprint.shared_pages = s;
            }
            if let Some(p) = a.private_pages {
                cfg.footprint.private_pages = p;
            }
            if let Some(t) = a.ticks {
                cfg.footprint.ticks = t;
            }
        }
    }

    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let out_dir = cfg.resolve_out_dir(cli.out.as_deref());

    let result = match &cli.verb {
        Verb::CheckModel(_) => run_check_model(&cfg, expect, &out_dir),
        Verb::Optimize(_) => run_optimize(&cfg, &out_dir),
        Verb::SimulateFr(_) => run_simulate_fr(&cfg),
        Verb::SimulatePp(_) => run_simulate_pp(&cfg, pmf_flag.as_deref()),
        Verb::Classify(_) => run_classify(&cfg, pmf_flag.as_deref(), &out_dir),
        Verb::Footprint(_) => run_footprint(&cfg, &out_dir),
    };

    match result {
        Ok(RunOutcome { report, passed }) => {
            match report.emit(&out_dir) {
                Ok(files) => {
                    for (key, value) in &report.results {
                        println!("{key}: {value}");
                    }
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                }
                Err(e) => {
                    eprintln!("error: cannot write outputs: {e}");
                    return ExitCode::from(2);
                }
            }
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
