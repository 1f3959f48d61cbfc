//! `routerec` subcommands.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use routerec_core::analysis::{self, hypothesis_report, Filters, Fit, DEFAULT_BAND};
use routerec_core::config::{parse_experiment, reference_experiment, validate_config, Experiment, REFERENCE_CONFIG};
use routerec_core::dynamics::simulate_sampled;
use routerec_core::equilibrium::{bayes_wardrop, design_signal, DesignOptions};
use routerec_core::game::{check_obedience, social_cost};
use routerec_core::protocol::{read_session_logs, read_surveys, run_batch, Protocol};

use crate::api;

pub type CliResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Name accepted by `--config` for the shipped reference experiment.
pub const BUILTIN_CONFIG: &str = "paper";

#[derive(Debug, Parser)]
#[command(name = "routerec", version, about = "Route recommendation experiments: equilibria, dynamics, sessions, analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// Experiment TOML file, or `paper` for the built-in reference experiment.
    #[arg(long, default_value = BUILTIN_CONFIG)]
    pub config: String,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Displayed-rating band left out of the follow table, `lo,hi` or `none`.
    #[arg(long, default_value = "2.6,3.9", value_parser = parse_band)]
    pub band: Band,
    /// Rounds with a lower displayed rating are dropped from the regret fit.
    #[arg(long, default_value_t = analysis::DEFAULT_MIN_RATING)]
    pub min_rating: f64,
    /// Rounds with a lower time-averaged aggregated regret are dropped from the regret fit.
    #[arg(long, default_value_t = analysis::DEFAULT_MIN_REGRET)]
    pub min_regret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band(pub Option<(f64, f64)>);

fn parse_band(text: &str) -> Result<Band, String> {
    if text.eq_ignore_ascii_case("none") {
        return Ok(Band(None));
    }
    let (lo, hi) = text
        .split_once(',')
        .ok_or_else(|| format!("expected `lo,hi` or `none`, got `{text}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("band lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("band upper bound: {e}"))?;
    if lo > hi {
        return Err(format!("band lower bound {lo} exceeds upper bound {hi}"));
    }
    Ok(Band(Some((lo, hi))))
}

impl FilterArgs {
    fn filters(&self) -> Filters {
        Filters {
            band: self.band.0,
            min_rating: self.min_rating,
            min_regret: self.min_regret,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a config.
    Validate(ConfigArg),
    /// Obedience slacks of the configured policy.
    CheckObedience {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Uninformed (Bayes) Wardrop equilibrium and its cost.
    Wardrop {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Search for a minimum-cost obedient policy.
    Design {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        restarts: usize,
        /// Write the result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the population regret dynamics on i.i.d. states.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100_000)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial running average; defaults to the config value.
        #[arg(long, allow_hyphen_values = true)]
        m1: Option<f64>,
        #[arg(long)]
        m_max: Option<f64>,
        /// Rounds averaged for the terminal summary.
        #[arg(long, default_value_t = 10_000)]
        window: usize,
        /// Write the trajectory as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Play consecutive sessions with simulated participants.
    RunBatch {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for round logs, session logs and the lineage snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP session service.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Data directory holding one subdirectory per lineage.
        #[arg(long, default_value = "routerec-data")]
        out: PathBuf,
    },
    /// Hypothesis report over session logs.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// A `.jsonl` file or a directory of them.
        #[arg(long)]
        logs: PathBuf,
        #[command(flatten)]
        filters: FilterArgs,
        /// Directory of survey records for per-strategy fits.
        #[arg(long)]
        surveys: Option<PathBuf>,
        /// Also write CSV tables and the summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the hypothesis tables as CSV plus a JSON summary.
    Export {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        logs: PathBuf,
        #[command(flatten)]
        filters: FilterArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_text(arg: &ConfigArg) -> CliResult<String> {
    if arg.config == BUILTIN_CONFIG {
        Ok(REFERENCE_CONFIG.to_string())
    } else {
        std::fs::read_to_string(&arg.config).map_err(|e| format!("cannot read config `{}`: {e}", arg.config).into())
    }
}

pub fn load_experiment(arg: &ConfigArg) -> CliResult<Experiment> {
    if arg.config == BUILTIN_CONFIG {
        return Ok(reference_experiment());
    }
    Ok(parse_experiment(&config_text(arg)?)?)
}

fn fmt_row(xs: &[f64]) -> String {
    let cells: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

fn fmt_fit(fit: &Fit) -> String {
    match fit {
        Fit::Ok(r) => format!(
            "slope {:.4}, intercept {:.4}, R^2 {:.4}, n {}",
            r.slope, r.intercept, r.r_squared, r.points
        ),
        Fit::Degenerate { reason } => format!("degenerate ({reason})"),
        Fit::InsufficientData { points } => format!("insufficient data ({points} points)"),
    }
}

/// Runs one command, writing human-readable output to `out`. Returns the
/// process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<i32> {
    match cli.command {
        Command::Validate(config) => {
            let game = validate_config(&config_text(&config)?)?;
            let exp = load_experiment(&config)?;
            writeln!(
                out,
                "ok: {} routes, {} states, degree {}, {} sessions x {} rounds",
                game.n_routes(),
                game.n_states(),
                game.degree(),
                exp.protocol.sessions,
                exp.protocol.rounds
            )?;
        }
        Command::CheckObedience { config, tol } => {
            let exp = load_experiment(&config)?;
            let report = check_obedience(&exp.game, &exp.policy, tol)?;
            for (i, j, slack) in report.pairs() {
                writeln!(out, "slack[{i}][{j}] = {slack:.6}")?;
            }
            writeln!(out, "min slack {:.6}, obedient: {}", report.min_slack(), report.obedient)?;
            writeln!(out, "social cost {:.6}", social_cost(&exp.game, &exp.policy)?)?;
            if !report.obedient {
                return Ok(1);
            }
        }
        Command::Wardrop { config, tol } => {
            let exp = load_experiment(&config)?;
            let w = bayes_wardrop(&exp.game, tol)?;
            let cost = social_cost(&exp.game, &exp.policy)?;
            writeln!(out, "flow {}", fmt_row(&w.flow))?;
            writeln!(out, "expected cost {:.6}", w.expected_cost)?;
            writeln!(out, "kkt residual {:.3e} after {} iterations", w.kkt_residual, w.iterations)?;
            writeln!(out, "policy cost {cost:.6}, ratio {:.4}", cost / w.expected_cost)?;
        }
        Command::Design {
            config,
            seed,
            restarts,
            out: path,
        } => {
            let exp = load_experiment(&config)?;
            let opts = DesignOptions {
                restarts,
                seed,
                ..DesignOptions::default()
            };
            let result = design_signal(&exp.game, &opts)?;
            for (w, row) in result.policy.rows().iter().enumerate() {
                writeln!(out, "{}: {}", exp.game.states()[w], fmt_row(row))?;
            }
            writeln!(
                out,
                "cost {:.6}, min slack {:.3e}, configured policy cost {:.6}",
                result.cost,
                result.obedience_report.min_slack(),
                social_cost(&exp.game, &exp.policy)?
            )?;
            if let Some(path) = path {
                std::fs::write(&path, serde_json::to_vec_pretty(&result)?)?;
                writeln!(out, "wrote {}", path.display())?;
            }
        }
        Command::Simulate {
            config,
            rounds,
            seed,
            m1,
            m_max,
            window,
            out: path,
        } => {
            let exp = load_experiment(&config)?;
            let m_max = m_max.unwrap_or_else(|| exp.m_max());
            let m1 = m1.unwrap_or(exp.dynamics.m1);
            let traj = simulate_sampled(
                &exp.game,
                &exp.policy,
                &exp.protocol.initial_defection,
                m1,
                m_max,
                rounds,
                seed,
            )?;
            let window = window.min(rounds).max(1);
            if let Some(path) = path {
                let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
                traj.write_jsonl(file)?;
                writeln!(out, "wrote {}", path.display())?;
            }
            let last = traj.records.last().expect("rounds > 0");
            writeln!(out, "rounds {rounds}, seed {seed}, m1 {m1}, m_max {m_max}")?;
            writeln!(out, "final theta {:.6}, final m {:.6}", last.theta, last.m_next)?;
            writeln!(out, "mean theta over last {window} rounds {:.6}", traj.tail_mean_theta(window))?;
            if traj.clamped_rounds > 0 {
                writeln!(out, "theta clamped in {} rounds", traj.clamped_rounds)?;
            }
        }
        Command::RunBatch {
            config,
            sessions,
            rounds,
            seed,
            out: dir,
        } => {
            let mut exp = load_experiment(&config)?;
            if let Some(r) = rounds {
                exp = exp.with_rounds(r)?;
            }
            let sessions = sessions.unwrap_or(exp.protocol.sessions);
            let protocol = Protocol::from_experiment(&exp)?;
            let mut lineage = protocol.new_lineage();
            let logs = run_batch(&protocol, &mut lineage, &exp.agents, sessions, seed, dir.as_deref())?;
            let rounds_total: usize = logs.iter().map(|l| l.records.len()).sum();
            let follows: usize = logs.iter().map(|l| l.follow_count()).sum();
            let terminal: Vec<f64> = logs
                .iter()
                .map(|l| l.records.last().map_or(0.0, |r| r.rating_displayed))
                .collect();
            writeln!(out, "{sessions} sessions x {} rounds, seed {seed}", exp.protocol.rounds)?;
            writeln!(
                out,
                "terminal displayed rating: last {:.1}, mean {:.3}, min {:.1}",
                terminal.last().copied().unwrap_or(0.0),
                terminal.iter().sum::<f64>() / terminal.len().max(1) as f64,
                terminal.iter().copied().fold(f64::INFINITY, f64::min)
            )?;
            writeln!(out, "cumulative follow frequency {:.4}", follows as f64 / rounds_total.max(1) as f64)?;
            for row in lineage.p_hat().rows() {
                writeln!(out, "p_hat {}", fmt_row(row))?;
            }
            if let Some(dir) = dir {
                writeln!(out, "wrote {}", dir.display())?;
            }
        }
        Command::Serve {
            config,
            port,
            host,
            seed,
            out: dir,
        } => {
            let exp = load_experiment(&config)?;
            let protocol = Protocol::from_experiment(&exp)?;
            std::fs::create_dir_all(&dir)?;
            let state = api::AppState::new(protocol, dir, seed);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(state, SocketAddr::new(host, port)))?;
        }
        Command::Analyze {
            config,
            logs,
            filters,
            surveys,
            out: dir,
        } => {
            let exp = load_experiment(&config)?;
            let report = report_for(&exp, &logs, &filters.filters())?;
            write_report(out, &report)?;
            for h in analysis::h4_sweep(&report.regret_points, &[0.0, 2.6, 4.0], &[2.25, 4.0, 4.6]) {
                writeln!(out, "  H4 {}: {}", h.label, fmt_fit(&h.fit))?;
            }
            if let Some(dir) = surveys {
                let strategies: BTreeMap<_, _> =
                    read_surveys(&dir)?.into_iter().map(|r| (r.s, r.answers.strategy)).collect();
                for g in analysis::subgroup_r_squared(&report.regret_points, &strategies, filters.min_rating) {
                    let r2 = g.mean_r_squared.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                    writeln!(
                        out,
                        "strategy ({}): {} participants, {} fitted, mean R^2 {r2}",
                        g.strategy.label(),
                        g.participants,
                        g.fitted
                    )?;
                }
            }
            if let Some(dir) = dir {
                let paths = analysis::write_exports(&report, &dir)?;
                writeln!(out, "wrote {}", paths.summary.display())?;
            }
        }
        Command::Export {
            config,
            logs,
            filters,
            out: dir,
        } => {
            let exp = load_experiment(&config)?;
            let report = report_for(&exp, &logs, &filters.filters())?;
            let paths = analysis::write_exports(&report, &dir)?;
            for p in [&paths.h1, &paths.h2, &paths.h3, &paths.h4, &paths.summary] {
                writeln!(out, "wrote {}", p.display())?;
            }
        }
    }
    Ok(0)
}

fn report_for(exp: &Experiment, logs: &Path, filters: &Filters) -> CliResult<analysis::HypothesisReport> {
    let logs = read_session_logs(logs)?;
    Ok(hypothesis_report(
        &logs,
        &exp.protocol.initial_defection,
        exp.protocol.r_max,
        filters,
    )?)
}

fn write_report(out: &mut dyn Write, report: &analysis::HypothesisReport) -> CliResult<()> {
    writeln!(out, "{} participants, {} rounds", report.participants, report.rounds)?;
    let band = report
        .filters
        .band
        .map_or("none".to_string(), |(lo, hi)| format!("[{lo}, {hi}]"));
    writeln!(out, "H1 follow frequency vs rating (band {band}): {}", fmt_fit(&report.h1.fit))?;
    for row in &report.h1.table {
        writeln!(out, "  {:.1}: {}/{} = {:.3}", row.rating, row.follows, row.count, row.frequency)?;
    }
    if let Some(last) = report.h2.last() {
        writeln!(
            out,
            "H2 last participant: terminal rating {:.1}, cumulative follow frequency {:.4}",
            last.terminal_rating, last.cumulative_follow_frequency
        )?;
    }
    if let (Some(first), Some(last)) = (report.h3.series.first(), report.h3.series.last()) {
        let names: Vec<String> = report.h3.pairs.iter().map(|(i, j)| format!("p[{i}][{j}]")).collect();
        writeln!(out, "H3 {}: first {} last {}", names.join(" "), fmt_row(first), fmt_row(last))?;
    }
    writeln!(out, "H4 {}: {}", report.h4.label, fmt_fit(&report.h4.fit))?;
    Ok(())
}

impl Default for FilterArgs {
    fn default() -> Self {
        Self {
            band: Band(Some(DEFAULT_BAND)),
            min_rating: analysis::DEFAULT_MIN_RATING,
            min_regret: analysis::DEFAULT_MIN_REGRET,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn band_parsing() {
        assert_eq!(parse_band("2.6,3.9").unwrap(), Band(Some((2.6, 3.9))));
        assert_eq!(parse_band("none").unwrap(), Band(None));
        assert!(parse_band("4,3").is_err());
        assert!(parse_band("x").is_err());
        assert_eq!(FilterArgs::default().filters(), Filters::default());
    }
}
