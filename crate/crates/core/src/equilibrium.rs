//! Uninformed (Bayes Wardrop) equilibrium and the search for a
//! cost-minimizing obedient signal.
//!
//! The Wardrop flow minimizes the Beckmann potential of the prior-averaged
//! latencies over the simplex. Signal design is a nonconvex problem
//! (obedience constraints are bilinear in the policy), so [`design_signal`]
//! runs a seeded multi-start penalized projected-gradient search and keeps
//! the cheapest candidate that passes [`check_obedience`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    check_obedience, obedience_slacks, social_cost_rows, GameConfig, ObedienceReport, SignalPolicy,
};
use crate::simplex::{self, SIMPLEX_TOL};

/// Flow below this is treated as unused when measuring the KKT residual.
const USED_FLOW: f64 = 1e-12;
const WARDROP_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WardropSolution {
    pub flow: Vec<f64>,
    pub expected_cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Change in the Beckmann potential at each accepted iteration.
    pub decrements: Vec<f64>,
}

/// Prior-averaged latency of each route at flow `flow`.
pub fn expected_latency(cfg: &GameConfig, flow: &[f64]) -> Result<Vec<f64>> {
    if flow.len() != cfg.n_routes() {
        return Err(Error::Dimension {
            context: "expected_latency flow",
            expected: cfg.n_routes(),
            actual: flow.len(),
        });
    }
    if !simplex::is_on_simplex(flow, SIMPLEX_TOL) {
        return Err(Error::invalid("flow", "must lie on the probability simplex"));
    }
    Ok(expected_latency_unchecked(cfg, flow))
}

fn expected_latency_unchecked(cfg: &GameConfig, flow: &[f64]) -> Vec<f64> {
    (0..cfg.n_routes())
        .map(|i| {
            cfg.prior()
                .iter()
                .enumerate()
                .map(|(w, mu)| mu * cfg.latency(w, i, flow[i]))
                .sum()
        })
        .collect()
}

/// Beckmann potential of `to` minus that of `from`, with the latencies
/// shifted by `level`. The shift is exact on the simplex and cancels the
/// rounding drift of `sum(to) - sum(from)`.
fn beckmann_change(cfg: &GameConfig, from: &[f64], to: &[f64], level: f64) -> f64 {
    from.iter()
        .zip(to)
        .enumerate()
        .map(|(i, (&a, &b))| {
            cfg.prior()
                .iter()
                .enumerate()
                .map(|(w, mu)| mu * cfg.latency_integral_between(w, i, a, b))
                .sum::<f64>()
                - level * (b - a)
        })
        .sum()
}

fn kkt_residual(flow: &[f64], latency: &[f64]) -> f64 {
    let min = latency.iter().copied().fold(f64::INFINITY, f64::min);
    flow.iter()
        .zip(latency)
        .filter(|(f, _)| **f > USED_FLOW)
        .map(|(_, l)| l - min)
        .fold(0.0, f64::max)
}

/// Solves for the state-independent flow that equalizes prior-expected
/// latencies across used routes.
pub fn bayes_wardrop(cfg: &GameConfig, tol: f64) -> Result<WardropSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance", "must be positive"));
    }
    let n = cfg.n_routes();
    let mut flow = vec![1.0 / n as f64; n];
    let mut decrements = Vec::new();
    let mut step = 1.0;
    let mut best_residual = f64::INFINITY;

    for iteration in 0..WARDROP_MAX_ITERS {
        let grad = expected_latency_unchecked(cfg, &flow);
        let residual = kkt_residual(&flow, &grad);
        best_residual = best_residual.min(residual);
        if residual <= tol {
            let expected_cost = flow.iter().zip(&grad).map(|(f, l)| f * l).sum();
            return Ok(WardropSolution {
                flow,
                expected_cost,
                kkt_residual: residual,
                iterations: iteration,
                decrements,
            });
        }

        // Backtracking on the projected-gradient sufficient-decrease condition.
        let accepted = loop {
            let trial: Vec<f64> =
                simplex::project(&flow.iter().zip(&grad).map(|(f, g)| f - step * g).collect::<Vec<_>>());
            let delta: Vec<f64> = trial.iter().zip(&flow).map(|(a, b)| a - b).collect();
            let moved: f64 = delta.iter().map(|d| d * d).sum();
            if moved == 0.0 {
                break None;
            }
            let level = flow.iter().zip(&grad).map(|(f, g)| f * g).sum::<f64>();
            let change = beckmann_change(cfg, &flow, &trial, level);
            let model = grad.iter().zip(&delta).map(|(g, d)| (g - level) * d).sum::<f64>()
                + moved / (2.0 * step);
            if change <= model && change < 0.0 {
                break Some((trial, change));
            }
            step *= 0.5;
            if step < 1e-16 {
                break None;
            }
        };
        match accepted {
            Some((trial, change)) => {
                flow = trial;
                decrements.push(change);
                step *= 2.0;
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    best_residual,
                })
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: WARDROP_MAX_ITERS,
        best_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub restarts: usize,
    /// Initial step size of each projected-gradient phase.
    pub step: f64,
    pub feas_tol: f64,
    pub seed: u64,
    /// Iteration cap per penalty phase.
    pub max_iters: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            restarts: 32,
            step: 0.05,
            feas_tol: 1e-8,
            seed: 0,
            max_iters: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub policy: SignalPolicy,
    pub cost: f64,
    pub obedience_report: ObedienceReport,
    /// Iterations spent by the winning restart.
    pub iterations: usize,
    pub restarts: usize,
}

const PENALTY_SCHEDULE: [f64; 7] = [1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6];

struct Candidate {
    restart: usize,
    rows: Vec<Vec<f64>>,
    cost: f64,
    min_slack: f64,
    iterations: usize,
}

fn min_slack(cfg: &GameConfig, rows: &[Vec<f64>]) -> f64 {
    let slack = obedience_slacks(cfg, rows);
    let mut min = f64::INFINITY;
    for (i, row) in slack.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if i != j {
                min = min.min(*s);
            }
        }
    }
    min
}

fn penalized(cfg: &GameConfig, rows: &[Vec<f64>], rho: f64) -> f64 {
    let slack = obedience_slacks(cfg, rows);
    let violation: f64 = slack
        .iter()
        .flatten()
        .map(|s| (-s).max(0.0).powi(2))
        .sum();
    social_cost_rows(cfg, rows) + rho * violation
}

fn penalized_gradient(cfg: &GameConfig, rows: &[Vec<f64>], rho: f64) -> Vec<Vec<f64>> {
    let n = cfg.n_routes();
    let slack = obedience_slacks(cfg, rows);
    let mut grad = vec![vec![0.0; n]; rows.len()];
    for (w, (row, mu)) in rows.iter().zip(cfg.prior()).enumerate() {
        let lat: Vec<f64> = (0..n).map(|i| cfg.latency(w, i, row[i])).collect();
        let slope: Vec<f64> = (0..n).map(|i| cfg.latency_slope(w, i, row[i])).collect();
        for i in 0..n {
            grad[w][i] += mu * (lat[i] + row[i] * slope[i]);
        }
        for i in 0..n {
            for j in 0..n {
                if i == j || slack[i][j] >= 0.0 {
                    continue;
                }
                // d/dx of rho * s^2 for s < 0 is 2 rho s ds/dx.
                let weight = 2.0 * rho * slack[i][j];
                grad[w][i] += weight * mu * (lat[j] - lat[i] - row[i] * slope[i]);
                grad[w][j] += weight * mu * row[i] * slope[j];
            }
        }
    }
    grad
}

fn project_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| simplex::project(r)).collect()
}

fn descend(cfg: &GameConfig, rows: &mut Vec<Vec<f64>>, rho: f64, opts: &DesignOptions) -> usize {
    let mut step = opts.step;
    let mut value = penalized(cfg, rows, rho);
    for iteration in 0..opts.max_iters {
        let grad = penalized_gradient(cfg, rows, rho);
        let mut accepted = false;
        while step > 1e-14 {
            let trial = project_rows(
                &rows
                    .iter()
                    .zip(&grad)
                    .map(|(r, g)| r.iter().zip(g).map(|(x, d)| x - step * d).collect())
                    .collect::<Vec<Vec<f64>>>(),
            );
            let mut inner = 0.0;
            let mut moved = 0.0;
            for ((t, r), g) in trial.iter().zip(rows.iter()).zip(&grad) {
                for ((a, b), d) in t.iter().zip(r).zip(g) {
                    inner += d * (a - b);
                    moved += (a - b) * (a - b);
                }
            }
            if moved < 1e-30 {
                return iteration;
            }
            let trial_value = penalized(cfg, &trial, rho);
            if trial_value <= value + inner + moved / (2.0 * step) && trial_value < value {
                *rows = trial;
                value = trial_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return iteration;
        }
        step *= 2.0;
    }
    opts.max_iters
}

/// Moves `rows` toward a known obedient policy just far enough to satisfy
/// every obedience inequality at `feas_tol`.
fn polish(cfg: &GameConfig, rows: &[Vec<f64>], anchor: &[Vec<f64>], feas_tol: f64) -> Vec<Vec<f64>> {
    if min_slack(cfg, rows) >= -feas_tol || min_slack(cfg, anchor) < -feas_tol {
        return rows.to_vec();
    }
    let blend = |t: f64| -> Vec<Vec<f64>> {
        rows.iter()
            .zip(anchor)
            .map(|(r, a)| r.iter().zip(a).map(|(x, y)| (1.0 - t) * x + t * y).collect())
            .collect()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if min_slack(cfg, &blend(mid)) >= -feas_tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    blend(hi)
}

fn run_restart(
    cfg: &GameConfig,
    opts: &DesignOptions,
    anchor: Option<&[Vec<f64>]>,
    restart: usize,
) -> Candidate {
    let mut rng = ChaCha8Rng::seed_from_u64(
        opts.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let raw: Vec<Vec<f64>> = (0..cfg.n_states())
        .map(|_| (0..cfg.n_routes()).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut rows = project_rows(&raw);
    let mut iterations = 0;
    for rho in PENALTY_SCHEDULE {
        iterations += descend(cfg, &mut rows, rho, opts);
        if min_slack(cfg, &rows) >= -opts.feas_tol && rho >= PENALTY_SCHEDULE[1] {
            break;
        }
    }
    if let Some(anchor) = anchor {
        // Half the tolerance leaves room for the final renormalization.
        rows = polish(cfg, &rows, anchor, 0.5 * opts.feas_tol);
    }
    rows.iter_mut().for_each(|r| simplex::renormalize(r));
    Candidate {
        restart,
        cost: social_cost_rows(cfg, &rows),
        min_slack: min_slack(cfg, &rows),
        rows,
        iterations,
    }
}

/// Searches for the cheapest obedient signal policy.
pub fn design_signal(cfg: &GameConfig, opts: &DesignOptions) -> Result<DesignResult> {
    if opts.restarts == 0 {
        return Err(Error::invalid("restarts", "must be positive"));
    }
    if !(opts.step > 0.0) || !(opts.feas_tol >= 0.0) {
        return Err(Error::invalid("design options", "step must be positive, feas_tol nonnegative"));
    }
    // A state-independent recommendation of the Wardrop flow is obedient, so it
    // anchors the feasibility polish.
    let anchor = bayes_wardrop(cfg, 1e-12)
        .ok()
        .map(|sol| vec![sol.flow; cfg.n_states()]);

    let candidates: Vec<Candidate> = (0..opts.restarts)
        .into_par_iter()
        .map(|restart| run_restart(cfg, opts, anchor.as_deref(), restart))
        .collect();

    let best = candidates
        .iter()
        .filter(|c| c.min_slack >= -opts.feas_tol)
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.restart.cmp(&b.restart)));
    let Some(best) = best else {
        let most_feasible = candidates
            .iter()
            .max_by(|a, b| a.min_slack.total_cmp(&b.min_slack).then(b.restart.cmp(&a.restart)))
            .expect("at least one restart");
        return Err(Error::Infeasible {
            restarts: opts.restarts,
            min_slack: most_feasible.min_slack,
            candidate: most_feasible.rows.clone(),
        });
    };

    let policy = SignalPolicy::new(best.rows.clone())?;
    let obedience_report = check_obedience(cfg, &policy, opts.feas_tol)?;
    Ok(DesignResult {
        cost: social_cost_rows(cfg, policy.rows()),
        policy,
        obedience_report,
        iterations: best.iterations,
        restarts: opts.restarts,
    })
}
