//! The world model: parallel routes whose polynomial latencies depend on a
//! random network state, signal policies, defection matrices, and the
//! obedience check for a policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{self, SIMPLEX_TOL};

/// Only full recommendation coverage is supported.
pub const RECOMMENDED_FRACTION: f64 = 1.0;

/// Routes, states, prior, and latency coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    n_routes: usize,
    states: Vec<String>,
    prior: Vec<f64>,
    /// `coeffs[d][state][route]`, minutes per unit-flow^d.
    coeffs: Vec<Vec<Vec<f64>>>,
}

impl GameConfig {
    /// Builds a validated config. The prior is renormalized to sum to one.
    pub fn new(states: Vec<String>, prior: Vec<f64>, coeffs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("states", "at least one state is required"));
        }
        if coeffs.len() < 2 {
            return Err(Error::invalid(
                "coeffs",
                "need a constant term and at least one flow-dependent degree",
            ));
        }
        let n_states = states.len();
        let n_routes = coeffs[0].first().map_or(0, Vec::len);
        if n_routes == 0 {
            return Err(Error::invalid("coeffs", "at least one route is required"));
        }
        for (d, table) in coeffs.iter().enumerate() {
            if table.len() != n_states {
                return Err(Error::invalid(
                    format!("coeffs[{d}]"),
                    format!("expected {n_states} state rows, got {}", table.len()),
                ));
            }
            for (w, row) in table.iter().enumerate() {
                if row.len() != n_routes {
                    return Err(Error::invalid(
                        format!("coeffs[{d}][{w}]"),
                        format!("expected {n_routes} routes, got {}", row.len()),
                    ));
                }
                if let Some(bad) = row.iter().find(|a| !a.is_finite() || **a < 0.0) {
                    return Err(Error::invalid(
                        format!("coeffs[{d}][{w}]"),
                        format!("coefficients must be finite and nonnegative, found {bad}"),
                    ));
                }
            }
        }
        for w in 0..n_states {
            for i in 0..n_routes {
                if !coeffs[1..].iter().any(|table| table[w][i] > 0.0) {
                    return Err(Error::invalid(
                        "coeffs",
                        format!(
                            "latency of route {i} in state {w} is not strictly increasing \
                             (all flow-dependent coefficients are zero)"
                        ),
                    ));
                }
            }
        }

        if prior.len() != n_states {
            return Err(Error::invalid(
                "prior",
                format!("expected {n_states} entries, got {}", prior.len()),
            ));
        }
        if let Some(bad) = prior.iter().find(|p| !p.is_finite() || **p <= 0.0) {
            return Err(Error::invalid(
                "prior",
                format!("entries must be strictly positive, found {bad}"),
            ));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("prior", format!("entries sum to {total}, not 1")));
        }
        let mut prior = prior;
        simplex::renormalize(&mut prior);

        Ok(Self {
            n_routes,
            states,
            prior,
            coeffs,
        })
    }

    pub fn n_routes(&self) -> usize {
        self.n_routes
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Highest polynomial degree `D`.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Vec<Vec<f64>>] {
        &self.coeffs
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state < self.n_states() {
            Ok(())
        } else {
            Err(Error::UnknownState(state))
        }
    }

    /// Latency of one route at a given flow. Callers guarantee valid indices.
    pub(crate) fn latency(&self, state: usize, route: usize, flow: f64) -> f64 {
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, table| acc * flow + table[state][route])
    }

    /// Derivative of the route latency with respect to its own flow.
    pub(crate) fn latency_slope(&self, state: usize, route: usize, flow: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (d, table)| acc * flow + d as f64 * table[state][route])
    }

    /// Integral of the route latency over `[from, to]`, factored through
    /// `to - from` so small steps keep full relative precision.
    pub(crate) fn latency_integral_between(&self, state: usize, route: usize, from: f64, to: f64) -> f64 {
        // (to^{d+1} - from^{d+1}) = (to - from) * h_d with h_d = from * h_{d-1} + to^d.
        let width = to - from;
        let mut h = 0.0;
        let mut to_pow = 1.0;
        let mut total = 0.0;
        for (d, table) in self.coeffs.iter().enumerate() {
            h = from * h + to_pow;
            to_pow *= to;
            total += table[state][route] * width * h / (d + 1) as f64;
        }
        total
    }

    /// Per-route latencies in `state` under link flows `flow`.
    pub fn route_latencies(&self, state: usize, flow: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if flow.len() != self.n_routes {
            return Err(Error::Dimension {
                context: "route_latencies flow",
                expected: self.n_routes,
                actual: flow.len(),
            });
        }
        if let Some((route, &value)) = flow.iter().enumerate().find(|(_, f)| **f < 0.0) {
            return Err(Error::NegativeFlow { route, value });
        }
        Ok(flow
            .iter()
            .enumerate()
            .map(|(i, &f)| self.latency(state, i, f))
            .collect())
    }

    /// Sum over routes and degrees of the largest coefficient across states.
    /// Upper-bounds the positive part of any aggregated payoff difference.
    pub fn m_max_lower_bound(&self) -> f64 {
        (0..self.n_routes)
            .map(|i| {
                self.coeffs
                    .iter()
                    .map(|table| table.iter().map(|row| row[i]).fold(0.0, f64::max))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Per-state recommendation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SignalPolicy {
    rows: Vec<Vec<f64>>,
}

impl SignalPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("pi", "no state rows"));
        }
        let n = rows[0].len();
        let mut rows = rows;
        for (w, row) in rows.iter_mut().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(
                    format!("pi[{w}]"),
                    format!("expected {n} routes, got {}", row.len()),
                ));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!("pi[{w}]"), "entries must be nonnegative"));
            }
            if !simplex::is_on_simplex(row, SIMPLEX_TOL) {
                return Err(Error::invalid(
                    format!("pi[{w}]"),
                    format!("row sums to {}, not 1", row.iter().sum::<f64>()),
                ));
            }
            simplex::renormalize(row);
        }
        Ok(Self { rows })
    }

    /// Recommends `flow` in every state, independent of the realization.
    pub fn state_independent(flow: &[f64], n_states: usize) -> Result<Self> {
        Self::new(vec![flow.to_vec(); n_states])
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, state: usize) -> Result<&[f64]> {
        self.rows
            .get(state)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownState(state))
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn n_routes(&self) -> usize {
        self.rows[0].len()
    }

    fn check_against(&self, cfg: &GameConfig) -> Result<()> {
        if self.n_states() != cfg.n_states() {
            return Err(Error::Dimension {
                context: "policy states",
                expected: cfg.n_states(),
                actual: self.n_states(),
            });
        }
        if self.n_routes() != cfg.n_routes() {
            return Err(Error::Dimension {
                context: "policy routes",
                expected: cfg.n_routes(),
                actual: self.n_routes(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for SignalPolicy {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<SignalPolicy> for Vec<Vec<f64>> {
    fn from(p: SignalPolicy) -> Self {
        p.rows
    }
}

/// Row-stochastic, zero-diagonal rerouting matrix for agents who do not
/// follow their recommendation. An all-zero row means no defection from
/// that recommendation has been observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DefectionMatrix {
    rows: Vec<Vec<f64>>,
}

impl DefectionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("defection matrix", "empty"));
        }
        let mut rows = rows;
        for (i, row) in rows.iter_mut().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(
                    format!("defection[{i}]"),
                    format!("expected {n} columns, got {}", row.len()),
                ));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(
                    format!("defection[{i}]"),
                    "entries must be nonnegative",
                ));
            }
            if row[i].abs() > SIMPLEX_TOL {
                return Err(Error::invalid(
                    format!("defection[{i}][{i}]"),
                    "diagonal must be zero",
                ));
            }
            row[i] = 0.0;
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                continue;
            }
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(
                    format!("defection[{i}]"),
                    format!("row sums to {total}, expected 1 or an all-zero row"),
                ));
            }
            simplex::renormalize(row);
        }
        Ok(Self { rows })
    }

    /// Uniform rerouting over the other routes.
    pub fn uniform(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j || n < 2 { 0.0 } else { 1.0 / (n - 1) as f64 })
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn is_empty_row(&self, i: usize) -> bool {
        self.rows[i].iter().all(|p| *p == 0.0)
    }

    /// Pᵀ x, the destination distribution of defectors whose recommendations
    /// are distributed as `x`. Mass recommended onto an all-zero row stays put.
    pub fn reroute(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (j, &mass) in x.iter().enumerate() {
            if self.is_empty_row(j) {
                out[j] += mass;
            } else {
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot += self.rows[j][i] * mass;
                }
            }
        }
        out
    }
}

impl TryFrom<Vec<Vec<f64>>> for DefectionMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<DefectionMatrix> for Vec<Vec<f64>> {
    fn from(p: DefectionMatrix) -> Self {
        p.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObedienceReport {
    /// `slack[i][j]`: expected gain (minutes, prior-weighted) of obeying a
    /// recommendation of `i` rather than switching to `j`. Diagonal is zero.
    pub slack: Vec<Vec<f64>>,
    pub obedient: bool,
    pub tolerance: f64,
}

impl ObedienceReport {
    pub fn min_slack(&self) -> f64 {
        self.pairs().map(|(_, _, s)| s).fold(f64::INFINITY, f64::min)
    }

    /// Ordered pairs `(i, j, slack)` with `i != j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.slack.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(move |(j, _)| *j != i)
                .map(move |(j, &s)| (i, j, s))
        })
    }
}

/// Prior-expected total travel time when everyone follows `policy`.
pub fn social_cost(cfg: &GameConfig, policy: &SignalPolicy) -> Result<f64> {
    policy.check_against(cfg)?;
    Ok(social_cost_rows(cfg, policy.rows()))
}

pub(crate) fn social_cost_rows(cfg: &GameConfig, rows: &[Vec<f64>]) -> f64 {
    cfg.prior()
        .iter()
        .zip(rows)
        .enumerate()
        .map(|(w, (mu, row))| {
            mu * row
                .iter()
                .enumerate()
                .map(|(i, &p)| p * cfg.latency(w, i, p))
                .sum::<f64>()
        })
        .sum()
}

pub(crate) fn obedience_slacks(cfg: &GameConfig, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cfg.n_routes();
    let mut slack = vec![vec![0.0; n]; n];
    for (w, (mu, row)) in cfg.prior().iter().zip(rows).enumerate() {
        let lat: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &p)| cfg.latency(w, i, p))
            .collect();
        for i in 0..n {
            let weight = mu * row[i];
            if weight == 0.0 {
                continue;
            }
            for j in 0..n {
                if j != i {
                    slack[i][j] += weight * (lat[j] - lat[i]);
                }
            }
        }
    }
    slack
}

/// Evaluates every obedience inequality at the policy's own flows.
pub fn check_obedience(cfg: &GameConfig, policy: &SignalPolicy, tol: f64) -> Result<ObedienceReport> {
    if !(tol >= 0.0) {
        return Err(Error::invalid("tolerance", "must be nonnegative"));
    }
    policy.check_against(cfg)?;
    let slack = obedience_slacks(cfg, policy.rows());
    let mut report = ObedienceReport {
        slack,
        obedient: true,
        tolerance: tol,
    };
    report.obedient = report.n_pairs_ok(tol);
    Ok(report)
}

impl ObedienceReport {
    fn n_pairs_ok(&self, tol: f64) -> bool {
        self.pairs().all(|(_, _, s)| s >= -tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::reference_experiment;
    use proptest::prelude::*;

    fn single_state(coeffs: Vec<Vec<f64>>) -> GameConfig {
        GameConfig::new(
            vec!["only".into()],
            vec![1.0],
            coeffs.into_iter().map(|row| vec![row]).collect(),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn zero_flow_latency_is_constant_term() {
        let exp = reference_experiment();
        let l = exp.game.route_latencies(0, &[0.0, 0.0, 0.0]).unwrap();
        assert!(close(&l, &[5.0, 25.0, 4.0]));
    }

    #[test]
    fn affine_latency_evaluation() {
        let exp = reference_experiment();
        let l = exp.game.route_latencies(0, &[0.1, 0.0, 0.9]).unwrap();
        assert!(close(&l, &[5.4, 25.0, 4.9]));
        let l = exp.game.route_latencies(1, &[0.0, 1.0, 0.0]).unwrap();
        assert!(close(&l, &[20.0, 17.0, 24.0]));
    }

    #[test]
    fn latency_rejects_bad_inputs() {
        let cfg = reference_experiment().game;
        assert!(matches!(
            cfg.route_latencies(5, &[0.0; 3]),
            Err(Error::UnknownState(5))
        ));
        assert!(matches!(
            cfg.route_latencies(0, &[0.5, -0.1, 0.6]),
            Err(Error::NegativeFlow { route: 1, .. })
        ));
        assert!(matches!(
            cfg.route_latencies(0, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn higher_degree_helpers_match_direct_evaluation() {
        let cfg = single_state(vec![vec![1.0], vec![2.0], vec![0.5], vec![0.25]]);
        let f: f64 = 0.7;
        let direct = 1.0 + 2.0 * f + 0.5 * f * f + 0.25 * f.powi(3);
        assert!((cfg.latency(0, 0, f) - direct).abs() < 1e-14);
        let slope = 2.0 + 1.0 * f + 0.75 * f * f;
        assert!((cfg.latency_slope(0, 0, f) - slope).abs() < 1e-14);
        let antiderivative = |x: f64| x + x * x + 0.5 * x.powi(3) / 3.0 + 0.25 * x.powi(4) / 4.0;
        assert!((cfg.latency_integral_between(0, 0, 0.0, f) - antiderivative(f)).abs() < 1e-14);
        let g = 0.2;
        let between = antiderivative(f) - antiderivative(g);
        assert!((cfg.latency_integral_between(0, 0, g, f) - between).abs() < 1e-14);
        assert!((cfg.latency_integral_between(0, 0, f, g) + between).abs() < 1e-14);
    }

    #[test]
    fn non_interior_prior_rejected() {
        let coeffs = vec![vec![vec![1.0]; 3], vec![vec![1.0]; 3]];
        let err = GameConfig::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.5, 0.5, 0.0],
            coeffs,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid { ref field, .. } if field == "prior"));
    }

    #[test]
    fn flat_latency_rejected() {
        let err = GameConfig::new(
            vec!["a".into()],
            vec![1.0],
            vec![vec![vec![1.0, 2.0]], vec![vec![1.0, 0.0]]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("route 1"));
    }

    #[test]
    fn social_cost_small_cases() {
        let cfg = single_state(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let pi = SignalPolicy::new(vec![vec![0.5, 0.5]]).unwrap();
        assert!((social_cost(&cfg, &pi).unwrap() - 0.5).abs() < 1e-15);

        let cfg = single_state(vec![vec![3.0, 1.0], vec![2.0, 1.0]]);
        let pi = SignalPolicy::new(vec![vec![1.0, 0.0]]).unwrap();
        assert!((social_cost(&cfg, &pi).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn reference_policy_social_cost() {
        // Independent recomputation term by term: sum_w mu_w sum_i pi_i (a0 + a1 pi_i).
        let a0 = [[5., 25., 4.], [20., 15., 24.], [15., 20., 14.], [11., 15., 16.], [8., 10., 20.]];
        let a1 = [[4., 2., 1.], [1., 2., 3.], [2., 3., 4.], [3., 5., 2.], [5., 4., 5.]];
        let pi = [[0.1, 0., 0.9], [0., 1., 0.], [0.6, 0., 0.4], [0.9, 0.1, 0.], [0.6, 0.4, 0.]];
        let mu = [0.1, 0.2, 0.4, 0.05, 0.25];
        let mut oracle = 0.0;
        for w in 0..5 {
            for i in 0..3 {
                oracle += mu[w] * pi[w][i] * (a0[w][i] + a1[w][i] * pi[w][i]);
            }
        }
        let exp = reference_experiment();
        let cost = social_cost(&exp.game, &exp.policy).unwrap();
        assert!((cost - oracle).abs() < 1e-12);
        assert!((cost - REFERENCE_SOCIAL_COST).abs() < 1e-12);
    }

    /// Expected travel time under full obedience to the reference policy.
    const REFERENCE_SOCIAL_COST: f64 = 13.783;

    #[test]
    fn reference_policy_is_obedient() {
        let exp = reference_experiment();
        let report = check_obedience(&exp.game, &exp.policy, 1e-9).unwrap();
        assert!(report.obedient);
        assert_eq!(report.pairs().count(), 6);
        // Hand-evaluated closed-form sums.
        let expected = [
            (0, 1, 1.279),
            (0, 2, 1.3045),
            (1, 0, 0.531),
            (1, 2, 2.2425),
            (2, 0, 0.141),
            (2, 1, 2.513),
        ];
        for (i, j, s) in expected {
            assert!((report.slack[i][j] - s).abs() < 1e-9, "slack[{i}][{j}]");
        }
    }

    #[test]
    fn recommending_slow_route_is_not_obedient() {
        let cfg = single_state(vec![vec![1.0, 10.0], vec![1.0, 1.0]]);
        let pi = SignalPolicy::new(vec![vec![0.0, 1.0]]).unwrap();
        let report = check_obedience(&cfg, &pi, 1e-9).unwrap();
        assert!(!report.obedient);
        assert!((report.slack[1][0] - (-10.0)).abs() < 1e-12);
        assert_eq!(report.slack[0][1], 0.0);
    }

    #[test]
    fn never_recommended_route_has_zero_slack() {
        let cfg = single_state(vec![vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]]);
        let pi = SignalPolicy::new(vec![vec![0.6, 0.4, 0.0]]).unwrap();
        let report = check_obedience(&cfg, &pi, 0.0).unwrap();
        assert_eq!(report.slack[2], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_tolerance_rejected() {
        let exp = reference_experiment();
        assert!(check_obedience(&exp.game, &exp.policy, -1.0).is_err());
    }

    #[test]
    fn defection_matrix_validation() {
        assert!(DefectionMatrix::new(vec![vec![0.5, 0.5], vec![1.0, 0.0]]).is_err());
        assert!(DefectionMatrix::new(vec![vec![0.0, 0.7], vec![1.0, 0.0]]).is_err());
        let p = DefectionMatrix::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(p.is_empty_row(0));
        assert_eq!(p.reroute(&[0.3, 0.7]), vec![1.0, 0.0]);
    }

    #[test]
    fn m_max_bound_cases() {
        assert_eq!(reference_experiment().game.m_max_lower_bound(), 84.0);
        let cfg = single_state(vec![vec![3.0], vec![2.0]]);
        assert_eq!(cfg.m_max_lower_bound(), 5.0);
        let cfg = single_state(vec![vec![3.0, 4.0, 1.5], vec![1e-300, 1e-300, 1e-300]]);
        assert!((cfg.m_max_lower_bound() - 8.5).abs() < 1e-12);
    }

    fn simplex_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn latency_monotone_in_flow(w in 0usize..5, i in 0usize..3, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = reference_experiment().game;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut f_lo = vec![0.3; 3];
            let mut f_hi = f_lo.clone();
            f_lo[i] = lo;
            f_hi[i] = hi;
            let l_lo = cfg.route_latencies(w, &f_lo).unwrap();
            let l_hi = cfg.route_latencies(w, &f_hi).unwrap();
            prop_assert!(l_lo[i] <= l_hi[i]);
        }

        #[test]
        fn social_cost_invariant_to_state_relabeling(
            rows in prop::collection::vec(simplex_row(3), 5),
            perm_seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cfg = reference_experiment().game;
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted_cfg = GameConfig::new(
                perm.iter().map(|&w| cfg.states()[w].clone()).collect(),
                perm.iter().map(|&w| cfg.prior()[w]).collect(),
                cfg.coeffs().iter().map(|t| perm.iter().map(|&w| t[w].clone()).collect()).collect(),
            ).unwrap();
            let pi = SignalPolicy::new(rows.clone()).unwrap();
            let permuted_pi = SignalPolicy::new(perm.iter().map(|&w| rows[w].clone()).collect()).unwrap();
            let a = social_cost(&cfg, &pi).unwrap();
            let b = social_cost(&permuted_cfg, &permuted_pi).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn obedience_slacks_finite_for_any_policy(rows in prop::collection::vec(simplex_row(3), 5)) {
            let cfg = reference_experiment().game;
            let report = check_obedience(&cfg, &SignalPolicy::new(rows).unwrap(), 1e-9).unwrap();
            prop_assert!(report.pairs().all(|(_, _, s)| s.is_finite()));
            prop_assert_eq!(report.obedient, report.min_slack() >= -1e-9);
        }

        // With a single state the prior mass is forced to one, so slacks do not
        // depend on how the prior was written before renormalization.
        #[test]
        fn single_state_slacks_ignore_prior_scale(row in simplex_row(2), c in 0.5f64..3.0) {
            let cfg = single_state(vec![vec![c, 1.0], vec![1.0, 2.0]]);
            let pi = SignalPolicy::new(vec![row]).unwrap();
            let a = check_obedience(&cfg, &pi, 0.0).unwrap();
            let cfg2 = GameConfig::new(vec!["x".into()], vec![1.0 + 1e-12],
                cfg.coeffs().to_vec()).unwrap();
            let b = check_obedience(&cfg2, &pi, 0.0).unwrap();
            for (i, j, s) in a.pairs() {
                prop_assert!((s - b.slack[i][j]).abs() < 1e-12);
            }
        }
    }
}
