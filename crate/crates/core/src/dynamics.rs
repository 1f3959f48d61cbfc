//! Population regret dynamics under a fixed signal policy.
//!
//! Each round the realized state's recommendations are followed by a
//! `1 - theta` fraction of agents; the rest reroute according to the
//! defection matrix. The population's aggregated payoff difference is
//! averaged over rounds, and its positive part (scaled by `m_max`) sets
//! the next round's non-following fraction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{DefectionMatrix, GameConfig, SignalPolicy};

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}

/// `πᵀ (I − P) ℓ`: the recommendation's sub-optimality aggregated over the
/// population. Rows of `P` with no observed defection contribute nothing.
pub fn aggregate_payoff_diff(pi: &[f64], p: &DefectionMatrix, latency: &[f64]) -> Result<f64> {
    check_len("aggregate_payoff_diff pi", p.n(), pi.len())?;
    check_len("aggregate_payoff_diff latency", p.n(), latency.len())?;
    Ok(pi
        .iter()
        .enumerate()
        .filter(|(i, _)| !p.is_empty_row(*i))
        .map(|(i, &mass)| {
            let alternative: f64 = p.row(i).iter().zip(latency).map(|(q, l)| q * l).sum();
            mass * (latency[i] - alternative)
        })
        .sum())
}

/// Running average update `m(k+1) = k/(k+1) m(k) + u(k)/(k+1)`, for `k >= 1`.
pub fn step_m(m: f64, k: usize, u: f64) -> f64 {
    debug_assert!(k >= 1);
    let k = k as f64;
    k / (k + 1.0) * m + u / (k + 1.0)
}

/// Fraction of agents who do not follow: `max(m, 0) / m_max`, clamped to 1.
pub fn theta(m: f64, m_max: f64) -> Result<f64> {
    if !(m_max > 0.0) {
        return Err(Error::invalid("m_max", "must be positive"));
    }
    let value = m.max(0.0) / m_max;
    if value > 1.0 {
        log::warn!("regret {m} exceeds m_max {m_max}; clamping non-following fraction to 1");
        return Ok(1.0);
    }
    Ok(value)
}

/// Link flows when a `theta` fraction of each recommended group defects.
pub fn induced_flow(pi: &[f64], p: &DefectionMatrix, theta: f64) -> Result<Vec<f64>> {
    check_len("induced_flow pi", p.n(), pi.len())?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::OutOfRange {
            what: "theta",
            value: theta,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let rerouted = p.reroute(pi);
    Ok(pi
        .iter()
        .zip(&rerouted)
        .map(|(stay, moved)| (1.0 - theta) * stay + theta * moved)
        .collect())
}

pub fn m_max_lower_bound(cfg: &GameConfig) -> f64 {
    cfg.m_max_lower_bound()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub k: usize,
    pub state: usize,
    pub theta: f64,
    pub flows: Vec<f64>,
    pub travel_times: Vec<f64>,
    pub u: f64,
    /// Running average after this round, `m(k+1)`.
    pub m_next: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub m1: f64,
    pub m_max: f64,
    /// Seed of the state sequence, when it was sampled.
    pub seed: Option<u64>,
    /// Rounds in which `theta` had to be clamped to 1.
    pub clamped_rounds: usize,
    pub records: Vec<DynamicsRecord>,
}

impl Trajectory {
    /// Mean non-following fraction over the last `window` rounds.
    pub fn tail_mean_theta(&self, window: usize) -> f64 {
        let window = window.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        tail.iter().map(|r| r.theta).sum::<f64>() / tail.len() as f64
    }

    /// Writes one JSON object per round.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the closed-loop dynamics over `states`.
pub fn simulate_dynamics(
    cfg: &GameConfig,
    policy: &SignalPolicy,
    p: &DefectionMatrix,
    m1: f64,
    m_max: f64,
    states: &[usize],
) -> Result<Trajectory> {
    if states.is_empty() {
        return Err(Error::Empty("state sequence"));
    }
    check_len("simulate_dynamics defection matrix", cfg.n_routes(), p.n())?;
    check_len("simulate_dynamics policy states", cfg.n_states(), policy.n_states())?;
    check_len("simulate_dynamics policy routes", cfg.n_routes(), policy.n_routes())?;
    if !(m_max > 0.0) {
        return Err(Error::invalid("m_max", "must be positive"));
    }
    if !(m1.abs() <= m_max) {
        return Err(Error::OutOfRange {
            what: "m1",
            value: m1,
            lo: -m_max,
            hi: m_max,
        });
    }
    let bound = cfg.m_max_lower_bound();
    if m_max < bound {
        log::warn!("m_max {m_max} is below the coefficient bound {bound}; theta may saturate");
    }

    let mut m = m1;
    let mut clamped_rounds = 0;
    let mut records = Vec::with_capacity(states.len());
    for (idx, &state) in states.iter().enumerate() {
        let k = idx + 1;
        let pi = policy.row(state)?;
        if m > m_max {
            clamped_rounds += 1;
        }
        let th = theta(m, m_max)?;
        let flows = induced_flow(pi, p, th)?;
        let travel_times = cfg.route_latencies(state, &flows)?;
        let u = aggregate_payoff_diff(pi, p, &travel_times)?;
        m = step_m(m, k, u);
        records.push(DynamicsRecord {
            k,
            state,
            theta: th,
            flows,
            travel_times,
            u,
            m_next: m,
        });
    }
    Ok(Trajectory {
        m1,
        m_max,
        seed: None,
        clamped_rounds,
        records,
    })
}

/// [`simulate_dynamics`] over `rounds` i.i.d. states drawn from the prior.
pub fn simulate_sampled(
    cfg: &GameConfig,
    policy: &SignalPolicy,
    p: &DefectionMatrix,
    m1: f64,
    m_max: f64,
    rounds: usize,
    seed: u64,
) -> Result<Trajectory> {
    let states = crate::sampling::iid_states(cfg.prior(), rounds, seed)?;
    let mut traj = simulate_dynamics(cfg, policy, p, m1, m_max, &states)?;
    traj.seed = Some(seed);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::reference_experiment;
    use crate::game::check_obedience;
    use proptest::prelude::*;

    fn swap2() -> DefectionMatrix {
        DefectionMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn payoff_diff_two_routes() {
        let u = aggregate_payoff_diff(&[1.0, 0.0], &swap2(), &[10.0, 7.0]).unwrap();
        assert_eq!(u, 3.0);
    }

    #[test]
    fn payoff_diff_reference_matches_double_sum() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        let pi = [0.1, 0.0, 0.9];
        let l = [5.4, 25.0, 4.9];
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                oracle += (l[i] - l[j]) * p.get(i, j) * pi[i];
            }
        }
        let u = aggregate_payoff_diff(&pi, p, &l).unwrap();
        assert!((u - oracle).abs() < 1e-12);
        assert!((u - (-9.22)).abs() < 1e-12);
    }

    #[test]
    fn payoff_diff_dimension_mismatch() {
        assert!(aggregate_payoff_diff(&[1.0], &swap2(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn running_average_cases() {
        assert_eq!(step_m(0.0, 1, 3.0), 1.5);
        assert_eq!(step_m(2.5, 7, 2.5), 2.5);
        assert!((step_m(4.0, 99, 0.0) - 3.96).abs() < 1e-12);
    }

    #[test]
    fn theta_cases() {
        assert_eq!(theta(-2.0, 10.0).unwrap(), 0.0);
        assert_eq!(theta(84.0, 84.0).unwrap(), 1.0);
        assert_eq!(theta(42.0, 84.0).unwrap(), 0.5);
        assert_eq!(theta(100.0, 84.0).unwrap(), 1.0);
        assert!(theta(1.0, 0.0).is_err());
    }

    #[test]
    fn induced_flow_cases() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        let pi1 = exp.policy.row(0).unwrap();
        assert_eq!(induced_flow(pi1, p, 0.0).unwrap(), pi1.to_vec());

        let pi2 = exp.policy.row(1).unwrap();
        assert_eq!(induced_flow(pi2, p, 1.0).unwrap(), vec![0.0, 0.0, 1.0]);

        // Matrix oracle: f = pi + theta (P^T - I) pi.
        let f = induced_flow(pi1, p, 0.5).unwrap();
        let mut oracle = pi1.to_vec();
        for i in 0..3 {
            let pt: f64 = (0..3).map(|j| p.get(j, i) * pi1[j]).sum();
            oracle[i] += 0.5 * (pt - pi1[i]);
        }
        for (a, b) in f.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in f.iter().zip([0.275, 0.225, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(induced_flow(pi1, p, 1.5).is_err());
    }

    #[test]
    fn simulate_rejects_bad_inputs() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        assert!(matches!(
            simulate_dynamics(&exp.game, &exp.policy, p, 0.0, 84.0, &[]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            simulate_dynamics(&exp.game, &exp.policy, p, 0.0, 84.0, &[0, 9]),
            Err(Error::UnknownState(9))
        ));
        assert!(simulate_dynamics(&exp.game, &exp.policy, p, 100.0, 84.0, &[0]).is_err());
    }

    #[test]
    fn negative_start_keeps_everyone_following() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        let states = crate::sampling::iid_states(exp.game.prior(), 200, 3).unwrap();
        let traj = simulate_dynamics(&exp.game, &exp.policy, p, -84.0, 84.0, &states).unwrap();
        let mut m = -84.0;
        for rec in &traj.records {
            if m <= 0.0 {
                assert_eq!(rec.theta, 0.0);
                assert_eq!(rec.flows, exp.policy.row(rec.state).unwrap().to_vec());
            }
            m = rec.m_next;
        }
    }

    #[test]
    fn constant_latency_averages_toward_zero() {
        let cfg = GameConfig::new(
            vec!["a".into()],
            vec![1.0],
            vec![vec![vec![3.0, 3.0]], vec![vec![1e-12, 1e-12]]],
        )
        .unwrap();
        let pi = SignalPolicy::new(vec![vec![0.5, 0.5]]).unwrap();
        let traj = simulate_dynamics(&cfg, &pi, &swap2(), 2.0, 10.0, &[0; 50]).unwrap();
        for rec in &traj.records {
            assert!(rec.u.abs() < 1e-12);
            assert!((rec.m_next - 2.0 / (rec.k as f64 + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_dynamics_converge() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        for seed in [1, 2, 3] {
            let traj = simulate_sampled(&exp.game, &exp.policy, p, 84.0, 84.0, 100_000, seed).unwrap();
            assert!(traj.tail_mean_theta(10_000) < 0.05);
            assert_eq!(traj.clamped_rounds, 0);
        }
    }

    #[test]
    fn trajectory_replay_is_bit_identical() {
        let exp = reference_experiment();
        let p = &exp.protocol.initial_defection;
        let run = || {
            let traj = simulate_sampled(&exp.game, &exp.policy, p, 10.0, 84.0, 500, 42).unwrap();
            let mut buf = Vec::new();
            traj.write_jsonl(&mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let first: serde_json::Value =
            serde_json::from_slice(a.split(|b| *b == b'\n').next().unwrap()).unwrap();
        for key in ["k", "state", "flows", "travel_times"] {
            assert!(first.get(key).is_some());
        }
    }

    fn simplex_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    fn defection3() -> impl Strategy<Value = DefectionMatrix> {
        prop::collection::vec(0.0f64..1.0, 3).prop_map(|w| {
            DefectionMatrix::new(vec![
                vec![0.0, w[0], 1.0 - w[0]],
                vec![w[1], 0.0, 1.0 - w[1]],
                vec![w[2], 1.0 - w[2], 0.0],
            ])
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn induced_flow_on_simplex(pi in simplex_row(3), p in defection3(), th in 0.0f64..=1.0) {
            let f = induced_flow(&pi, &p, th).unwrap();
            prop_assert!(f.iter().all(|x| *x >= 0.0));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn payoff_diff_shift_invariant(pi in simplex_row(3), p in defection3(),
                                       l in prop::collection::vec(0.0f64..50.0, 3), c in -20.0f64..20.0) {
            let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
            let a = aggregate_payoff_diff(&pi, &p, &l).unwrap();
            let b = aggregate_payoff_diff(&pi, &p, &shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let flat = aggregate_payoff_diff(&pi, &p, &[c; 3]).unwrap();
            prop_assert!(flat.abs() < 1e-12);
        }

        // With everyone following, the prior expectation of u equals
        // -sum_ij P_ij slack_ij, so obedience forces it to be nonpositive.
        #[test]
        fn obedient_policy_has_nonpositive_expected_payoff_diff(
            a0 in prop::collection::vec(0.0f64..10.0, 4),
            a1 in prop::collection::vec(0.5f64..5.0, 4),
            rows in prop::collection::vec(simplex_row(2), 2),
            q in 0.1f64..0.9,
        ) {
            let cfg = GameConfig::new(
                vec!["a".into(), "b".into()],
                vec![q, 1.0 - q],
                vec![
                    vec![vec![a0[0], a0[1]], vec![a0[2], a0[3]]],
                    vec![vec![a1[0], a1[1]], vec![a1[2], a1[3]]],
                ],
            ).unwrap();
            let pi = SignalPolicy::new(rows).unwrap();
            let report = check_obedience(&cfg, &pi, 0.0).unwrap();
            let p = swap2();
            let mut expected_u = 0.0;
            for w in 0..2 {
                let row = pi.row(w).unwrap();
                let l = cfg.route_latencies(w, row).unwrap();
                expected_u += cfg.prior()[w] * aggregate_payoff_diff(row, &p, &l).unwrap();
            }
            let via_slacks = -(report.slack[0][1] + report.slack[1][0]);
            prop_assert!((expected_u - via_slacks).abs() < 1e-9);
            if report.pairs().all(|(_, _, s)| s > 0.0) {
                prop_assert!(expected_u <= 0.0);
            }
        }
    }
}
