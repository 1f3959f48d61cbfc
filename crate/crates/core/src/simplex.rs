//! Probability-simplex helpers shared by the solvers.

/// Tolerance for "sums to one" checks on ingested probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Euclidean projection onto `{x >= 0, sum x = 1}` (sort-and-threshold).
pub fn project(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (idx, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (idx + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// True when every entry is nonnegative and the total is within `tol` of one.
pub fn is_on_simplex(v: &[f64], tol: f64) -> bool {
    !v.is_empty()
        && v.iter().all(|x| x.is_finite() && *x >= -tol)
        && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Rescales a nonnegative vector to sum to exactly one (up to rounding).
pub fn renormalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        for x in v.iter_mut() {
            *x = x.max(0.0) / total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_fixes_simplex_points() {
        let p = project(&[0.2, 0.3, 0.5]);
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_of_far_point_is_vertex() {
        assert_eq!(project(&[10.0, 0.0, -3.0]), vec![1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let p = project(&v);
            prop_assert!(is_on_simplex(&p, 1e-12));
        }

        // Projection is the closest simplex point: no random simplex point is nearer.
        #[test]
        fn projection_is_nearest(v in prop::collection::vec(-2.0f64..2.0, 3),
                                 w in prop::collection::vec(0.0f64..1.0, 3)) {
            let p = project(&v);
            let mut q = w.clone();
            let s: f64 = q.iter().sum();
            prop_assume!(s > 1e-6);
            q.iter_mut().for_each(|x| *x /= s);
            let d = |a: &[f64]| a.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            prop_assert!(d(&p) <= d(&q) + 1e-12);
        }
    }
}
