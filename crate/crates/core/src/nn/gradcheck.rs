//! Central-difference verification of analytic gradients.

use rand::prelude::*;

use crate::nn::params::{Gradients, ParameterStore};

/// One coordinate whose numeric and analytic gradients disagree.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare `analytic` against central differences of `eval` at the
/// current parameter values.
///
/// For each tensor, up to `coords_per_tensor` distinct coordinates are
/// sampled (all of them when the tensor is small). The relative error
/// uses `max(|analytic|, |numeric|, 1e-8)` as denominator so that
/// near-zero gradients compare absolutely. Parameters absent from
/// `analytic` are treated as all-zero gradient — the unused-parameter
/// case.
pub fn grad_check(
    store: &mut ParameterStore,
    mut eval: impl FnMut(&ParameterStore) -> f64,
    analytic: &Gradients,
    h: f64,
    tol: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.get(&name).value.len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, coords_per_tensor).into_vec()
        };
        for c in coords {
            let orig = store.get(&name).value[c];
            store.get_mut(&name).value[c] = orig + h;
            let plus = eval(store);
            store.get_mut(&name).value[c] = orig - h;
            let minus = eval(store);
            store.get_mut(&name).value[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let ana = analytic.get(&name).map_or(0.0, |g| g[c]);
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            let rel = (ana - numeric).abs() / denom;
            report.coords_checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if !rel.is_finite() || rel > tol {
                report.failures.push(GradCheckFailure {
                    name: name.clone(),
                    coord: c,
                    analytic: ana,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    #[test]
    fn quadratic_at_origin() {
        // loss = θᵀθ at θ=0: analytic and numeric both 0.
        let mut store = ParameterStore::new();
        store.insert_raw("theta", (1, 4), vec![0.0; 4]);
        let grads = {
            let mut tape = Tape::new();
            let th = tape.param(&store, "theta");
            let tht = tape.transpose(th);
            let sq = tape.matmul(th, tht);
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap()
        };
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let th = tape.param(s, "theta");
                let tht = tape.transpose(th);
                let sq = tape.matmul(th, tht);
                let loss = tape.sum_all(sq);
                tape.scalar(loss)
            },
            &grads,
            1e-4,
            1e-5,
            50,
            0,
        );
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn quadratic_away_from_origin() {
        // loss = θᵀθ: gradient 2θ, checked at a random point.
        let mut store = ParameterStore::new();
        store.insert_raw("theta", (1, 6), vec![0.3, -1.2, 0.7, 2.0, -0.1, 0.05]);
        let f = |s: &ParameterStore| {
            let mut tape = Tape::new();
            let th = tape.param(s, "theta");
            let tht = tape.transpose(th);
            let sq = tape.matmul(th, tht);
            let loss = tape.sum_all(sq);
            tape.scalar(loss)
        };
        let grads = {
            let mut tape = Tape::new();
            let th = tape.param(&store, "theta");
            let tht = tape.transpose(th);
            let sq = tape.matmul(th, tht);
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap()
        };
        for (i, &v) in store.get("theta").value.iter().enumerate() {
            assert!((grads.get("theta").unwrap()[i] - 2.0 * v).abs() < 1e-12);
        }
        let report = grad_check(&mut store, f, &grads, 1e-4, 1e-5, 50, 0);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut store = ParameterStore::new();
        store.insert_raw("theta", (1, 2), vec![1.0, 2.0]);
        let mut wrong = Gradients::default();
        wrong.insert("theta".into(), vec![0.0, 0.0]); // truth is 2θ
        let report = grad_check(
            &mut store,
            |s| s.get("theta").value.iter().map(|v| v * v).sum(),
            &wrong,
            1e-4,
            1e-5,
            50,
            0,
        );
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 2);
        assert_eq!(report.failures[0].name, "theta");
    }
}
