use super::{Gradients, Graph, ParamKey, Tensor};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged on absolute error instead of on the ratio of two round-offs.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index where `max_rel_error` occurred.
    pub worst: Option<(ParamKey, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `backward` against central finite differences on every trainable
/// entry. The graph must already have been evaluated; its cached inputs are
/// reused for the perturbed evaluations. Stop-gradient nodes keep their
/// unperturbed values, so the differences measure the same derivative that
/// `backward` defines.
pub fn grad_check(graph: &mut Graph, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = scalar_backward(graph)?;
    compare_gradients(graph, &analytic, tolerance)
}

/// Same as [`grad_check`] but against caller-supplied analytic gradients.
pub fn compare_gradients(
    graph: &mut Graph,
    analytic: &Gradients,
    tolerance: f64,
) -> Result<GradCheckReport> {
    ensure_scalar(graph)?;
    let inputs = graph.last_inputs().to_vec();
    graph.freeze_stops();
    let result = perturb_all(graph, analytic, &inputs, tolerance);
    graph.thaw_stops();
    let report = result?;
    // Restore the cache at the unperturbed point.
    graph.forward_eval(&inputs)?;
    Ok(report)
}

fn perturb_all(
    graph: &mut Graph,
    analytic: &Gradients,
    inputs: &[Tensor],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut keys = graph.param_keys();
    keys.sort();
    keys.dedup();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    for key in keys {
        let grad = analytic
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Usage(format!("no analytic gradient for {key:?}")))?;
        let len = grad.len();
        for idx in 0..len {
            let original = param_entry(graph, key, idx);
            set_param_entry(graph, key, idx, original + FD_STEP);
            let plus = eval_scalar(graph, inputs)?;
            set_param_entry(graph, key, idx, original - FD_STEP);
            let minus = eval_scalar(graph, inputs)?;
            set_param_entry(graph, key, idx, original);

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.as_slice()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((key, idx));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

fn ensure_scalar(graph: &Graph) -> Result<()> {
    let out = graph
        .output()
        .ok_or_else(|| Error::Usage("grad_check on an empty graph".into()))?;
    if graph.shape_of(out) != (1, 1) {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar output, got {:?}",
            graph.shape_of(out)
        )));
    }
    if !graph.is_evaluated() {
        return Err(Error::State("grad_check needs an evaluated graph".into()));
    }
    Ok(())
}

fn scalar_backward(graph: &Graph) -> Result<Gradients> {
    ensure_scalar(graph)?;
    graph.backward(&Tensor::scalar(1.0))
}

fn eval_scalar(graph: &mut Graph, inputs: &[Tensor]) -> Result<f64> {
    Ok(graph.forward_eval(inputs)?.get(0, 0))
}

fn param_entry(graph: &mut Graph, key: ParamKey, idx: usize) -> f64 {
    graph
        .param_value_mut(key)
        .expect("key listed by the graph")
        .as_slice()[idx]
}

fn set_param_entry(graph: &mut Graph, key: ParamKey, idx: usize, value: f64) {
    graph
        .param_value_mut(key)
        .expect("key listed by the graph")
        .as_mut_slice()[idx] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_graph_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input(3, 4);
        let w = g.param(ParamKey(0), Tensor::random_normal(4, 1, 1.0, &mut rng));
        let xw = g.matmul(x, w).unwrap();
        let ones = g.constant(Tensor::filled(1, 3, 1.0));
        g.matmul(ones, xw).unwrap();
        g.forward_eval(&[Tensor::random_normal(3, 4, 1.0, &mut rng)])
            .unwrap();
        let report = grad_check(&mut g, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let w = g.param(ParamKey(0), Tensor::random_normal(2, 2, 1.0, &mut rng));
        let h = g.tanh(w).unwrap();
        let p = g.softmax_rows(h).unwrap();
        g.masked_cross_entropy(p, vec![Some(0), None], 1.0).unwrap();
        g.forward_eval(&[]).unwrap();

        let mut grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        let mut bad = grads.get(ParamKey(0)).unwrap().clone();
        // Flip the sign of the softmax rule's contribution on one entry.
        bad.as_mut_slice()[0] *= -1.0;
        grads.insert(ParamKey(0), bad);
        let report = compare_gradients(&mut g, &grads, 1e-4).unwrap();
        assert!(!report.passed);

        assert!(grad_check(&mut g, 1e-4).unwrap().passed);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let mut g = Graph::new();
        g.param(ParamKey(0), Tensor::zeros(2, 2));
        g.forward_eval(&[]).unwrap();
        assert!(matches!(grad_check(&mut g, 1e-4), Err(Error::Usage(_))));
    }

    #[test]
    fn random_three_parameter_scalar_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut g = Graph::new();
            let a = g.param(ParamKey(0), Tensor::scalar(rng.gen_range(-1.0..1.0)));
            let b = g.param(ParamKey(1), Tensor::scalar(rng.gen_range(-1.0..1.0)));
            let c = g.param(ParamKey(2), Tensor::scalar(rng.gen_range(-1.0..1.0)));
            let ab = g.matmul(a, b).unwrap();
            let t = g.tanh(ab).unwrap();
            let s = g.add(t, c).unwrap();
            let cc = g.matmul(s, c).unwrap();
            g.tanh(cc).unwrap();
            g.forward_eval(&[]).unwrap();
            let report = grad_check(&mut g, 1e-4).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
