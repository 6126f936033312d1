//! Central-difference gradient checking.
//!
//! [`grad_check`] compares caller-supplied analytic gradients against
//! central differences of a scalar function, element by element. The
//! relative error uses max(1, |analytic|, |numeric|) as the denominator so
//! tiny gradients compare absolutely instead of blowing up.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::params::{BoundParams, ParamSet};
use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare `analytic` gradients against central differences of `f` around
/// `params`, perturbing one element at a time by +-`eps`.
pub fn grad_check<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &BTreeMap<String, Array>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut work = clone_values(params);
    for name in &names {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("analytic gradient missing for `{name}`")))?;
        let base = params.value(name)?;
        if a.shape() != base.shape() {
            return Err(Error::Dim(format!(
                "analytic gradient shape mismatch for `{name}`"
            )));
        }
        for i in 0..base.len() {
            let orig = base.data()[i];
            work.value_mut(name)?.data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic_v = a.data()[i];
            let rel = (analytic_v - numeric).abs()
                / analytic_v.abs().max(numeric.abs()).max(1.0);
            report.elements_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper: `build` constructs the scalar loss on a fresh graph
/// from bound parameters. One forward+backward supplies the analytic
/// gradients; repeated value-only evaluations supply the differences.
pub fn grad_check_fn<B>(build: B, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = build(&mut graph, &bound)?;
    let grads = graph.backward(loss)?;
    let mut analytic = BTreeMap::new();
    for (name, value) in params.iter() {
        let g = match grads.get(bound.node(name)?) {
            Some(g) => g.clone(),
            None => Array::zeros(value.rows(), value.cols()),
        };
        analytic.insert(name.to_string(), g);
    }

    grad_check(
        |p| {
            let mut graph = Graph::new();
            let bound = p.bind(&mut graph);
            let loss = build(&mut graph, &bound)?;
            Ok(graph.value(loss).as_scalar())
        },
        params,
        &analytic,
        eps,
    )
}

fn clone_values(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, value) in params.iter() {
        out.insert(name, value.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array::from_vec(1, 3, vec![0.5, -1.2, 2.0]));
        p.insert("b", Array::scalar(0.7));
        p
    }

    /// loss = sum(tanh(w * w)) + b^2 built on a graph.
    fn build_loss(g: &mut Graph, bound: &BoundParams) -> Result<NodeId> {
        let w = bound.node("w")?;
        let b = bound.node("b")?;
        let sq = g.mul(w, w)?;
        let t = g.tanh(sq);
        let s1 = g.reduce_sum(t);
        let bsq = g.mul(b, b)?;
        let s2 = g.reduce_sum(bsq);
        g.add(s1, s2)
    }

    #[test]
    fn correct_gradients_pass_at_1e6() {
        let params = quadratic_params();
        let report = grad_check_fn(build_loss, &params, 1e-5).unwrap();
        assert!(
            report.passes(1e-6),
            "max rel error {}",
            report.max_rel_error
        );
        assert_eq!(report.elements_checked, 4);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let params = quadratic_params();
        // Recompute the true analytic gradients, then corrupt one entry.
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let loss = build_loss(&mut graph, &bound).unwrap();
        let grads = graph.backward(loss).unwrap();
        let mut analytic = BTreeMap::new();
        for (name, _) in params.iter() {
            analytic.insert(
                name.to_string(),
                grads.get(bound.node(name).unwrap()).unwrap().clone(),
            );
        }
        analytic.get_mut("w").unwrap().data_mut()[1] *= 1.5;

        let report = grad_check(
            |p| {
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let loss = build_loss(&mut g, &b)?;
                Ok(g.value(loss).as_scalar())
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error > 1e-2,
            "corruption went unnoticed: {}",
            report.max_rel_error
        );
        assert_eq!(report.worst.unwrap().0, "w");
    }

    #[test]
    fn missing_analytic_entry_is_a_contract_error() {
        let params = quadratic_params();
        let analytic = BTreeMap::new();
        let err = grad_check(|_| Ok(0.0), &params, &analytic, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
