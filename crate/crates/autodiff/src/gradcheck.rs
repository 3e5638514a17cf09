//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of every backward rule it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (label, element, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, k: usize, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = Some((label.to_string(), k, a, n));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks d(loss)/d(inputs) for a function of plain leaf tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            report.record(&format!("input{i}"), k, analytic.data()[k], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(params) for the coordinates in `coords`
/// (every coordinate of every parameter when `None`).
pub fn check_params<F>(
    store: &ParamStore<f64>,
    coords: Option<&[(ParamId, usize)]>,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s, f64>, &'s ParamStore<f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss)?
    };
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .flat_map(|(id, p)| (0..p.value.numel()).map(move |k| (id, k)))
                .collect();
            &all
        }
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &(id, k) in coords {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[k]);
        let orig = store.get(id).data()[k];
        let mut eval = |delta: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[k] = orig + delta;
            let mut g = Graph::inference();
            let loss = f(&mut g, &work)?;
            Ok(g.value(loss).item())
        };
        let up = eval(step)?;
        let down = eval(-step)?;
        work.get_mut(id).data_mut()[k] = orig;
        report.record(store.name(id), k, analytic, (up - down) / (2.0 * step));
    }
    Ok(report)
}
