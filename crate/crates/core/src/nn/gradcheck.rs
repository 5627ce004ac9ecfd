//! Central finite-difference verification of reverse-mode gradients.
//!
//! The finite-difference side only ever calls the forward pass, so it stays
//! independent of every backward rule it checks.

use super::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(location, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, loc: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((loc(), analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape("gradcheck", format!("loss shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks every coordinate of every input tensor of `f`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>], grad: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ti])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= h;
            let (gp, _, op) = eval(&plus, false)?;
            let (gm, _, om) = eval(&minus, false)?;
            let numeric = (scalar_of(&gp, op)? - scalar_of(&gm, om)?) / (2.0 * h);
            report.record(|| format!("input {ti}[{j}]"), analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Picks `per_tensor` random coordinates of every trainable parameter.
pub fn sample_coords(
    store: &ParameterStore<f64>,
    per_tensor: usize,
    rng: &mut RngStream,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        for _ in 0..per_tensor.min(p.value.numel()) {
            out.push((name.clone(), rng.below(p.value.numel())));
        }
    }
    out
}

/// Checks the listed parameter coordinates of a loss built by `f`.
pub fn check_params<F>(
    store: &ParameterStore<f64>,
    coords: &[(String, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?.into_params();
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (name, j) in coords {
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*j]);
        let orig = store
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?
            .value
            .data()[*j];
        let mut at = |v: f64| -> Result<f64> {
            work.get_mut(name).unwrap().value.data_mut()[*j] = v;
            let mut g = Graph::new();
            let out = f(&mut g, &work)?;
            scalar_of(&g, out)
        };
        let lp = at(orig + h)?;
        let lm = at(orig - h)?;
        work.get_mut(name).unwrap().value.data_mut()[*j] = orig;
        report.record(|| format!("{name}[{j}]"), analytic, (lp - lm) / (2.0 * h));
    }
    Ok(report)
}
