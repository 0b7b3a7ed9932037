//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked entries of `|a - fd| / (|a| + |fd| + 1e-12)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst entry.
    pub worst: String,
}

/// Compares backprop gradients of a scalar function against central
/// differences, for every parameter tensor and every differentiable input.
///
/// `loss` receives a fresh graph plus one `Var` per entry of `inputs` and
/// must return a scalar. Tensors with more than `max_entries` elements are
/// checked on a random subset of that many entries.
pub fn grad_check<F, R>(
    params: &mut ParamStore,
    inputs: &[Tensor],
    loss: F,
    eps: f64,
    max_entries: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let (param_grads, input_grads) = {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let pg: Vec<(ParamId, Tensor)> = params
            .ids()
            .map(|id| {
                let t = grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
                (id, t)
            })
            .collect();
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (pg, ig)
    };
    for (id, g) in &param_grads {
        g.ensure_finite(&format!("gradient of {}", params.name(*id)))?;
    }
    for g in &input_grads {
        g.ensure_finite("input gradient")?;
    }

    let eval = |params: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut record = |name: String, analytic: f64, fd: f64| {
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-12);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!("{name} (analytic {analytic:e}, numeric {fd:e})");
        }
    };

    for (id, analytic) in &param_grads {
        let n = analytic.len();
        for j in pick(n, max_entries, rng) {
            let orig = params.get(*id).data()[j];
            params.get_mut(*id).data_mut()[j] = orig + eps;
            let plus = eval(params, inputs);
            params.get_mut(*id).data_mut()[j] = orig - eps;
            let minus = eval(params, inputs);
            params.get_mut(*id).data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            record(format!("{}[{j}]", params.name(*id)), analytic.data()[j], fd);
        }
    }

    let mut perturbed = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        for j in pick(analytic.len(), max_entries, rng) {
            let orig = perturbed[i].data()[j];
            perturbed[i].data_mut()[j] = orig + eps;
            let plus = eval(params, &perturbed);
            perturbed[i].data_mut()[j] = orig - eps;
            let minus = eval(params, &perturbed);
            perturbed[i].data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            record(format!("input{i}[{j}]"), analytic.data()[j], fd);
        }
    }
    Ok(report)
}

fn pick<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}
