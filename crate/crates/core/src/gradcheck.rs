//! Finite-difference validation of tape gradients, always in f64.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// A loss the checker can rebuild at perturbed parameter values. The closure
/// binds the store itself and returns the scalar loss node.
pub trait LossFn {
    fn build(&self, g: &mut Graph<f64>, params: &ParamStore<f64>) -> Result<Var>;
}

impl<T> LossFn for T
where
    T: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    fn build(&self, g: &mut Graph<f64>, params: &ParamStore<f64>) -> Result<Var> {
        self(g, params)
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    /// Relative error of the directional derivative along one random
    /// projection of all parameters.
    pub projection_rel_error: f64,
    /// Per-tensor worst offenders, sorted worst first.
    pub worst: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst
            .first()
            .map(|w| w.rel_error)
            .unwrap_or(0.0)
            .max(self.projection_rel_error)
    }

    pub fn pass(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest derivative magnitude a central difference can resolve: the
/// roundoff of the loss evaluation divided by the step, with headroom.
fn fd_noise_floor(loss: f64, h: f64) -> f64 {
    10.0 * f64::EPSILON * loss.abs().max(1.0) / h
}

/// Compare tape gradients against central finite differences (step `h`).
///
/// One random full-parameter projection plus `coords_per_tensor` sampled
/// coordinates per tensor.
pub fn gradient_check(
    loss: &dyn LossFn,
    params: &ParamStore<f64>,
    tolerance: f64,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = loss.build(&mut g, p)?;
        let val = g.value(v).item();
        if !val.is_finite() {
            return Err(Error::NonFinite("gradient-check loss".into()));
        }
        Ok(val)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let loss_var = loss.build(&mut g, params)?;
    let loss_val = g.value(loss_var).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let grads = g.backward(loss_var);

    // Random projection over every parameter.
    let mut stream = Stream::new(seed, 0);
    let direction: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, _, t)| {
            Tensor {
                rows: t.rows,
                cols: t.cols,
                data: (0..t.len()).map(|_| stream.normal::<f64>()).collect(),
            }
        })
        .collect();
    let analytic_dir: f64 = params
        .iter()
        .map(|(id, _, _)| {
            grads
                .by_param
                .get(&id)
                .map(|gt| gt.data.iter().zip(&direction[id].data).map(|(a, b)| a * b).sum::<f64>())
                .unwrap_or(0.0)
        })
        .sum();
    let shift = |sign: f64| -> ParamStore<f64> {
        let mut p = params.cast::<f64>();
        for (id, _, _) in params.iter() {
            let t = p.get_mut(id);
            for (x, u) in t.data.iter_mut().zip(&direction[id].data) {
                *x += sign * h * u;
            }
        }
        p
    };
    let fd_dir = (eval(&shift(1.0))? - eval(&shift(-1.0))?) / (2.0 * h);
    let floor = fd_noise_floor(loss_val, h);
    let projection_rel_error = rel_error(analytic_dir, fd_dir, floor);

    // Per-tensor sampled coordinates.
    let mut worst = Vec::new();
    for (id, name, t) in params.iter() {
        let mut worst_here: Option<ParamCheck> = None;
        for _ in 0..coords_per_tensor.min(t.len()) {
            let idx = stream.below(t.len());
            let mut plus = params.cast::<f64>();
            plus.get_mut(id).data[idx] += h;
            let mut minus = params.cast::<f64>();
            minus.get_mut(id).data[idx] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = grads.by_param.get(&id).map(|gt| gt.data[idx]).unwrap_or(0.0);
            // Below the finite-difference noise floor nothing discriminates.
            if fd.abs().max(a.abs()) < floor {
                continue;
            }
            let e = rel_error(a, fd, floor);
            if worst_here.as_ref().map(|w| e > w.rel_error).unwrap_or(true) {
                worst_here = Some(ParamCheck { name: name.to_string(), rel_error: e, analytic: a, numeric: fd });
            }
        }
        if let Some(w) = worst_here {
            worst.push(w);
        }
    }
    worst.sort_by(|a, b| b.rel_error.partial_cmp(&a.rel_error).unwrap());

    Ok(GradCheckReport { loss: loss_val, projection_rel_error, worst, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_toy_loss_is_exact() {
        let mut params = ParamStore::new();
        params.insert_randn("p", 3, 4, 1.0, 42);
        let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
            let bind = p.bind(g);
            let v = bind.var(0);
            let sq = g.mul(v, v);
            Ok(g.sum_all(sq))
        };
        let report = gradient_check(&loss, &params, 1e-6, 1e-5, 4, 1).unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn rejects_non_finite_loss() {
        let mut params = ParamStore::new();
        params.insert_filled("p", 1, 1, -1.0f64);
        let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
            let bind = p.bind(g);
            Ok(g.ln(bind.var(0)))
        };
        assert!(matches!(
            gradient_check(&loss, &params, 1e-4, 1e-5, 1, 1),
            Err(Error::NonFinite(_))
        ));
    }
}
