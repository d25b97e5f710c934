//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::numcore::{Bound, DecisionLog, Graph, ParamSet, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation `h` in `(f(p+h) − f(p−h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// on both sides compare as an absolute difference.
    pub abs_floor: f64,
    /// Upper bound on checked coordinates per tensor; evenly spaced when the
    /// tensor is larger. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Multiplier applied to analytic gradients before comparison. Only
    /// useful to confirm the check can fail.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-5,
            max_coords: None,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    /// `(coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Largest error among parameters whose name starts with `prefix`.
    pub fn max_error_with_prefix(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if numel > m => (0..m).map(|j| j * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares backward-pass gradients of `f` against central differences
/// for every tensor in `params`.
///
/// Discrete choices made through [`Graph::decide`] during the unperturbed
/// pass are replayed in the perturbed passes, so the comparison is made on
/// the smooth piece the analytic gradient describes.
pub fn grad_check<F>(params: &ParamSet, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut base = Graph::with_decisions(DecisionLog::recording());
    let bound = params.bind(&mut base);
    let loss_var = f(&mut base, &bound)?;
    let loss = base.scalar_value(loss_var);
    base.backward(loss_var)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| {
            base.grad(bound.var(id))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(id).numel()])
        })
        .collect();
    let log = base.take_decisions();
    drop(base);

    let mut work = params.clone();
    let mut eval = |work: &ParamSet| -> Result<f64> {
        let mut g = Graph::with_decisions(DecisionLog::replay(log.clone()));
        let b = work.bind(&mut g);
        let l = f(&mut g, &b)?;
        Ok(g.scalar_value(l))
    };

    let mut report = Vec::with_capacity(params.len());
    for (k, id) in params.ids().enumerate() {
        let numel = params.get(id).numel();
        let mut max_err: f64 = 0.0;
        let mut max_grad: f64 = 0.0;
        let mut worst = None;
        let picked = coords(numel, opts.max_coords);
        for &j in &picked {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k][j] * opts.analytic_scale;
            let err = relative_error(a, numeric, opts.abs_floor);
            if worst.is_none() || err > max_err {
                max_err = err;
                worst = Some((j, a, numeric));
            }
            max_grad = max_grad.max(a.abs());
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            checked: picked.len(),
            max_rel_error: max_err,
            max_abs_grad: max_grad,
            worst,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        loss,
        params: report,
    })
}
