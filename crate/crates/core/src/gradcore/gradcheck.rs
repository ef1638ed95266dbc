use crate::error::Result;

use super::graph::{Graph, Var};
use super::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backprop gradients against central differences for every
/// component of every parameter.
///
/// `build` must be deterministic: it is re-run on perturbed copies of
/// `params`.
pub fn grad_check<F>(params: &ParamStore, delta: f64, tol: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut grads = Gradients::zeros_like(params);
    {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss, &mut grads)?;
    }

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut worst = (0.0, 0, 0.0, 0.0);
        for k in 0..params.get(id).numel() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + delta;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - delta;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * delta);
            let analytic = grads.get(id)[k];
            let err = relative_error(analytic, numeric);
            if err > worst.0 || k == 0 {
                worst = (err, k, analytic, numeric);
            }
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport { tol, params: report })
}
