//! Central finite differences against the tape's reverse sweep.

use super::params::{BoundParams, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    /// `None` when the loss was non-finite at a perturbed point.
    pub numeric: Option<f64>,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    /// Entries where the perturbed loss could not be evaluated.
    pub non_finite: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `backward()` of `loss_fn` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every entry of every parameter.
///
/// `loss_fn` builds the scalar loss on the supplied tape from the bound
/// parameters. It must be deterministic.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamSet, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(crate::Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss_fn(&mut tape, &bound)?;
    let mut grads = tape.backward(out)?;
    let analytic = params.collect_gradients(&bound, &mut grads);

    let eval = |p: &ParamSet| -> Option<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let v = loss_fn(&mut t, &b).ok()?;
        let x = t.value(v).item();
        x.is_finite().then_some(x)
    };

    let mut probe = params.clone();
    let mut entries = Vec::new();
    let mut non_finite = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name)?.len();
        let grad = &analytic[&name];
        for index in 0..len {
            let orig = params.get(&name)?.data()[index];
            probe.get_mut(&name)?.data_mut()[index] = orig + h;
            let plus = eval(&probe);
            probe.get_mut(&name)?.data_mut()[index] = orig - h;
            let minus = eval(&probe);
            probe.get_mut(&name)?.data_mut()[index] = orig;

            let a = grad.data()[index];
            let (numeric, rel) = match (plus, minus) {
                (Some(p), Some(m)) => {
                    let n = (p - m) / (2.0 * h);
                    (Some(n), relative_error(a, n))
                }
                _ => {
                    non_finite.push((name.clone(), index));
                    (None, f64::INFINITY)
                }
            };
            if numeric.is_some() {
                max_rel_error = max_rel_error.max(rel);
            }
            entries.push(EntryCheck {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tol,
        non_finite,
    })
}
