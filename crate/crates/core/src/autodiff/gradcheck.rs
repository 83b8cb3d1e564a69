use rayon::prelude::*;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Per-parameter outcome of [`gradient_check`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a ReLU input crossed or sat at zero within
    /// the finite-difference step.
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Some ReLU input was exactly zero at the unperturbed point.
    pub relu_at_zero: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `forward` against central differences
/// for every entry of every parameter in `params`.
///
/// `forward` records a scalar loss on the given tape and must bind its
/// parameters through [`Tape::param`].
pub fn gradient_check<F>(forward: F, params: &ParamStore<f64>, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    let eval = |p: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, p)?;
        Ok((tape.value(loss).item(), tape.relu_pattern().0))
    };

    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    let (base_pattern, at_kink) = tape.relu_pattern();
    let grads = tape.backward(loss)?;

    let mut report = Vec::new();
    for (name, value) in params.iter() {
        let analytic = grads
            .params()
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("parameter '{name}' never bound by forward")))?;
        let results: Vec<Option<f64>> = (0..value.len())
            .into_par_iter()
            .map(|i| -> Result<Option<f64>> {
                let mut p = params.clone();
                let orig = value.data()[i];
                p.get_mut(name).expect("present").data_mut()[i] = orig + FD_STEP;
                let (lp, pp) = eval(&p)?;
                p.get_mut(name).expect("present").data_mut()[i] = orig - FD_STEP;
                let (lm, pm) = eval(&p)?;
                if pp != base_pattern || pm != base_pattern {
                    return Ok(None);
                }
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                Ok(Some(relative_error(analytic.data()[i], numeric)))
            })
            .collect::<Result<_>>()?;
        let checked: Vec<f64> = results.iter().flatten().copied().collect();
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_error: checked.iter().copied().fold(0.0, f64::max),
            checked: checked.len(),
            excluded: results.len() - checked.len(),
        });
    }
    Ok(GradCheckReport { params: report, tolerance, relu_at_zero: at_kink })
}
