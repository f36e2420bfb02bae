//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Below this magnitude an entry is compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst elementwise relative error per tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub entries_checked: usize,
    /// `(tensor, index, analytic, numeric)` at the worst relative error.
    pub worst_entry: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_tensor.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` gradients against `(L(θ+h) − L(θ−h)) / 2h` for every
/// entry of every tensor named in `analytic`. `loss` must be a pure function
/// of the store. Entries missing from `analytic` are treated as zero, which
/// also catches parameters the tape failed to reach.
pub fn check(
    store: &ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut per_tensor = BTreeMap::new();
    let mut entries = 0;
    let mut worst_entry = None;
    let mut worst_overall = -1.0;
    for name in names {
        let len = work.expect(name)?.len();
        let zeros = work.expect(name)?.zeros_like();
        let grad = analytic.get(name).unwrap_or(&zeros);
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = relative_error(grad.data()[i], numeric);
            if e > worst_overall {
                worst_overall = e;
                worst_entry = Some((name.clone(), i, grad.data()[i], numeric));
            }
            worst = worst.max(e);
            entries += 1;
        }
        per_tensor.insert(name.clone(), worst);
    }
    Ok(GradCheckReport {
        per_tensor,
        entries_checked: entries,
        worst_entry,
    })
}
