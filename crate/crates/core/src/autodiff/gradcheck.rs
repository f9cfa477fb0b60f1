//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{BackwardFault, Tape, Var};
use crate::error::{Error, Result};

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Number of (parameter, element) pairs to probe.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error >= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} samples, max relative error {:.3e} (tolerance {:.0e}): {}",
            self.entries.len(),
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for e in self.failures().take(10) {
            writeln!(
                f,
                "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_error
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn loss_value<M, F>(model: &M, loss_fn: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t M, &mut Tape<'t>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(model, &mut tape)?;
    tape.value(loss)
        .item()
        .ok_or_else(|| Error::shape("finite_diff_check", "scalar loss", format!("{:?}", tape.shape(loss))))
}

/// Compares backward-pass gradients against central differences on a random
/// sample of parameter elements.
///
/// Parameters are first picked uniformly, then an element within the chosen
/// tensor, so small tensors such as biases are probed as often as large ones.
pub fn finite_diff_check<M, F>(model: &mut M, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: HasParams,
    F: for<'t> Fn(&'t M, &mut Tape<'t>) -> Result<Var>,
{
    let analytic = {
        let m: &M = model;
        let mut tape = Tape::new().with_fault(opts.fault);
        let loss = loss_fn(m, &mut tape)?;
        tape.backward(loss)?.into_param_grads(m.params())
    };

    let store = model.params();
    let available = store.num_elements();
    let wanted = opts.samples.min(available);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks = BTreeSet::new();
    let mut order = Vec::with_capacity(wanted);
    while order.len() < wanted {
        let p = rng.random_range(0..store.len());
        let i = rng.random_range(0..store.value(store.ids().nth(p).unwrap()).len());
        if picks.insert((p, i)) {
            order.push((p, i));
        }
    }

    let mut entries = Vec::with_capacity(order.len());
    for (p, i) in order {
        let id = model.params().ids().nth(p).unwrap();
        let original = model.params().value(id).data()[i];
        model.params_mut().get_mut(id).value.data_mut()[i] = original + opts.step;
        let plus = loss_value(model, &loss_fn)?;
        model.params_mut().get_mut(id).value.data_mut()[i] = original - opts.step;
        let minus = loss_value(model, &loss_fn)?;
        model.params_mut().get_mut(id).value.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[p].data()[i];
        entries.push(GradCheckEntry {
            param: model.params().get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Quadratic {
        params: ParamStore,
    }

    impl HasParams for Quadratic {
        fn params(&self) -> &ParamStore {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.params
        }
    }

    fn quadratic_loss<'t>(m: &'t Quadratic, tape: &mut Tape<'t>) -> Result<Var> {
        let id = m.params.ids().next().unwrap();
        let w = tape.param(&m.params, id);
        let sq = tape.mul(w, w)?;
        Ok(tape.sum_all(sq))
    }

    #[test]
    fn exact_quadratic_gradient() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]));
        let mut model = Quadratic { params };
        let opts = GradCheckOptions {
            samples: 4,
            ..Default::default()
        };
        let report = finite_diff_check(&mut model, quadratic_loss, &opts).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert!(report.max_rel_error() < 1e-8, "{report}");
        // parameters restored
        assert_eq!(model.params.iter().next().unwrap().value.data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
