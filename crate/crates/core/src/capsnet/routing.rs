//! Routing-by-agreement between primary capsules and class capsules.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How gradients treat the coupling coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoutingGradient {
    /// Differentiate through every unrolled routing iteration.
    #[default]
    Full,
    /// Agreement updates see detached predictions, so couplings act as
    /// constants during backpropagation.
    StopGradient,
}

/// Tape handles for one routing pass.
#[derive(Clone, Debug)]
pub struct RoutingVars {
    /// Logits `b` (`N_in x C`) used for the final couplings.
    pub logits: Var,
    /// Couplings `c` of the final iteration.
    pub couplings: Var,
    /// Pre-squash capsule inputs `s` (`C x D2`).
    pub inputs: Var,
    /// Capsule outputs `v` (`C x D2`).
    pub outputs: Var,
    /// Couplings of every iteration, oldest first.
    pub coupling_history: Vec<Var>,
}

/// Concrete values of a routing pass.
#[derive(Clone, Debug)]
pub struct RoutingState {
    pub logits: Tensor,
    pub couplings: Tensor,
    pub inputs: Tensor,
    pub outputs: Tensor,
    pub coupling_history: Vec<Tensor>,
}

impl RoutingState {
    pub fn from_tape(tape: &Tape<'_>, vars: &RoutingVars) -> Self {
        Self {
            logits: tape.value(vars.logits).clone(),
            couplings: tape.value(vars.couplings).clone(),
            inputs: tape.value(vars.inputs).clone(),
            outputs: tape.value(vars.outputs).clone(),
            coupling_history: vars.coupling_history.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Routes prediction vectors `û` (`N_in x C x D2`) to `C` output capsules.
///
/// Logits start at zero. Each iteration takes a softmax of the logits over
/// the class axis, forms `s_j = Σ_i c_ij û_j|i`, squashes it, and, except
/// after the last iteration, adds the agreement `û_j|i · v_j` to the logits.
pub fn route_predictions(
    tape: &mut Tape<'_>,
    u_hat: Var,
    iterations: usize,
    mode: RoutingGradient,
) -> Result<RoutingVars> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(u_hat).to_vec();
    let [n_in, classes, dim] = shape[..] else {
        return Err(Error::shape("routing", "û [N_in, C, D2]", format!("{shape:?}")));
    };
    let agreement_source = match mode {
        RoutingGradient::Full => u_hat,
        RoutingGradient::StopGradient => tape.detach(u_hat),
    };

    let mut logits = tape.constant(Tensor::zeros(&[n_in, classes]));
    let mut history = Vec::with_capacity(iterations);
    let mut last = None;
    for iter in 0..iterations {
        let c = tape.softmax(logits, 1)?;
        history.push(c);
        let c3 = tape.reshape(c, &[n_in, classes, 1])?;
        let cb = tape.broadcast_to(c3, &shape)?;
        let weighted = tape.mul(cb, u_hat)?;
        let s = tape.sum_axis(weighted, 0)?;
        let v = tape.squash(s);
        last = Some((logits, c, s, v));
        if iter + 1 < iterations {
            let v_agree = match mode {
                RoutingGradient::Full => v,
                RoutingGradient::StopGradient => tape.detach(v),
            };
            let v3 = tape.reshape(v_agree, &[1, classes, dim])?;
            let vb = tape.broadcast_to(v3, &shape)?;
            let dots = tape.mul(agreement_source, vb)?;
            let agreement = tape.sum_axis(dots, 2)?;
            logits = tape.add(logits, agreement)?;
        }
    }
    let (logits, couplings, inputs, outputs) = last.expect("iterations >= 1");
    Ok(RoutingVars {
        logits,
        couplings,
        inputs,
        outputs,
        coupling_history: history,
    })
}

/// Full routing step from primary capsule vectors `u` (`N_in x D1`) and
/// routing weights `W` (`N_in x C x D1 x D2`).
pub fn routing_forward(
    tape: &mut Tape<'_>,
    u: Var,
    w: Var,
    iterations: usize,
    mode: RoutingGradient,
) -> Result<RoutingVars> {
    let u_hat = tape.capsule_transform(u, w)?;
    route_predictions(tape, u_hat, iterations, mode)
}

/// Routing on plain tensors.
pub fn route(u: &Tensor, w: &Tensor, iterations: usize) -> Result<RoutingState> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let wv = tape.constant(w.clone());
    let vars = routing_forward(&mut tape, uv, wv, iterations, RoutingGradient::Full)?;
    Ok(RoutingState::from_tape(&tape, &vars))
}

/// Routing of precomputed predictions on plain tensors.
pub fn route_u_hat(u_hat: &Tensor, iterations: usize) -> Result<RoutingState> {
    let mut tape = Tape::new();
    let uh = tape.constant(u_hat.clone());
    let vars = route_predictions(&mut tape, uh, iterations, RoutingGradient::Full)?;
    Ok(RoutingState::from_tape(&tape, &vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::squash_vec;

    fn u_hat(n_in: usize, classes: usize, dim: usize, seed: u64) -> Tensor {
        let data = (0..n_in * classes * dim)
            .map(|i| ((i as f64 + 1.0) * 0.731 + seed as f64).sin() * 0.8)
            .collect();
        Tensor::new(&[n_in, classes, dim], data).unwrap()
    }

    #[test]
    fn first_iteration_couplings_are_uniform() {
        let st = route_u_hat(&u_hat(5, 4, 3, 1), 3).unwrap();
        for c in st.coupling_history[0].data() {
            assert_eq!(*c, 0.25);
        }
    }

    #[test]
    fn coupling_rows_sum_to_one() {
        let st = route_u_hat(&u_hat(7, 5, 4, 2), 4).unwrap();
        assert_eq!(st.coupling_history.len(), 4);
        for c in &st.coupling_history {
            for row in c.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_identical_predictions_single_class() {
        // c = 1, so s = û + û and v = squash(2û)
        let single = [0.3, -0.4, 0.5];
        let mut data = single.to_vec();
        data.extend_from_slice(&single);
        let uh = Tensor::new(&[2, 1, 3], data).unwrap();
        let doubled: Vec<f64> = single.iter().map(|x| 2.0 * x).collect();
        let expect = squash_vec(&doubled);
        for iters in 1..=4 {
            let st = route_u_hat(&uh, iters).unwrap();
            assert_eq!(st.outputs.data(), &expect[..]);
        }
    }

    #[test]
    fn agreement_raises_coupling_to_agreeing_class() {
        // Both inputs predict the same vector for class 0 and opposite ones
        // for class 1, so routing should shift couplings toward class 0.
        let uh = Tensor::new(
            &[2, 2, 2],
            vec![0.9, 0.0, 0.0, 0.9, 0.9, 0.0, 0.0, -0.9],
        )
        .unwrap();
        let st = route_u_hat(&uh, 3).unwrap();
        assert!(st.couplings.get(&[0, 0]) > 0.5);
        assert!(st.couplings.get(&[1, 0]) > 0.5);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(route_u_hat(&u_hat(2, 2, 2, 0), 0).is_err());
    }
}
