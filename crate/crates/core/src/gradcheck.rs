//! Finite-difference verification of the backward pass.

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tape::{backward, Tape, ValueId};

/// Outcome of a finite-difference check, with the location of the worst
/// disagreement for diagnosis.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
}

/// Compare backward-pass gradients against central finite differences for
/// every element of every parameter in `store`.
///
/// `program` must be deterministic: it is re-run many times with perturbed
/// parameter values and always receives a fresh eval-mode tape. A program
/// that records a stochastic node (an active dropout draw) is rejected.
///
/// The perturbed losses are re-evaluated in double-double precision
/// (see [`Tape::eval_dd`]) so the central difference stays meaningful
/// even where the true gradient is tiny; plain f64 subtraction would
/// leave noise around 1e-11 absolute.
///
/// Returns the maximum relative error, where relative error between the
/// analytic gradient `a` and the finite difference `b` is
/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn grad_check<F>(store: &mut ParameterStore, epsilon: f64, program: F) -> Result<f64>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<ValueId>,
{
    grad_check_detailed(store, epsilon, program).map(|r| r.max_rel)
}

/// Same as [`grad_check`] but reporting where the worst mismatch sits.
pub fn grad_check_detailed<F>(
    store: &mut ParameterStore,
    epsilon: f64,
    mut program: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<ValueId>,
{
    if !(1e-8..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "grad_check: epsilon {epsilon} outside [1e-8, 1e-4]"
        )));
    }

    // Analytic gradients.
    let mut tape = Tape::eval();
    let loss = program(store, &mut tape)?;
    if tape.recorded_stochastic() {
        return Err(Error::invalid(
            "grad_check: program is stochastic (dropout active); disable dropout first",
        ));
    }
    if !tape.value(loss).is_scalar() {
        return Err(Error::invalid(format!(
            "grad_check: program output must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    backward(&tape, loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    drop(tape);

    let mut eval_at = |store: &ParameterStore| -> Result<Dd> {
        let mut tape = Tape::eval();
        let loss = program(store, &mut tape)?;
        tape.eval_dd(loss)
    };

    let n_params = store.len();
    let mut report = GradCheckReport::default();
    for pi in 0..n_params {
        let n = analytic[pi].len();
        for ei in 0..n {
            let orig = {
                let p = store.iter().nth(pi).unwrap().1;
                p.value.data()[ei]
            };
            set_elem(store, pi, ei, orig + epsilon);
            let f_plus = eval_at(store)?;
            set_elem(store, pi, ei, orig - epsilon);
            let f_minus = eval_at(store)?;
            set_elem(store, pi, ei, orig);

            let fd = ((f_plus - f_minus) / Dd::from(2.0 * epsilon)).to_f64();
            let a = analytic[pi][ei];
            let rel = (a - fd).abs() / f64::max(1e-8, a.abs() + fd.abs());
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_param = store.iter().nth(pi).unwrap().1.name.clone();
                report.worst_index = ei;
                report.analytic = a;
                report.finite_diff = fd;
            }
        }
    }
    Ok(report)
}

fn set_elem(store: &mut ParameterStore, pi: usize, ei: usize, v: f64) {
    let id = store.iter().nth(pi).unwrap().0;
    store.get_mut(id).value.data_mut()[ei] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_to_fd_order() {
        // f(x) = x^2 at x = 3: analytic 6 vs central difference 6.000...
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = store.add("x", vec![1], Init::Zero, &mut rng);
        store.get_mut(x).value.data_mut()[0] = 3.0;
        let max = grad_check(&mut store, 1e-5, |store, tape| {
            let xv = tape.param(store, x);
            let y = tape.mul(xv, xv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(max < 1e-9, "max relative error {max}");
    }

    #[test]
    fn zero_parameter_program_returns_zero() {
        let mut store = ParameterStore::new();
        let max = grad_check(&mut store, 1e-5, |_store, tape| {
            let c = tape.constant_vec(vec![2.0]);
            Ok(tape.sum(c))
        })
        .unwrap();
        assert_eq!(max, 0.0);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let mut store = ParameterStore::new();
        assert!(grad_check(&mut store, 1e-2, |_s, tape| {
            let c = tape.constant_vec(vec![1.0]);
            Ok(tape.sum(c))
        })
        .is_err());
    }

    #[test]
    fn resolves_gradient_elements_far_below_f64_noise() {
        // loss = w . x with x spanning fourteen orders of magnitude; the
        // gradient is x itself, element for element. A plain f64 central
        // difference cannot see the 1e-13 element; the high-precision
        // evaluation must.
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.add("w", vec![4], Init::Glorot, &mut rng);
        let max = grad_check(&mut store, 1e-5, |store, tape| {
            let wv = tape.param(store, w);
            let x = tape.constant_vec(vec![1.0, 1e-6, 1e-9, 1e-13]);
            let y = tape.mul(wv, x)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(max < 1e-9, "max relative error {max}");
    }

    #[test]
    fn composite_ops_pass_fd_check() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = store.add("w", vec![3, 4], Init::Glorot, &mut rng);
        let b = store.add("b", vec![3], Init::Glorot, &mut rng);
        let max = grad_check(&mut store, 1e-5, |store, tape| {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let x = tape.constant_vec(vec![0.2, -0.7, 1.3, 0.4]);
            let h = tape.matmul(wv, x)?;
            let h = tape.add(h, bv)?;
            let h = tape.tanh(h);
            let p = tape.row_softmax(h, None)?;
            let lse = tape.logsumexp(p)?;
            let ce = tape.ce_logits(h, 1)?;
            tape.weighted_sum(&[(lse, 0.5), (ce, 2.0)])
        })
        .unwrap();
        assert!(max < 1e-6, "max relative error {max}");
    }
}
