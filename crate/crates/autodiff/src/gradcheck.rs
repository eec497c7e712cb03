//! Finite-difference oracles for checking reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward function, so it shares no
//! code path with [`Tape::backward`].

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_oracle<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from reporting
/// spurious relative blow-ups.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    const FLOOR: f64 = 1e-6;
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub relative_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error <= tolerance
    }
}

/// Compares the reverse-mode gradient of a scalar function with central
/// differences. `build` records the function of its input on a fresh tape
/// and returns the scalar output.
pub fn check_gradient<F>(build: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = build(&mut tape, input)?;
    let g = tape.backward(out, &[input], false)?.get(input).expect("requested gradient");
    let analytic = tape.value(g).clone();
    let numeric = finite_difference_oracle(
        |probe| {
            let mut tape = Tape::new();
            let input = tape.constant(probe.clone());
            let out = build(&mut tape, input)?;
            tape.value(out).item()
        },
        x,
        h,
    )?;
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradCheck { analytic, numeric, relative_error })
}

/// Second-order check: differentiates the projected gradient
/// `<direction, df/dx>` with a second backward pass and compares it with
/// central differences of the first-order gradient.
pub fn check_second_order<F>(build: F, x: &Tensor, direction: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if direction.shape() != x.shape() {
        return Err(AutodiffError::Shape {
            op: "check_second_order",
            lhs: x.shape().to_vec(),
            rhs: direction.shape().to_vec(),
        });
    }
    let projected = |tape: &mut Tape, input: Var, create_graph: bool| -> Result<Var> {
        let out = build(tape, input)?;
        let g = tape.backward(out, &[input], create_graph)?.get(input).expect("requested gradient");
        let dir = tape.constant(direction.clone());
        let prod = tape.mul(g, dir)?;
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let proj = projected(&mut tape, input, true)?;
    let hv = tape.backward(proj, &[input], false)?.get(input).expect("requested gradient");
    let analytic = tape.value(hv).clone();
    let numeric = finite_difference_oracle(
        |probe| {
            let mut tape = Tape::new();
            let input = tape.leaf(probe.clone());
            let proj = projected(&mut tape, input, false)?;
            tape.value(proj).item()
        },
        x,
        h,
    )?;
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradCheck { analytic, numeric, relative_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_sum_of_squares() {
        let g = finite_difference_oracle(|x| Ok(x.data().iter().map(|v| v * v).sum()), &Tensor::from_vec(vec![3.0]), 1e-4)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_sigmoid_slope() {
        let g = finite_difference_oracle(
            |x| Ok(crate::kernels::sigmoid(x.data()[0])),
            &Tensor::from_vec(vec![0.0]),
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn oracle_rejects_nonpositive_step() {
        assert!(finite_difference_oracle(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        let a = Tensor::from_vec(vec![1e-12]);
        let b = Tensor::from_vec(vec![0.0]);
        assert!(relative_error(&a, &b) < 1e-5);
        assert_eq!(relative_error(&a, &Tensor::zeros(&[2])), f64::INFINITY);
    }
}
