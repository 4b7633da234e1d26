//! Dense arrays and nested reverse-mode differentiation.
//!
//! A computation is recorded as a graph of [`Var`] nodes. [`grad`] evaluates
//! a scalar function and sweeps the graph once in reverse topological order.
//! Backward rules are themselves built from `Var` primitives, so passing
//! `create_graph = true` to [`grad_of`] yields gradients that can be
//! differentiated again (needed to take parameter gradients of anything that
//! contains an input gradient).

mod array;
mod var;

pub use array::Array;
pub use var::{enable_grad, grad_of, no_grad, try_grad_of, vjp, GradModeGuard, SweepStats, Var};

use crate::error::{Error, Result};

/// Gradient of the scalar function `f` at `at`.
///
/// `f` receives a leaf node and must return a single-element node.
pub fn grad<F>(f: F, at: &Array) -> Result<Array>
where
    F: FnOnce(&Var) -> Var,
{
    let x = Var::leaf(at.clone());
    let y = f(&x);
    if y.value().len() != 1 {
        return Err(Error::contract(format!(
            "grad needs a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    let g = try_grad_of(&y, &[x], false)?;
    Ok(g[0].value().clone())
}

/// Differentiable gradient: the result stays attached to the graph of `x`.
pub fn grad_var<F>(f: F, x: &Var) -> Var
where
    F: FnOnce(&Var) -> Var,
{
    let y = f(x);
    grad_of(&y, std::slice::from_ref(x), true).remove(0)
}

/// Central differences `(f(at + h e_i) - f(at - h e_i)) / 2h` per coordinate.
pub fn finite_diff<F>(mut f: F, at: &Array, h: f64) -> Result<Array>
where
    F: FnMut(&Array) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = at.clone();
    let mut out = Array::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Evaluates a `Var`-built function on a plain array without recording a graph.
pub fn eval<F>(f: F, at: &Array) -> f64
where
    F: FnOnce(&Var) -> Var,
{
    let _g = no_grad();
    f(&Var::constant(at.clone())).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Array {
        Array::scalar(v)
    }

    #[test]
    fn square_derivative() {
        let g = grad(|x| x.square(), &s(3.0)).unwrap();
        assert_eq!(g.item(), 6.0);
    }

    #[test]
    fn bilinear_gradient() {
        let g = grad(|v| v.at(0).mul(&v.at(1)), &Array::vector(vec![2.0, 3.0])).unwrap();
        assert_eq!(g.data(), &[3.0, 2.0]);
    }

    #[test]
    fn nested_second_derivative_of_cube() {
        let cube = |x: &Var| x.mul(x).mul(x);
        let g = grad(|x| grad_var(cube, x), &s(2.0)).unwrap();
        assert_eq!(g.item(), 12.0);
    }

    #[test]
    fn nested_fourth_power() {
        let quartic = |x: &Var| x.square().square();
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let g2 = grad(|v| grad_var(quartic, v), &s(x)).unwrap().item();
            let want: f64 = 12.0 * x * x;
            assert!((g2 - want).abs() <= 1e-9 * want.abs().max(1.0), "x={x}: {g2} vs {want}");
        }
    }

    #[test]
    fn third_derivative_through_tanh() {
        // d3/dx3 tanh(x) at 0 is -2
        let g1 = |x: &Var| grad_var(|v| v.tanh(), x);
        let g2 = |x: &Var| grad_var(g1, x);
        let g3 = grad(g2, &s(0.0)).unwrap().item();
        assert!((g3 + 2.0).abs() < 1e-12);
    }

    #[test]
    fn central_difference_examples() {
        let sq = finite_diff(|a| Ok(a.item() * a.item()), &s(3.0), 1e-5).unwrap();
        assert!((sq.item() - 6.0).abs() <= 1e-8);
        let at = Array::vector(vec![0.5, -1.0, 4.0]);
        let ones = finite_diff(|a| Ok(a.sum()), &at, 1e-5).unwrap();
        for v in ones.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let th = finite_diff(|a| Ok(a.item().tanh()), &s(0.0), 1e-5).unwrap();
        assert!((th.item() - 1.0).abs() <= 1e-9);
        assert!(finite_diff(|a| Ok(a.item()), &s(0.0), 0.0).is_err());
    }

    #[test]
    fn non_scalar_function_rejected() {
        assert!(grad(|x| x.scale(2.0), &Array::vector(vec![1.0, 2.0])).is_err());
    }
}
