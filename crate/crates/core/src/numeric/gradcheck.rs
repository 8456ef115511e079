//! Central-finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numeric::tape::{collect_param_grads, ParamVars, Tape, Var};
use crate::numeric::tensor::ParamSet;

/// A scalar objective expressed as a tape computation over registered
/// parameters. The same closure serves both the analytic backward pass and
/// the value-only perturbed evaluations.
pub trait Objective {
    fn build(&self, tape: &mut Tape, params: &ParamVars) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, params: &ParamVars) -> Result<Var> {
        self(tape, params)
    }
}

fn eval_value(f: &dyn Objective, point: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.register_params(point, false);
    let out = f.build(&mut tape, &vars)?;
    let v = tape.value(out).scalar_value()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("objective value is not finite".into()));
    }
    Ok(v)
}

/// Compare the tape gradient of `f` at `point` against central differences.
///
/// Returns the worst-case relative error over every parameter element, with
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check(f: &dyn Objective, point: &ParamSet, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Param(format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars = tape.register_params(point, true);
    let loss = f.build(&mut tape, &vars)?;
    if !tape.value(loss).scalar_value()?.is_finite() {
        return Err(Error::NonFinite("objective value is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = collect_param_grads(&grads, &vars, point)?;

    let mut worst: f64 = 0.0;
    for (name, tensor) in point.iter() {
        let ga = analytic.get(name).unwrap();
        for idx in 0..tensor.len() {
            let orig = tensor.data()[idx];

            let mut plus = point.clone();
            plus.get_mut_element(name, idx, orig + eps)?;
            let f_plus = eval_value(f, &plus)?;

            let mut minus = point.clone();
            minus.get_mut_element(name, idx, orig - eps)?;
            let f_minus = eval_value(f, &minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = ga.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

impl ParamSet {
    /// Test-support mutation of a single element (used by the checker).
    fn get_mut_element(&mut self, name: &str, idx: usize, value: f64) -> Result<()> {
        for (n, t) in self.iter_mut() {
            if n == name {
                t.data_mut()[idx] = value;
                return Ok(());
            }
        }
        Err(Error::Usage(format!("unknown parameter '{name}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact_up_to_roundoff() {
        // f(w) = sum(w*w) has gradient 2w; central differences are exact for
        // quadratics, so only roundoff remains.
        let mut point = ParamSet::new();
        point
            .insert("w", Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap())
            .unwrap();
        let f = |tape: &mut Tape, vars: &ParamVars| {
            let w = vars.get("w")?;
            let sq = tape.mul(w, w)?;
            tape.sum(sq)
        };
        let err = finite_diff_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn zero_eps_rejected() {
        let mut point = ParamSet::new();
        point.insert("w", Tensor::scalar(1.0)).unwrap();
        let f = |tape: &mut Tape, vars: &ParamVars| {
            let w = vars.get("w")?;
            tape.sum(w)
        };
        assert!(matches!(
            finite_diff_check(&f, &point, 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn linear_gradient_matches_differences() {
        // Spec example for linear_forward: gradient of sum(y) w.r.t. W within
        // 1e-6 relative of central differences at a seeded random point.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut point = ParamSet::new();
        let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        point.insert("x", rand_t(&mut rng, &[3, 4])).unwrap();
        point.insert("w", rand_t(&mut rng, &[4, 2])).unwrap();
        point.insert("b", rand_t(&mut rng, &[2])).unwrap();
        let f = |tape: &mut Tape, vars: &ParamVars| {
            let y = tape.linear(vars.get("x")?, vars.get("w")?, vars.get("b")?)?;
            tape.sum(y)
        };
        let err = finite_diff_check(&f, &point, 1e-5).unwrap();
        assert!(err < 1e-6, "error {err}");
    }
}
