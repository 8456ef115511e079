use crate::error::{Error, Result};
use crate::numeric::tensor::ParamSet;

/// Plain gradient-descent update: theta <- theta - lr * g, elementwise.
///
/// `grads` must carry exactly the same names and shapes as `params`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "gradient set has {} entries, parameters have {}",
            grads.len(),
            params.len()
        )));
    }
    // Validate the full key/shape correspondence before touching anything.
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::Usage(format!("missing gradient for '{name}'"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Dim(format!(
                    "gradient for '{name}' has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).unwrap();
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn forced_arithmetic() {
        // theta=1.0, g=0.5, lr=1e-3 -> 0.9995
        let mut p = single(1.0);
        sgd_step(&mut p, &single(0.5), 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0 - 1e-3 * 0.5);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.75);
        sgd_step(&mut p, &single(0.0), 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.75);
    }

    #[test]
    fn two_steps_equal_one_double_step() {
        let mut a = single(1.0);
        sgd_step(&mut a, &single(0.3), 1e-3).unwrap();
        sgd_step(&mut a, &single(0.3), 1e-3).unwrap();
        let mut b = single(1.0);
        sgd_step(&mut b, &single(0.3), 2e-3).unwrap();
        let (va, vb) = (a.get("w").unwrap().data()[0], b.get("w").unwrap().data()[0]);
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn key_mismatch_is_usage_error() {
        let mut p = single(1.0);
        let mut g = ParamSet::new();
        g.insert("v", Tensor::scalar(0.1)).unwrap();
        assert!(matches!(sgd_step(&mut p, &g, 1e-3), Err(Error::Usage(_))));
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut p = single(1.0);
        assert!(sgd_step(&mut p, &single(0.1), 0.0).is_err());
        assert!(sgd_step(&mut p, &single(0.1), -1.0).is_err());
    }
}
