use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients against central differences.
///
/// Returns `max |analytic − fd| / max(1, |fd|)` over every parameter entry.
/// Intended for `f64` instantiations: at `eps = 1e-4` single-precision
/// evaluation noise alone exceeds the tolerances used in the test suites.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&[Tensor<T>]) -> f64,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    eps: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    for (p, g) in params.iter().zip(analytic) {
        if !p.same_shape(g) {
            return Err(Error::shape(
                "grad_check",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            let plus = T::of(orig.f64() + eps);
            let minus = T::of(orig.f64() - eps);
            work[t].data_mut()[i] = plus;
            let fp = f(&work);
            work[t].data_mut()[i] = minus;
            let fm = f(&work);
            work[t].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            // use the step actually representable in T
            let h = plus.f64() - minus.f64();
            let fd = (fp - fm) / h;
            let an = analytic[t].data()[i].f64();
            worst = worst.max((an - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let p = vec![Tensor::<f64>::vector(vec![0.3, -1.2, 4.0])];
        let g = vec![Tensor::full(&[3], 1.0)];
        let err = grad_check(|p| p[0].sum(), &p, &g, 1e-4).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let p = vec![Tensor::<f64>::vector(vec![1.0, 2.0])];
        let g = vec![Tensor::vector(vec![1.0, 0.0])];
        let err = grad_check(|p| p[0].sum(), &p, &g, 1e-4).unwrap();
        assert!(err > 0.9);
    }

    #[test]
    fn non_finite_objective_is_error() {
        let p = vec![Tensor::<f64>::vector(vec![1.0])];
        let g = vec![Tensor::vector(vec![1.0])];
        assert!(grad_check(|_| f64::NAN, &p, &g, 1e-4).is_err());
    }
}
