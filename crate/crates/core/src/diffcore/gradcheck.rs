//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy used by every gradient check: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!("gradcheck eps {eps} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

/// Compares `analytic` against central differences of `value` at `x`,
/// returning the maximum relative error over coordinates.
pub fn check_flat<F>(mut value: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    if x.len() != analytic.len() {
        return Err(Error::shape(
            "gradcheck",
            format!("{} coordinates but {} analytic entries", x.len(), analytic.len()),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = value(&probe)?;
        probe[i] = x[i] - eps;
        let down = value(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Gradient check of a scalar function expressed on a [`Graph`].
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// one-element output.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor, with_grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::shape(
                "gradcheck",
                format!("objective must be scalar, got {:?}", v.shape()),
            ));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        let grad = if with_grad {
            let grads = g.backward(out)?;
            Some(grads.get_or_zeros(leaf, g.value(leaf)))
        } else {
            None
        };
        Ok((y, grad))
    };
    let (_, grad) = eval(x.clone(), true)?;
    let analytic = grad.expect("gradient requested");
    let shape = x.shape().to_vec();
    check_flat(
        |p| Ok(eval(Tensor::from_parts(shape.clone(), p.to_vec()), false)?.0),
        x.data(),
        analytic.data(),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.5]).unwrap();
        let err = gradcheck(|g, x| Ok(g.sum(x)), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone());
        let s = g.sigmoid(leaf);
        let out = g.sum(s);
        let grads = g.backward(out).unwrap();
        assert!(grads.get(leaf).unwrap().data().iter().all(|&d| d == 0.25));
        let err = gradcheck(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn rejects_eps_out_of_range_and_nonfinite() {
        let x = Tensor::zeros(&[1]);
        assert!(gradcheck(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        let r = check_flat(|_| Ok(f64::NAN), &[0.0], &[0.0], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
