//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

use crate::error::{invalid, Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Allowed step range for [`finite_diff_grad`].
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-4);

/// `grad[i] = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(i));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Finite-difference gradient of a scalar loss with respect to every tensor
/// of a parameter set. The result has the same layout as `params`.
pub fn finite_diff_params<P: ParamSet + Clone>(
    params: &P,
    loss: impl Fn(&P) -> f64,
    eps: f64,
) -> Result<P> {
    check_eps(eps)?;
    let mut probe = params.clone();
    let mut grad = params.clone();
    grad.zero_();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for j in 0..len {
            let orig = probe.tensors()[ti].1.data()[j];
            probe.tensors_mut()[ti].1.data_mut()[j] = orig + eps;
            let plus = loss(&probe);
            probe.tensors_mut()[ti].1.data_mut()[j] = orig - eps;
            let minus = loss(&probe);
            probe.tensors_mut()[ti].1.data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(j));
            }
            grad.tensors_mut()[ti].1.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(invalid(format!(
            "finite-difference step {eps:e} outside [{:e}, {:e}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    Ok(())
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; two (near-)zero
/// vectors compare by their absolute difference.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Per-tensor comparison of an analytic and a numeric gradient.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Gradient norms below this are treated as zero: central differences of a
/// loss with an exactly vanishing gradient still carry rounding noise.
pub const ZERO_GRAD_FLOOR: f64 = 1e-7;

impl GradReport {
    /// Norm of the difference between the two gradients.
    pub fn abs_diff(&self) -> f64 {
        let scale = self.analytic_norm.max(self.numeric_norm);
        if scale < 1e-10 {
            self.rel_err
        } else {
            self.rel_err * scale
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol || (self.analytic_norm < ZERO_GRAD_FLOOR && self.numeric_norm < ZERO_GRAD_FLOOR)
    }
}

pub fn compare_params<P: ParamSet>(analytic: &P, numeric: &P) -> Vec<GradReport> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| GradReport {
            name,
            rel_err: relative_error(a.data(), n.data()),
            analytic_norm: a.norm(),
            numeric_norm: n.norm(),
        })
        .collect()
}

/// Norm-wise relative error over all tensors taken together.
pub fn overall_error<P: ParamSet>(analytic: &P, numeric: &P) -> f64 {
    let flat = |p: &P| -> Vec<f64> { p.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect() };
    relative_error(&flat(analytic), &flat(numeric))
}

pub fn worst(reports: &[GradReport]) -> Option<&GradReport> {
    reports
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LinearMap;

    #[test]
    fn quadratic() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_function_recovers_weight_rows() {
        let m = LinearMap::from_rows(&[&[0.5, -1.5, 2.0], &[3.0, 0.25, -0.75]], &[1.0, 2.0]).unwrap();
        for row in 0..2 {
            let x = Tensor::vector(vec![0.3, -0.2, 0.9]).unwrap();
            let g = finite_diff_grad(|t| m.forward(t.data())[row], &x, 1e-6).unwrap();
            for (a, b) in g.data().iter().zip(&m.weight.data()[row * 3..row * 3 + 3]) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_diff_grad(|_| 0.0, &x, 1e-2).is_err());
        assert!(finite_diff_grad(|t| if t.data()[0] > 1.0 { f64::INFINITY } else { 0.0 }, &x, 1e-6).is_err());
    }

    #[test]
    fn param_set_fd_matches_linear_backward() {
        let m = LinearMap::from_rows(&[&[0.5, -1.5], &[3.0, 0.25]], &[0.1, -0.2]).unwrap();
        let x = [0.7, -1.1];
        let loss = |p: &LinearMap| {
            let y = p.forward(&x);
            y[0] * y[0] + 3.0 * y[1]
        };
        let num = finite_diff_params(&m, loss, 1e-6).unwrap();
        let y = m.forward(&x);
        let mut g = m.zeros_like();
        m.backward(&x, &[2.0 * y[0], 3.0], &mut g);
        for r in compare_params(&g, &num) {
            assert!(r.rel_err < 1e-8, "{}: {}", r.name, r.rel_err);
        }
    }
}
