use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` receives the tape and one trainable leaf per entry of `params` and
/// must return a scalar. Returns the worst relative error over every
/// parameter element.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_on(Tape::new, f, params, eps)
}

/// [`grad_check`] with a caller-supplied tape constructor for the analytic pass.
pub fn grad_check_on<F, M>(make_tape: M, f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    M: Fn() -> Tape,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }

    let tape = make_tape();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_reports_floor() {
        let err = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(3.0))),
            &[Tensor::vector(vec![0.3, -0.7])],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn quadratic_form() {
        // f(x) = xᵀ A x with A fixed
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.1, 0.5, 1.0, -0.3, 0.1, -0.3, 3.0]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.4, -1.2, 0.7]).unwrap();
        let err = grad_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = a.matmul(v[0])?;
                let xt = v[0].t()?;
                xt.matmul(ax)?.reshape(&[])
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(0.0))), &[], 0.1);
        assert!(r.is_err());
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::vector(vec![0.3, -0.4, 0.9]);
        fn f<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            Ok(v[0].tanh().sum())
        }
        let good = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
        let bad = grad_check_on(|| Tape::with_corrupted_backward("tanh"), f, &[x], 1e-5).unwrap();
        assert!(good < 1e-6);
        assert!(bad > 0.1);
    }
}
