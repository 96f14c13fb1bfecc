use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale, since
/// central differences cannot resolve them relative to round-off in `f`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs: f64,
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel: f64,
    pub entries: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

/// Compares the tape gradient of `f` at `params` with central differences.
///
/// `f` receives a fresh tape and the parameters registered as differentiable
/// leaves, and returns the scalar output node.
pub fn grad_check<F>(f: F, params: &[Tensor2], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {step}"
        )));
    }
    let eval = |ps: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check objective evaluated to {v}"
            )));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor2> = params.to_vec();
    let mut report = GradReport {
        max_abs: 0.0,
        max_rel: 0.0,
        entries: 0,
        tol,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for e in 0..params[pi].values().len() {
            let orig = params[pi].values()[e];
            work[pi].values_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].values_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].values_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.values()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs = report.max_abs.max(abs);
            report.max_rel = report.max_rel.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        // x·xᵀ for a single row is Σ x²
        let square = |t: &mut Tape, v: &[Var]| {
            let g = t.matmul_nt(v[0], v[0])?;
            Ok(t.sum(g))
        };
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let out = square(&mut tape, &[x]).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[2.0, 4.0]);

        let report = grad_check(square, &[p], 1e-5, 1e-8).unwrap();
        assert!(report.max_abs < 1e-8, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = Tensor2::filled(1, 1, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let e = t.scale(v[0], 1e6);
            let e = t.exp(e);
            Ok(t.sum(e))
        };
        assert!(matches!(
            grad_check(f, &[p], 1e-5, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_bad_step() {
        let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]));
        assert!(grad_check(f, &[Tensor2::zeros(1, 1)], 0.0, 1e-5).is_err());
    }
}
