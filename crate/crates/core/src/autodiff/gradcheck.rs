//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it shares no code with
//! [`Tape::backward`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a denominator floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares `backward` against `(f(x+h) − f(x−h)) / 2h` for every element of
/// every input. `stride` > 1 checks every `stride`-th element only.
pub fn check<F>(inputs: &[Tensor], f: F, h: f64, floor: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        for j in (0..inputs[i].len()).step_by(stride.max(1)) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric, floor);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let r = check(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            1e-5,
            1e-6,
            1,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }
}
