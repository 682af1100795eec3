use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the entry with the largest error.
    pub worst_index: usize,
    pub analytic: Mat,
    pub numeric: Mat,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of a scalar function at `point` with
/// central finite differences.
pub fn grad_check<F>(f: F, point: &Mat, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Mat| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(point.dim()));

    let mut numeric = Mat::zeros(point.dim());
    let mut probe = point.clone();
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let plus = eval(&probe)?;
        probe[[r, c]] = orig - FD_STEP;
        let minus = eval(&probe)?;
        probe[[r, c]] = orig;
        numeric[[r, c]] = (plus - minus) / (2.0 * FD_STEP);
    }

    if numeric.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "finite-difference gradient".into(),
            step: 0,
        });
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: max_rel_error < tol,
    })
}
