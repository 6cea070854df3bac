use serde::Serialize;

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(leaf index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub pass: bool,
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AutodiffError::Shape {
            op: "grad_check",
            detail: format!("program returned {}x{}", v.rows(), v.cols()),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(AutodiffError::Numerical("program produced a non-finite value".into()));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `leaves`, via one backward pass.
pub fn analytic_gradients<F>(f: &F, leaves: &[Tensor]) -> Result<Vec<Tensor>, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars.iter().map(|v| grads.take(*v).expect("every leaf has a gradient")).collect())
}

/// Checks `f`'s backward pass against `(f(x+h) - f(x-h)) / 2h` on every
/// coordinate of every leaf. The relative error is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64, tol_rel: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let analytic = analytic_gradients(&f, leaves)?;
    compare_gradients(f, leaves, &analytic, h, tol_rel)
}

/// The comparison half of [`grad_check`], taking the analytic gradients as
/// input so callers can inspect or tamper with them first.
pub fn compare_gradients<F>(
    f: F,
    leaves: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol_rel: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(AutodiffError::InvalidArgument(format!("step h={h:e} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != leaves.len() {
        return Err(AutodiffError::InvalidArgument("one analytic gradient per leaf required".into()));
    }
    let mut points: Vec<Tensor> = leaves.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for li in 0..leaves.len() {
        if analytic[li].shape() != leaves[li].shape() {
            return Err(AutodiffError::Shape {
                op: "grad_check",
                detail: format!("gradient shape mismatch for leaf {li}"),
            });
        }
        for ci in 0..leaves[li].data().len() {
            let x0 = leaves[li].data()[ci];
            points[li].data_mut()[ci] = x0 + h;
            let plus = evaluate(&f, &points)?;
            points[li].data_mut()[ci] = x0 - h;
            let minus = evaluate(&f, &points)?;
            points[li].data_mut()[ci] = x0;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li].data()[ci];
            if !a.is_finite() {
                return Err(AutodiffError::Numerical(format!("non-finite analytic gradient at leaf {li}[{ci}]")));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(rel);
                worst = Some((li, ci));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coordinates,
        tolerance: tol_rel,
        pass: max_rel_err < tol_rel,
    })
}
