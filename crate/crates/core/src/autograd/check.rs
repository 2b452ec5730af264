use alloc::vec::Vec;

use super::{AutogradError, Tape, Tensor, Var};

/// Per-parameter summary of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    /// Coordinates evaluated numerically.
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates no recorded operation reads; their numeric derivative is
    /// exactly zero and was not re-evaluated.
    pub unread: usize,
    pub params: Vec<ParamCheck>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), AutogradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutogradError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

fn scalar(tape: &Tape, root: Var) -> Result<f64, AutogradError> {
    let v = tape.value(root);
    v.item().ok_or_else(|| AutogradError::NonScalarRoot(v.shape().to_vec()))
}

// The tape is dropped before returning so `work` buffers are unshared again
// and the next in-place perturbation does not copy them.
fn value_at<F>(f: &F, params: &[Tensor]) -> Result<f64, AutogradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutogradError>,
{
    let (tape, _, root) = evaluate(f, params)?;
    scalar(&tape, root)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every parameter.
///
/// `f` must route every use of its parameters through tape operations and
/// be deterministic (no dropout); a second evaluation that disagrees with
/// the first is reported as [`AutogradError::NonDeterministic`].
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutogradError>,
{
    let (tape, vars, root) = evaluate(&f, params)?;
    let first = scalar(&tape, root)?;
    let (tape2, _, root2) = evaluate(&f, params)?;
    let second = scalar(&tape2, root2)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutogradError::NonDeterministic { first, second });
    }
    drop(tape2);

    let masks: Vec<Vec<bool>> = vars.iter().map(|&v| tape.read_mask(v)).collect::<Result<_, _>>()?;
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.iter().map(|t| Tensor::from_vec(t.shape().to_vec(), t.data().to_vec())).collect::<Result<_, _>>()?;
    let mut report = GradCheckReport { max_rel_error: 0.0, mean_rel_error: 0.0, coordinates: 0, unread: 0, params: Vec::new() };
    let mut total = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(g) => g.data(),
            None => {
                zeros = alloc::vec![0.0; params[pi].numel()];
                &zeros
            }
        };
        let mut check = ParamCheck { index: pi, max_rel_error: 0.0, mean_rel_error: 0.0, worst: 0, evaluated: 0 };
        let mut sum = 0.0;
        for j in 0..params[pi].numel() {
            let rel = if masks[pi][j] {
                let orig = work[pi].data()[j];
                work[pi].data_mut()[j] = orig + h;
                let plus = value_at(&f, &work)?;
                work[pi].data_mut()[j] = orig - h;
                let minus = value_at(&f, &work)?;
                work[pi].data_mut()[j] = orig;
                check.evaluated += 1;
                relative_error(analytic[j], (plus - minus) / (2.0 * h))
            } else {
                report.unread += 1;
                relative_error(analytic[j], 0.0)
            };
            sum += rel;
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = j;
            }
        }
        let n = params[pi].numel();
        check.mean_rel_error = if n > 0 { sum / n as f64 } else { 0.0 };
        total += sum;
        report.coordinates += n;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    report.mean_rel_error = if report.coordinates > 0 { total / report.coordinates as f64 } else { 0.0 };
    Ok(report)
}
