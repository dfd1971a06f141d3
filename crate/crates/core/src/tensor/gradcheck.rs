use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&vars)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    let v = out.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Checks `f` at a single tensor input.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    grad_check_params(|vs| f(&vs[0]), std::slice::from_ref(point), None, step, tol)
}

/// Checks `f` over several inputs. `coords` restricts the finite-difference
/// sweep to the listed `(input, flat index)` pairs; `None` checks everything.
pub fn grad_check_params<F>(
    f: F,
    points: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&vars)?;
        if !out.item()?.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = points
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.numel()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };

    let mut work = points.to_vec();
    let mut worst = (0.0, (0, 0));
    for &(i, k) in coords {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + step;
        let up = evaluate(&f, &work)?;
        work[i].data_mut()[k] = orig - step;
        let down = evaluate(&f, &work)?;
        work[i].data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i].data()[k], fd);
        if err > worst.0 {
            worst = (err, (i, k));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked: coords.len(),
        tol,
        passed: worst.0 <= tol,
    })
}
