use crate::error::{Result, ScnError};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-element relative error `|a-b| / max(1, |a|, |b|)`.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs `f` once on a tape to obtain analytic gradients for `x`, then probes
/// every element of `x` with central differences of the given `step`.
///
/// `f` must produce a scalar output.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(ScnError::InvalidArgument {
            op: "grad_check",
            detail: format!("f must be scalar-valued, got {:?}", tape.shape(out)),
        });
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).expect("x registered with requires_grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).item())
    };

    let mut probe = x.data().to_vec();
    let mut errors = Vec::with_capacity(probe.len());
    let mut max_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = eval(&probe)?;
        probe[i] = orig - step;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
        if err > max_error {
            max_error = err;
            worst_index = i;
        }
        errors.push(err);
    }
    Ok(GradCheckReport {
        errors,
        max_error,
        worst_index,
        tolerance: tol,
        passed: max_error < tol,
    })
}
