use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `f` rebuilds the computation on a fresh tape from leaf handles, one per
/// entry of `inputs`, and returns the scalar output.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape { op: "grad_check", lhs: v.shape().to_vec(), rhs: vec![] });
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_slice(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[pi].len()]);
        for k in 0..inputs[pi].len() {
            let orig = inputs[pi].data()[k];
            probe[pi].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[k];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
