use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. `build` receives a tape and the input vector node and must
/// return a scalar node.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-12)`.
pub fn grad_check<F>(build: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.param(Tensor::vector(x.to_vec()));
        let out = build(&mut tape, input)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let input = tape.param(Tensor::vector(point.to_vec()));
    let out = build(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .ok_or_else(|| Error::input("grad_check: input not reached"))?
        .clone();

    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = eval(&x)?;
        x[i] = point[i] - step;
        let down = eval(&x)?;
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}
