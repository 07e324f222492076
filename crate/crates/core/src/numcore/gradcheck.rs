use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamSet, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares tape gradients of the scalar `f` against central differences.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)` over every scalar
/// in `params`.
pub fn grad_check<F>(f: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Dimension(format!(
                "grad_check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("f = {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::Evaluation("f is not finite at params".into()));
    }
    let grads = bound.gradients(&tape, &tape.backward(out)?);

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (name, analytic) in grads.iter() {
        for i in 0..analytic.len() {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
