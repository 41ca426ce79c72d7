use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates whose gradients are both below this are compared in
/// absolute terms; central differences cannot resolve relative error there.
const DENOM_FLOOR: f64 = 1e-6;

fn evaluate<F>(f: &F, xs: &[Tensor], grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|x| {
            if grad {
                g.leaf(&x.clone().with_grad())
            } else {
                g.constant(x)
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.dims(out) != (1, 1) {
        let (r, c) = g.dims(out);
        return Err(Error::Contract(format!("checked function must be scalar, got [{r}, {c}]")));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("checked function returned {v}")));
    }
    Ok((g, vars, out))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// and returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-6)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

/// [`finite_difference_check`] over several inputs at once; the maximum is
/// taken over every coordinate of every input.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let (g, vars, out) = evaluate(&f, xs, true)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; xs[t].len()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        if analytic.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("analytic gradient is not finite".into()));
        }
        for i in 0..xs[t].len() {
            let orig = xs[t].values()[i];
            probe[t].values_mut()[i] = orig + step;
            let (gp, _, op) = evaluate(&f, &probe, false)?;
            probe[t].values_mut()[i] = orig - step;
            let (gm, _, om) = evaluate(&f, &probe, false)?;
            probe[t].values_mut()[i] = orig;
            let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * step);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
