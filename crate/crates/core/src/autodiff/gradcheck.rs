//! Central-difference validation of the reverse pass.

use crate::{Error, Result};

use super::{Array, Graph, Value};

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences at every coordinate of every input.
///
/// Returns the worst relative error `|analytic - numeric| / max(1, |numeric|)`.
/// Fails with [`Error::Numeric`] if any evaluation is non-finite.
pub fn grad_check<F>(f: F, inputs: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let eval = |points: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vals: Vec<Value> = points.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let y = f(&mut g, &vals)?;
        if g.array(y).numel() != 1 {
            return Err(Error::Dim(format!(
                "grad_check target must be scalar, got {:?}",
                g.shape(y)
            )));
        }
        let v = g.array(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective {}", v)));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let y = f(&mut g, &vals)?;
    eval(inputs)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = vals
        .iter()
        .zip(inputs.iter())
        .map(|(&v, a)| g.grad(v).map_or_else(|| vec![0.0; a.numel()], |s| s.to_vec()))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite difference at input {} coord {}",
                    i, j
                )));
            }
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
