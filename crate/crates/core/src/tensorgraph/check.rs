use super::{Graph, GraphTensor, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the function on a fresh graph from the input leaf and returns
/// the scalar output. The result is the maximum over input components of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, GraphTensor) -> Result<GraphTensor>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.leaf(shape, values, false)?;
        let out = f(&mut g, input)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let input = g.leaf(shape, x.to_vec(), true)?;
    let out = f(&mut g, input)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(input).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0_f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = eval(probe.clone())?;
        probe[i] = x[i] - h;
        let down = eval(probe.clone())?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
