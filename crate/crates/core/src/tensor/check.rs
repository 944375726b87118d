use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F>(f: &mut F, x: &Tensor, track: bool) -> Result<(f64, Option<Vec<f64>>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(track));
    let out = f(&mut g, xv)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check: function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite {
            what: "grad_check objective".into(),
            value: y,
        });
    }
    if !track {
        return Ok((y, None));
    }
    g.backward(out)?;
    let grad = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok((y, Some(grad)))
}

/// Max over coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// with central differences of step `eps`.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("grad_check: eps must be > 0, got {eps}")));
    }
    let (_, analytic) = eval_scalar(&mut f, x, true)?;
    let analytic = analytic.expect("tracked evaluation returns a gradient");
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = eval_scalar(&mut f, &probe, false)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = eval_scalar(&mut f, &probe, false)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * eps);
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
