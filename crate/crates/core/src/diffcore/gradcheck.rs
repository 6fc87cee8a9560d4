use super::{DiffError, Graph, NodeId, Tensor};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok(g.value(out).item())
}

/// Central finite-difference gradient of the scalar function `f` with
/// respect to every element of every parameter.
pub fn central_difference<F>(params: &[Tensor], eps: f64, f: &F) -> Result<Vec<Tensor>, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = params[p].zeros_like();
        for k in 0..params[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let plus = evaluate(&work, f)?;
            work[p].data_mut()[k] = orig - eps;
            let minus = evaluate(&work, f)?;
            work[p].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Worst element of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstElement {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Per-parameter worst relative error between reverse-mode and
/// central-difference gradients.
pub fn grad_check_detail<F>(params: &[Tensor], eps: f64, f: F) -> Result<Vec<WorstElement>, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let numeric = central_difference(params, eps, &f)?;
    Ok(ids
        .iter()
        .zip(&numeric)
        .map(|(id, num)| {
            let analytic = grads.get(*id);
            let mut worst = WorstElement {
                index: 0,
                analytic: 0.0,
                numeric: 0.0,
                error: 0.0,
            };
            for (i, (&a, &n)) in analytic.data().iter().zip(num.data()).enumerate() {
                let e = relative_error(a, n);
                if e > worst.error || i == 0 {
                    worst = WorstElement {
                        index: i,
                        analytic: a,
                        numeric: n,
                        error: e,
                    };
                }
            }
            worst
        })
        .collect())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over all parameter elements.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    Ok(grad_check_detail(params, eps, f)?
        .iter()
        .map(|w| w.error)
        .fold(0.0, f64::max))
}
