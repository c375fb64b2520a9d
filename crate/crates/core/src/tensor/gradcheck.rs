use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e−12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks every coordinate of `params` by central differences with step `eps`.
///
/// `loss_fn` records a scalar loss on the graph given one variable per
/// parameter, in the same order as `params`.
pub fn gradient_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_check_with(Graph::new, loss_fn, params, eps)
}

/// [`gradient_check`] with the analytic pass recorded on graphs from `make_graph`.
#[doc(hidden)]
pub fn gradient_check_with<G, F>(make_graph: G, loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("gradient check step must be positive, got {eps}")));
    }
    let mut graph = make_graph();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = loss_fn(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    // Each numeric derivative is (f(θ + ε) − f(θ − ε)) / 2ε. Both changes
    // are replayed over the recorded tape, which carries them through every op
    // directly instead of subtracting nearly equal losses.
    if graph.value(loss).numel() != 1 {
        return Err(Error::Graph("loss is not scalar".into()));
    }
    let central_difference = |pi: usize, j: usize| -> Result<f64> {
        let mut step = vec![0.0; params[pi].numel()];
        step[j] = eps;
        let up = graph.secant_change(&[(vars[pi], &step)], loss)?;
        step[j] = -eps;
        let down = graph.secant_change(&[(vars[pi], &step)], loss)?;
        Ok(up - down)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .expect("every parameter leaf has a gradient");
        for j in 0..param.numel() {
            let numeric = central_difference(pi, j)? / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
