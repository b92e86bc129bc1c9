use super::{Batch, Learner};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// `steps` full-batch gradient-descent updates of `theta` on the support
/// batch: `theta <- theta - alpha * grad L_support(theta)`.
///
/// With `track_higher_order` the gradients are recorded nodes, so the
/// adapted parameters stay differentiable with respect to `theta` through
/// the whole adaptation. Otherwise the gradients are detached constants and
/// the Jacobian of the result with respect to `theta` is the identity.
pub fn inner_adapt(
    g: &mut Graph,
    learner: &dyn Learner,
    theta: &[NodeId],
    support: &Batch,
    alpha: f64,
    steps: usize,
    track_higher_order: bool,
) -> Result<Vec<NodeId>> {
    if support.x.numel() == 0 {
        return Err(Error::Invalid("empty support set".into()));
    }
    let mut params = theta.to_vec();
    for step in 0..steps {
        let out = learner.output(g, &params, &support.x)?;
        let loss = learner.risk(g, out, &support.targets)?;
        if !g.scalar(loss)?.is_finite() {
            return Err(Error::NonFinite(format!("support loss at inner step {step}")));
        }
        let grads = g.grad(loss, &params, track_higher_order)?;
        params = params
            .iter()
            .zip(grads)
            .map(|(&p, d)| {
                let step = g.scale(d, alpha)?;
                g.sub(p, step)
            })
            .collect::<Result<_>>()?;
    }
    Ok(params)
}
