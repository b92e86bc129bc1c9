use super::{Batch, Learner};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Risk of the logits scaled by a dummy scalar classifier `w = 1.0`, plus
/// the IRMv1 penalty `(dR/dw)^2` at `w = 1`.
#[derive(Clone, Copy, Debug)]
pub struct RiskAndPenalty {
    /// `R(1.0 * f(x))`, numerically identical to the unscaled risk.
    pub risk: NodeId,
    pub omega_grad: NodeId,
    pub penalty: NodeId,
}

/// Builds [`RiskAndPenalty`] for `batch` under `params`.
///
/// With `differentiable` the penalty can be differentiated with respect to
/// `params` (needed when it is part of an objective); otherwise it is a
/// detached value.
pub fn scaled_risk_and_penalty(
    g: &mut Graph,
    learner: &dyn Learner,
    params: &[NodeId],
    batch: &Batch,
    differentiable: bool,
) -> Result<RiskAndPenalty> {
    let out = learner.output(g, params, &batch.x)?;
    let omega = g.param(Tensor::scalar(1.0));
    let shape = g.shape(out).to_vec();
    let omega_b = g.broadcast(omega, &shape)?;
    let scaled = g.mul(omega_b, out)?;
    let risk = learner.risk(g, scaled, &batch.targets)?;
    let omega_grad = g.grad(risk, &[omega], differentiable)?[0];
    let penalty = g.sum_squares(omega_grad)?;
    Ok(RiskAndPenalty {
        risk,
        omega_grad,
        penalty,
    })
}

/// The IRMv1 penalty `||grad_w R(w * f_theta'(x))|_{w=1}||^2` as a
/// differentiable scalar node.
pub fn irm_penalty(g: &mut Graph, learner: &dyn Learner, theta_prime: &[NodeId], batch: &Batch) -> Result<NodeId> {
    Ok(scaled_risk_and_penalty(g, learner, theta_prime, batch, true)?.penalty)
}

/// How far the fixed scalar head is from being optimal in each batch's
/// environment: `|dR^e/dw|` at `w = 1`. Squares to the IRMv1 penalty.
pub fn irm_constraint_violation(
    learner: &dyn Learner,
    theta_prime: &[Tensor],
    per_env_batches: &[Batch],
) -> Result<Vec<f64>> {
    per_env_batches
        .iter()
        .map(|batch| {
            let mut g = Graph::new();
            let params: Vec<NodeId> = theta_prime.iter().map(|t| g.constant(t.clone())).collect();
            let terms = scaled_risk_and_penalty(&mut g, learner, &params, batch, false)?;
            Ok(g.scalar(terms.omega_grad)?.abs())
        })
        .collect()
}
