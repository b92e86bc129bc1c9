use super::{inner_adapt, Learner, Targets, Task};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::accuracy;
use crate::tensor::Tensor;

/// Adapts a copy of θ on the task's support set (first-order) and returns
/// the query accuracy. θ itself is never modified.
pub fn adapt_and_eval(learner: &dyn Learner, theta: &[Tensor], task: &Task, alpha: f64, steps: usize) -> Result<f64> {
    let Targets::Classes(labels) = &task.query.targets else {
        return Err(Error::Invalid("accuracy needs class targets".into()));
    };
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = theta.iter().map(|t| g.param(t.clone())).collect();
    let adapted = inner_adapt(&mut g, learner, &leaves, &task.support, alpha, steps, false)?;
    let out = learner.output(&mut g, &adapted, &task.query.x)?;
    accuracy(g.value(out), labels)
}
