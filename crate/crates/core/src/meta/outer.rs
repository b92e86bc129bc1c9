use rayon::prelude::*;

use super::{inner_adapt, scaled_risk_and_penalty, Algo, Learner, MetaConfig, MetaState, Task, TaskSampler};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nodes of a meta-objective built in one graph.
#[derive(Clone, Debug)]
pub struct ObjectiveNodes {
    pub objective: NodeId,
    /// Query losses of the adapted models, environment-major.
    pub val_losses: Vec<NodeId>,
    pub penalties: Vec<NodeId>,
}

/// Query loss and penalty of one task after adaptation.
fn task_terms(
    g: &mut Graph,
    learner: &dyn Learner,
    theta: &[NodeId],
    task: &Task,
    cfg: &MetaConfig,
) -> Result<(NodeId, NodeId)> {
    let adapted = inner_adapt(
        g,
        learner,
        theta,
        &task.support,
        cfg.alpha,
        cfg.inner_steps,
        cfg.algo.second_order(),
    )?;
    let with_penalty = cfg.effective_lambda() > 0.0;
    let terms = scaled_risk_and_penalty(g, learner, &adapted, &task.query, with_penalty)?;
    Ok((terms.risk, terms.penalty))
}

/// `task_i`'s contribution to the objective: `L_query + lambda * penalty`.
fn task_contribution(g: &mut Graph, val: NodeId, pen: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda > 0.0 {
        let weighted = g.scale(pen, lambda)?;
        g.add(val, weighted)
    } else {
        Ok(val)
    }
}

/// Builds the summed meta-objective over environments and their tasks in a
/// single graph.
///
/// `tasks_by_env[e]` are the episodes drawn from environment `e`. The
/// result is `sum_e [ sum_i L_i + lambda * sum_i P_i ]`; for algorithms
/// other than RML, lambda is treated as 0.
pub fn meta_objective(
    g: &mut Graph,
    learner: &dyn Learner,
    theta: &[NodeId],
    tasks_by_env: &[Vec<Task>],
    cfg: &MetaConfig,
) -> Result<ObjectiveNodes> {
    let lambda = cfg.effective_lambda();
    let mut objective = None;
    let mut val_losses = Vec::new();
    let mut penalties = Vec::new();
    for (e, tasks) in tasks_by_env.iter().enumerate() {
        if tasks.is_empty() {
            return Err(Error::Invalid(format!("environment list {e} has no tasks")));
        }
        let mut env_val = None;
        let mut env_pen = None;
        for task in tasks {
            let (val, pen) = task_terms(g, learner, theta, task, cfg)?;
            val_losses.push(val);
            penalties.push(pen);
            env_val = Some(match env_val {
                None => val,
                Some(acc) => g.add(acc, val)?,
            });
            env_pen = Some(match env_pen {
                None => pen,
                Some(acc) => g.add(acc, pen)?,
            });
        }
        let env_total = task_contribution(g, env_val.unwrap(), env_pen.unwrap(), lambda)?;
        objective = Some(match objective {
            None => env_total,
            Some(acc) => g.add(acc, env_total)?,
        });
    }
    let objective = objective.ok_or_else(|| Error::Invalid("no environments".into()))?;
    Ok(ObjectiveNodes {
        objective,
        val_losses,
        penalties,
    })
}

/// Gradient of the meta-objective with respect to θ, accumulated per task.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grads: Vec<Tensor>,
    pub objective: f64,
    pub mean_val_loss: f64,
    pub mean_penalty: f64,
}

struct TaskGrad {
    grads: Vec<Tensor>,
    val: f64,
    pen: f64,
}

fn task_gradient(learner: &dyn Learner, theta: &[Tensor], task: &Task, cfg: &MetaConfig) -> Result<TaskGrad> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = theta.iter().map(|t| g.param(t.clone())).collect();
    let (val, pen) = task_terms(&mut g, learner, &leaves, task, cfg)?;
    let total = task_contribution(&mut g, val, pen, cfg.effective_lambda())?;
    let grads = g.grad(total, &leaves, false)?;
    Ok(TaskGrad {
        grads: grads.into_iter().map(|id| g.value(id).clone()).collect(),
        val: g.scalar(val)?,
        pen: g.scalar(pen)?,
    })
}

fn add_into(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Meta-gradient of the objective of [`meta_objective`].
///
/// Each task is differentiated in its own graph (tasks may run in
/// parallel); per-task gradients are summed environment-major, in task
/// order, so the result does not depend on scheduling.
pub fn meta_gradient(
    learner: &dyn Learner,
    theta: &[Tensor],
    tasks_by_env: &[Vec<Task>],
    cfg: &MetaConfig,
) -> Result<MetaGradient> {
    let indexed: Vec<(usize, usize, &Task)> = tasks_by_env
        .iter()
        .enumerate()
        .flat_map(|(e, ts)| ts.iter().enumerate().map(move |(i, t)| (e, i, t)))
        .collect();
    if indexed.is_empty() {
        return Err(Error::Invalid("meta-gradient needs at least one task".into()));
    }
    let per_task: Vec<Result<TaskGrad>> = indexed
        .par_iter()
        .map(|(_, _, task)| task_gradient(learner, theta, task, cfg))
        .collect();

    let lambda = cfg.effective_lambda();
    let mut grads: Vec<Tensor> = theta.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut objective, mut val_sum, mut pen_sum) = (0.0, 0.0, 0.0);
    for ((e, i, _), tg) in indexed.iter().zip(per_task) {
        let tg = tg?;
        if !tg.grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!("meta-gradient of environment {e}, task {i}")));
        }
        add_into(&mut grads, &tg.grads);
        objective += tg.val + lambda * tg.pen;
        val_sum += tg.val;
        pen_sum += tg.pen;
    }
    let n = indexed.len() as f64;
    Ok(MetaGradient {
        grads,
        objective,
        mean_val_loss: val_sum / n,
        mean_penalty: pen_sum / n,
    })
}

/// Per-step training diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Summed meta-objective value (before the update).
    pub objective: f64,
    pub mean_val_loss: f64,
    pub mean_penalty: f64,
}

fn sample_tasks(state: &mut MetaState, sampler: &dyn TaskSampler, cfg: &MetaConfig) -> Result<Vec<Vec<Task>>> {
    cfg.envs
        .iter()
        .map(|env| {
            (0..cfg.meta_batch)
                .map(|_| sampler.sample(env.env_id, &mut state.rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// One outer update. Reptile configs are forwarded to [`reptile_step`];
/// the others take `theta <- theta - eta * grad(meta-objective)`.
pub fn meta_step(
    state: &MetaState,
    learner: &dyn Learner,
    sampler: &dyn TaskSampler,
    cfg: &MetaConfig,
) -> Result<(MetaState, StepStats)> {
    if cfg.algo == Algo::Reptile {
        return reptile_step(state, learner, sampler, cfg);
    }
    cfg.validate()?;
    let mut next = state.clone();
    let tasks = sample_tasks(&mut next, sampler, cfg)?;
    let mg = meta_gradient(learner, &state.params, &tasks, cfg)?;
    for (p, g) in next.params.iter_mut().zip(&mg.grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= cfg.eta * d;
        }
    }
    next.step_count += 1;
    Ok((
        next,
        StepStats {
            objective: mg.objective,
            mean_val_loss: mg.mean_val_loss,
            mean_penalty: mg.mean_penalty,
        },
    ))
}

/// Reptile: adapt to each task without second-order terms, then move θ
/// toward the adapted parameters, `theta <- theta + eta * mean_i(theta'_i - theta)`.
pub fn reptile_step(
    state: &MetaState,
    learner: &dyn Learner,
    sampler: &dyn TaskSampler,
    cfg: &MetaConfig,
) -> Result<(MetaState, StepStats)> {
    cfg.validate()?;
    let mut next = state.clone();
    let tasks: Vec<(usize, usize, Task)> = sample_tasks(&mut next, sampler, cfg)?
        .into_iter()
        .enumerate()
        .flat_map(|(e, ts)| ts.into_iter().enumerate().map(move |(i, t)| (e, i, t)))
        .collect();

    let adapted: Vec<Result<(Vec<Tensor>, f64, f64)>> = tasks
        .par_iter()
        .map(|(_, _, task)| {
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = state.params.iter().map(|t| g.param(t.clone())).collect();
            let theta_prime = inner_adapt(
                &mut g,
                learner,
                &leaves,
                &task.support,
                cfg.alpha,
                cfg.inner_steps,
                false,
            )?;
            let terms = scaled_risk_and_penalty(&mut g, learner, &theta_prime, &task.query, false)?;
            let values = theta_prime.iter().map(|&id| g.value(id).clone()).collect();
            Ok((values, g.scalar(terms.risk)?, g.scalar(terms.penalty)?))
        })
        .collect();

    let mut delta: Vec<Tensor> = state.params.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut val_sum, mut pen_sum) = (0.0, 0.0);
    for ((e, i, _), res) in tasks.iter().zip(adapted) {
        let (theta_prime, val, pen) = res?;
        if !theta_prime.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!(
                "adapted parameters of environment {e}, task {i}"
            )));
        }
        for ((d, tp), t) in delta.iter_mut().zip(&theta_prime).zip(&state.params) {
            for ((dv, a), b) in d.data_mut().iter_mut().zip(tp.data()).zip(t.data()) {
                *dv += a - b;
            }
        }
        val_sum += val;
        pen_sum += pen;
    }
    let n = tasks.len() as f64;
    for (p, d) in next.params.iter_mut().zip(&delta) {
        for (x, dv) in p.data_mut().iter_mut().zip(d.data()) {
            *x += cfg.eta * dv / n;
        }
    }
    next.step_count += 1;
    Ok((
        next,
        StepStats {
            objective: val_sum,
            mean_val_loss: val_sum / n,
            mean_penalty: pen_sum / n,
        },
    ))
}
