//! Meta-learners: gradient-descent inner adaptation, the IRMv1 penalty on
//! adapted models, the per-environment meta-objective and the outer updates
//! for MAML, first-order MAML, Reptile and RML.
//!
//! RML's meta-objective is
//!
//! ```text
//! sum_e [ sum_i L_query(theta'_i) + lambda * sum_i || d/dw R_query(w * f_theta'_i) |_{w=1} ||^2 ]
//! ```
//!
//! with `theta'_i` obtained by differentiable gradient steps on task `i`'s
//! support set, and episodes grouped by the environment they were drawn
//! from. With `lambda = 0` it is exactly the MAML objective.

mod eval;
mod inner;
mod outer;
mod penalty;

pub use eval::adapt_and_eval;
pub use inner::inner_adapt;
pub use outer::{meta_gradient, meta_objective, meta_step, reptile_step, MetaGradient, ObjectiveNodes, StepStats};
pub use penalty::{irm_constraint_violation, irm_penalty, scaled_risk_and_penalty, RiskAndPenalty};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mlp};
use crate::tasks::{EnvId, EnvSpec, Episode, EpisodeSampler};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Maml,
    Fomaml,
    Reptile,
    Rml,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Maml, Algo::Fomaml, Algo::Reptile, Algo::Rml];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Maml => "maml",
            Algo::Fomaml => "fomaml",
            Algo::Reptile => "reptile",
            Algo::Rml => "rml",
        }
    }

    /// Whether the outer gradient flows through the inner updates.
    pub fn second_order(self) -> bool {
        matches!(self, Algo::Maml | Algo::Rml)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown algorithm `{s}` (expected maml, fomaml, reptile or rml)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer learning rate (interpolation rate for Reptile).
    pub eta: f64,
    /// IRMv1 penalty weight; only RML uses it.
    pub lambda: f64,
    pub inner_steps: usize,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    /// Tasks per environment per meta-step.
    pub meta_batch: usize,
    pub algo: Algo,
    /// Training environments.
    pub envs: Vec<EnvSpec>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.05,
            eta: 0.01,
            lambda: 1.0,
            inner_steps: 3,
            n: 5,
            k: 1,
            q: 15,
            meta_batch: 4,
            algo: Algo::Rml,
            envs: Vec::new(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.n == 0 || self.k == 0 || self.q == 0 || self.meta_batch == 0 {
            return bad("n, k, q and meta_batch must be positive".into());
        }
        if self.envs.is_empty() {
            return bad("need at least one training environment".into());
        }
        Ok(())
    }

    /// The penalty weight that actually enters the objective.
    pub fn effective_lambda(&self) -> f64 {
        if self.algo == Algo::Rml {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Training targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Targets,
}

/// A task as the meta-learners see it: a support batch for adaptation and a
/// query batch for the outer objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Batch,
    pub query: Batch,
    pub env_id: EnvId,
}

impl From<Episode> for Task {
    fn from(ep: Episode) -> Self {
        Task {
            support: Batch {
                x: ep.support_x,
                targets: Targets::Classes(ep.support_y),
            },
            query: Batch {
                x: ep.query_x,
                targets: Targets::Classes(ep.query_y),
            },
            env_id: ep.env_id,
        }
    }
}

/// A differentiable model plus its risk.
pub trait Learner: Sync {
    /// Model output for input `x` under the parameter nodes `params`.
    fn output(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> Result<NodeId>;

    /// Scalar risk of `output` against `targets`.
    fn risk(&self, g: &mut Graph, output: NodeId, targets: &Targets) -> Result<NodeId>;
}

impl Learner for Mlp {
    fn output(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> Result<NodeId> {
        let x = g.constant(x.clone());
        self.forward(g, params, x)
    }

    fn risk(&self, g: &mut Graph, output: NodeId, targets: &Targets) -> Result<NodeId> {
        match targets {
            Targets::Classes(labels) => Ok(cross_entropy(g, output, labels)?.node),
            Targets::Values(_) => Err(Error::Invalid("MLP classifier needs class targets".into())),
        }
    }
}

/// Source of training tasks for a given environment.
pub trait TaskSampler {
    fn sample(&self, env_id: EnvId, rng: &mut ChaCha8Rng) -> Result<Task>;
}

impl TaskSampler for EpisodeSampler {
    fn sample(&self, env_id: EnvId, rng: &mut ChaCha8Rng) -> Result<Task> {
        EpisodeSampler::sample(self, env_id, rng).map(Task::from)
    }
}

/// Meta-parameters θ with the step counter and the sampling RNG.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub params: Vec<Tensor>,
    pub step_count: u64,
    pub rng: ChaCha8Rng,
}

impl MetaState {
    pub fn new(params: Vec<Tensor>, seed: u64) -> Self {
        MetaState {
            params,
            step_count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests;
