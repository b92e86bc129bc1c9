//! Finite-difference verification suite for the autodiff engine and the
//! meta-objectives built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_diff_check, Graph, NodeId};
use crate::error::{Error, Result};
use crate::meta::{irm_penalty, meta_objective, Algo, Batch, Learner, MetaConfig, Targets, Task};
use crate::nn::{cross_entropy, init_mlp, Mlp};
use crate::tasks::EnvSpec;
use crate::tensor::Tensor;

type CaseFn = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + Send + Sync>;

/// A scalar test function of a flat parameter vector exercising one
/// primitive.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub dim: usize,
    pub f: CaseFn,
}

/// Splits a flat `[n]` node into tensors of the given shapes.
pub fn split_flat(g: &mut Graph, flat: NodeId, shapes: &[Vec<usize>]) -> Result<Vec<NodeId>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let part = g.slice(flat, 0, offset, offset + n)?;
            offset += n;
            g.reshape(part, s)
        })
        .collect()
}

/// `sum(y * w)` with fixed, distinct weights so every output element
/// contributes differently.
fn weighted_sum(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.5 + 0.37 * ((i + 1) as f64).sin()).collect())?;
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn positive(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let sq = g.square(x)?;
    let half = g.constant(Tensor::full(g.shape(x), 0.5));
    g.add(sq, half)
}

fn case(
    name: &'static str,
    dim: usize,
    f: impl Fn(&mut Graph, NodeId) -> Result<NodeId> + Send + Sync + 'static,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        dim,
        f: Box::new(f),
    }
}

fn pair(g: &mut Graph, x: NodeId, a: &[usize], b: &[usize]) -> Result<(NodeId, NodeId)> {
    let parts = split_flat(g, x, &[a.to_vec(), b.to_vec()])?;
    Ok((parts[0], parts[1]))
}

/// One test function per primitive.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        case("add", 6, |g, x| {
            let (a, b) = pair(g, x, &[3], &[3])?;
            let y = g.add(a, b)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("sub", 6, |g, x| {
            let (a, b) = pair(g, x, &[3], &[3])?;
            let y = g.sub(a, b)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("mul", 6, |g, x| {
            let (a, b) = pair(g, x, &[3], &[3])?;
            let y = g.mul(a, b)?;
            weighted_sum(g, y)
        }),
        case("scale", 3, |g, x| {
            let y = g.scale(x, -1.7)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("matmul", 12, |g, x| {
            let (a, b) = pair(g, x, &[2, 3], &[3, 2])?;
            let y = g.matmul(a, b)?;
            weighted_sum(g, y)
        }),
        case("transpose", 6, |g, x| {
            let a = g.reshape(x, &[2, 3])?;
            let y = g.transpose(a)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("relu", 6, |g, x| {
            let y = g.relu(x)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("exp", 4, |g, x| {
            let y = g.exp(x)?;
            weighted_sum(g, y)
        }),
        case("log", 4, |g, x| {
            let p = positive(g, x)?;
            let y = g.log(p)?;
            weighted_sum(g, y)
        }),
        case("recip", 4, |g, x| {
            let p = positive(g, x)?;
            let y = g.recip(p)?;
            weighted_sum(g, y)
        }),
        case("sum", 4, |g, x| {
            let e = g.exp(x)?;
            let s = g.sum(e)?;
            g.square(s)
        }),
        case("mean", 4, |g, x| {
            let e = g.exp(x)?;
            let s = g.mean(e)?;
            g.square(s)
        }),
        case("broadcast", 3, |g, x| {
            let y = g.broadcast(x, &[2, 3])?;
            let y = g.exp(y)?;
            weighted_sum(g, y)
        }),
        case("sum_to", 6, |g, x| {
            let a = g.reshape(x, &[2, 3])?;
            let y = g.sum_to(a, &[3])?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("reshape", 6, |g, x| {
            let y = g.reshape(x, &[3, 2])?;
            let y = g.exp(y)?;
            weighted_sum(g, y)
        }),
        case("concat", 6, |g, x| {
            let (a, b) = pair(g, x, &[2], &[4])?;
            let y = g.concat(&[b, a], 0)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("slice", 6, |g, x| {
            let a = g.reshape(x, &[2, 3])?;
            let y = g.slice(a, 1, 1, 3)?;
            let y = g.exp(y)?;
            weighted_sum(g, y)
        }),
        case("square", 4, |g, x| {
            let y = g.square(x)?;
            weighted_sum(g, y)
        }),
        case("sum_squares", 4, |g, x| {
            let e = g.exp(x)?;
            g.sum_squares(e)
        }),
        case("double_backward", 4, |g, x| {
            // Hessian-vector style: differentiate a recorded gradient.
            let e = g.exp(x)?;
            let sq = g.square(x)?;
            let h = g.mul(e, sq)?;
            let h = g.sum(h)?;
            let dh = g.grad(h, &[x], true)?[0];
            weighted_sum(g, dh)
        }),
    ]
}

/// `f(x) = x * theta` on `[batch, 1]` inputs with mean squared error: the
/// one-parameter model used for closed-form meta-gradient checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarLinear;

impl Learner for ScalarLinear {
    fn output(&self, g: &mut Graph, params: &[NodeId], x: &Tensor) -> Result<NodeId> {
        let x = g.constant(x.clone());
        g.matmul(x, params[0])
    }

    fn risk(&self, g: &mut Graph, output: NodeId, targets: &Targets) -> Result<NodeId> {
        let Targets::Values(y) = targets else {
            return Err(Error::Invalid("squared error needs value targets".into()));
        };
        let y = g.constant(y.clone());
        let r = g.sub(output, y)?;
        let r = g.square(r)?;
        g.mean(r)
    }
}

/// One line of the verification report.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub rtol: f64,
    pub pass: bool,
}

fn random_batch(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, dim: usize) -> Batch {
    let n = classes * per_class;
    let x = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Batch {
        x: Tensor::matrix(n, dim, x).unwrap(),
        targets: Targets::Classes((0..n).map(|i| i % classes).collect()),
    }
}

/// Small random tasks for the gradient checks: `envs` environments with
/// `per_env` tasks each.
pub fn random_tasks(rng: &mut ChaCha8Rng, envs: usize, per_env: usize, way: usize, dim: usize) -> Vec<Vec<Task>> {
    (0..envs)
        .map(|e| {
            (0..per_env)
                .map(|_| Task {
                    support: random_batch(rng, way, 2, dim),
                    query: random_batch(rng, way, 3, dim),
                    env_id: e as u32,
                })
                .collect()
        })
        .collect()
}

/// Runs `f` at fresh random points until no relu input sits within 1e-3 of
/// the kink, then reports the finite-difference comparison.
fn check_away_from_kinks(
    f: &(dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + Sync),
    mut draw: impl FnMut() -> Vec<f64>,
    rtol: f64,
) -> Result<f64> {
    for _ in 0..100 {
        let rep = finite_diff_check(f, &draw(), 1e-5, rtol)?;
        if rep.relu_margin >= 1e-3 {
            return Ok(rep.max_rel_error);
        }
    }
    Err(Error::Invalid(
        "could not find a probe point away from relu kinks".into(),
    ))
}

fn with_fault<'a>(
    fault: Option<&'a str>,
    f: &'a (dyn Fn(&mut Graph, NodeId) -> Result<NodeId> + Sync),
) -> impl Fn(&mut Graph, NodeId) -> Result<NodeId> + Sync + 'a {
    move |g: &mut Graph, x: NodeId| {
        if let Some(name) = fault {
            g.inject_fault(name)?;
        }
        f(g, x)
    }
}

/// Configuration of the second-order meta-gradient check: 3 inner steps,
/// lambda = 1, two environments.
pub fn check_meta_config() -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        eta: 0.01,
        lambda: 1.0,
        inner_steps: 3,
        n: 3,
        k: 2,
        q: 3,
        meta_batch: 2,
        algo: Algo::Rml,
        envs: vec![
            EnvSpec {
                env_id: 0,
                spurious_prob: None,
            },
            EnvSpec {
                env_id: 1,
                spurious_prob: None,
            },
        ],
    }
}

/// Runs every check. `fault` names a primitive whose backward rule is
/// deliberately broken, to demonstrate that the suite detects it.
pub fn run_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |name: String, err: f64, rtol: f64| {
        results.push(CheckResult {
            name,
            max_rel_error: err,
            rtol,
            pass: err <= rtol,
        })
    };

    for case in primitive_cases() {
        let f = with_fault(fault, &case.f);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let err = check_away_from_kinks(
                &f,
                || (0..case.dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                1e-4,
            )?;
            worst = worst.max(err);
        }
        record(format!("primitive {}", case.name), worst, 1e-4);
    }

    // per-task cross-entropy loss of a small MLP
    let model = Mlp::new(&[4, 6, 3])?;
    let batch = random_batch(&mut rng, 3, 2, 4);
    let shapes = model.param_shapes();
    let loss = |g: &mut Graph, flat: NodeId| -> Result<NodeId> {
        let ps = split_flat(g, flat, &shapes)?;
        let out = model.output(g, &ps, &batch.x)?;
        let Targets::Classes(labels) = &batch.targets else {
            unreachable!()
        };
        Ok(cross_entropy(g, out, labels)?.node)
    };
    let mut init_seed = seed;
    let mut draw_params = |sizes: &[usize]| {
        init_seed += 1;
        init_mlp(sizes, init_seed).map(|p| p.flatten()).unwrap()
    };
    let f = with_fault(fault, &loss);
    record(
        "task cross-entropy".into(),
        check_away_from_kinks(&f, || draw_params(model.sizes()), 1e-4)?,
        1e-4,
    );

    // gradient of the IRMv1 penalty itself
    let pen = |g: &mut Graph, flat: NodeId| -> Result<NodeId> {
        let ps = split_flat(g, flat, &shapes)?;
        irm_penalty(g, &model, &ps, &batch)
    };
    let f = with_fault(fault, &pen);
    record(
        "irm penalty".into(),
        check_away_from_kinks(&f, || draw_params(model.sizes()), 1e-3)?,
        1e-3,
    );

    // full second-order meta-gradient, <= 50 parameters
    let small = Mlp::new(&[4, 5, 3])?;
    let small_shapes = small.param_shapes();
    let cfg = check_meta_config();
    let tasks = random_tasks(&mut rng, 2, 2, 3, 4);
    let obj = |g: &mut Graph, flat: NodeId| -> Result<NodeId> {
        let ps = split_flat(g, flat, &small_shapes)?;
        Ok(meta_objective(g, &small, &ps, &tasks, &cfg)?.objective)
    };
    let f = with_fault(fault, &obj);
    record(
        format!("second-order meta-gradient ({} params)", small.num_params()),
        check_away_from_kinks(&f, || draw_params(small.sizes()), 1e-3)?,
        1e-3,
    );

    // closed-form oracle: theta=1, alpha=0.1, x_tr=1, y_tr=0, x_val=2, y_val=0
    let got = closed_form_case_meta_gradient(fault)?;
    let (theta, alpha, xt, yt, xv, yv) = (1.0, 0.1, 1.0, 0.0, 2.0, 0.0);
    let adapted = theta - alpha * 2.0 * xt * (theta * xt - yt);
    let want = 2.0 * xv * (adapted * xv - yv) * (1.0 - 2.0 * alpha * xt * xt);
    record(
        "closed-form meta-gradient".into(),
        (got - want).abs() / want.abs(),
        1e-12,
    );

    Ok(results)
}

/// The one-parameter task used by the closed-form check.
pub fn closed_form_task() -> Task {
    let b = |x: f64, y: f64| Batch {
        x: Tensor::matrix(1, 1, vec![x]).unwrap(),
        targets: Targets::Values(Tensor::matrix(1, 1, vec![y]).unwrap()),
    };
    Task {
        support: b(1.0, 0.0),
        query: b(2.0, 0.0),
        env_id: 0,
    }
}

fn closed_form_case_meta_gradient(fault: Option<&str>) -> Result<f64> {
    let cfg = MetaConfig {
        alpha: 0.1,
        eta: 1.0,
        lambda: 0.0,
        inner_steps: 1,
        algo: Algo::Maml,
        envs: vec![EnvSpec {
            env_id: 0,
            spurious_prob: None,
        }],
        ..MetaConfig::default()
    };
    let mut g = Graph::new();
    if let Some(name) = fault {
        g.inject_fault(name)?;
    }
    let theta = g.param(Tensor::matrix(1, 1, vec![1.0])?);
    let obj = meta_objective(&mut g, &ScalarLinear, &[theta], &[vec![closed_form_task()]], &cfg)?;
    let d = g.grad(obj.objective, &[theta], false)?[0];
    g.scalar(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Primitive;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in 0..3 {
            let failed: Vec<_> = run_suite(seed, None)
                .unwrap()
                .into_iter()
                .filter(|r| !r.pass)
                .map(|r| r.name)
                .collect();
            assert!(failed.is_empty(), "seed {seed}: {failed:?}");
        }
    }

    #[test]
    fn every_primitive_fault_is_detected() {
        for &name in Primitive::NAMES.iter().filter(|n| **n != "leaf") {
            let results = run_suite(0, Some(name)).unwrap();
            assert!(results.iter().any(|r| !r.pass), "fault in `{name}` went unnoticed");
        }
    }
}
