use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, Graph};
use crate::nn::{init_mlp, Mlp};
use crate::tasks::{gen_synthetic, EnvSpec, EpisodeSampler, SyntheticConfig};
use crate::verify::{closed_form_task, random_tasks, split_flat, ScalarLinear};
use std::sync::Arc;

/// Always hands out the same task.
struct Fixed(Task);

impl TaskSampler for Fixed {
    fn sample(&self, _env: EnvId, _rng: &mut ChaCha8Rng) -> Result<Task> {
        Ok(self.0.clone())
    }
}

fn env(id: u32) -> EnvSpec {
    EnvSpec {
        env_id: id,
        spurious_prob: None,
    }
}

fn scalar_cfg(algo: Algo, eta: f64) -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        eta,
        lambda: 0.0,
        inner_steps: 1,
        meta_batch: 1,
        algo,
        envs: vec![env(0)],
        ..MetaConfig::default()
    }
}

fn theta_one() -> Vec<Tensor> {
    vec![Tensor::matrix(1, 1, vec![1.0]).unwrap()]
}

fn bits(ts: &[Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn class_batch(x: Vec<f64>, rows: usize, labels: Vec<usize>) -> Batch {
    let cols = x.len() / rows;
    Batch {
        x: Tensor::matrix(rows, cols, x).unwrap(),
        targets: Targets::Classes(labels),
    }
}

/// Synthetic benchmark sampler over base classes 0..10, environments 0 and 1.
fn synthetic_sampler(n: usize, k: usize) -> EpisodeSampler {
    let cfg = SyntheticConfig {
        n_classes: 10,
        per_class_per_env: 20,
        env_probs: vec![0.9, 0.8],
        ..SyntheticConfig::default()
    };
    EpisodeSampler {
        dataset: Arc::new(gen_synthetic(&cfg, 5).unwrap()),
        classes: (0..10).collect(),
        n,
        k,
        q: 5,
    }
}

fn synthetic_cfg(algo: Algo, lambda: f64) -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        eta: 0.05,
        lambda,
        inner_steps: 2,
        n: 5,
        k: 1,
        q: 5,
        meta_batch: 2,
        algo,
        envs: vec![env(0), env(1)],
    }
}

fn run_steps(cfg: &MetaConfig, steps: usize) -> MetaState {
    let model = Mlp::new(&[10, 8, 5]).unwrap();
    let sampler = synthetic_sampler(cfg.n, cfg.k);
    let mut state = MetaState::new(init_mlp(model.sizes(), 3).unwrap().into_tensors(), 9);
    for _ in 0..steps {
        state = meta_step(&state, &model, &sampler, cfg).unwrap().0;
    }
    state
}

#[test]
fn inner_adapt_closed_form() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let task = closed_form_task();
    let adapted = inner_adapt(&mut g, &ScalarLinear, &[theta], &task.support, 0.1, 1, true).unwrap();
    // theta - 2 alpha x (theta x - y)
    let want = 1.0 - 2.0 * 0.1 * 1.0 * (1.0 * 1.0 - 0.0);
    assert!((g.value(adapted[0]).data()[0] - want).abs() < 1e-15);
    assert!((want - 0.8f64).abs() < 1e-15);
}

#[test]
fn zero_inner_rate_leaves_theta_bitwise() {
    let model = Mlp::new(&[3, 4, 2]).unwrap();
    let params = init_mlp(model.sizes(), 1).unwrap();
    let batch = class_batch(vec![0.3, -1.0, 2.0, 1.5, 0.1, -0.7], 2, vec![0, 1]);
    let mut g = Graph::new();
    let leaves: Vec<_> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
    let adapted = inner_adapt(&mut g, &model, &leaves, &batch, 0.0, 3, true).unwrap();
    let got: Vec<Tensor> = adapted.iter().map(|&id| g.value(id).clone()).collect();
    assert_eq!(bits(&got), bits(params.tensors()));
}

#[test]
fn two_steps_compose() {
    let model = Mlp::new(&[3, 4, 2]).unwrap();
    let params = init_mlp(model.sizes(), 2).unwrap();
    let batch = class_batch(vec![0.3, -1.0, 2.0, 1.5, 0.1, -0.7], 2, vec![0, 1]);
    let mut g = Graph::new();
    let leaves: Vec<_> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
    let two = inner_adapt(&mut g, &model, &leaves, &batch, 0.2, 2, true).unwrap();
    let once = inner_adapt(&mut g, &model, &leaves, &batch, 0.2, 1, true).unwrap();
    let twice = inner_adapt(&mut g, &model, &once, &batch, 0.2, 1, true).unwrap();
    for (a, b) in two.iter().zip(&twice) {
        assert_eq!(g.value(*a), g.value(*b));
    }
}

#[test]
fn inner_adapt_rejects_empty_support() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let empty = Batch {
        x: Tensor::new(vec![0, 1], vec![]).unwrap(),
        targets: Targets::Values(Tensor::new(vec![0, 1], vec![]).unwrap()),
    };
    assert!(inner_adapt(&mut g, &ScalarLinear, &[theta], &empty, 0.1, 1, true).is_err());
}

#[test]
fn inner_adapt_reports_nonfinite_step() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let task = Task {
        support: Batch {
            x: Tensor::matrix(1, 1, vec![1e200]).unwrap(),
            targets: Targets::Values(Tensor::matrix(1, 1, vec![0.0]).unwrap()),
        },
        ..closed_form_task()
    };
    let err = inner_adapt(&mut g, &ScalarLinear, &[theta], &task.support, 0.1, 3, true).unwrap_err();
    assert!(err.to_string().contains("inner step 0"), "{err}");
}

#[test]
fn penalty_of_zero_logits_is_zero() {
    // all-zero weights and biases give all-zero logits
    let model = Mlp::new(&[3, 4]).unwrap();
    let zeros: Vec<Tensor> = model.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    let batch = class_batch(vec![0.3, -1.0, 2.0, 1.5, 0.1, -0.7], 2, vec![0, 3]);
    let mut g = Graph::new();
    let ps: Vec<_> = zeros.iter().map(|t| g.param(t.clone())).collect();
    let pen = irm_penalty(&mut g, &model, &ps, &batch).unwrap();
    assert_eq!(g.scalar(pen).unwrap(), 0.0);
    let v = irm_constraint_violation(&model, &zeros, &[batch.clone(), batch]).unwrap();
    assert_eq!(v, vec![0.0, 0.0]);
}

#[test]
fn penalty_binary_oracle() {
    // logits (z, 0) from a linear layer with weight [[1],[0]] on input z = 1
    let model = Mlp::new(&[1, 2]).unwrap();
    let params = [
        Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
        Tensor::vector(vec![0.0, 0.0]),
    ];
    let batch = class_batch(vec![1.0], 1, vec![0]);
    let mut g = Graph::new();
    let ps: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let pen = irm_penalty(&mut g, &model, &ps, &batch).unwrap();
    let pen = g.scalar(pen).unwrap();
    // dR/dw = -z (1 - p0) with p0 = e / (1 + e)
    let e = 1f64.exp();
    let want = (1.0 * (e / (1.0 + e) - 1.0)).powi(2);
    assert!((pen - want).abs() < 1e-15, "{pen} vs {want}");
    assert!((pen - 0.07232).abs() < 1e-5);
}

#[test]
fn penalty_nonnegative_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    for i in 0..100 {
        let params = init_mlp(model.sizes(), i).unwrap();
        let task = &random_tasks(&mut rng, 1, 1, 3, 4)[0][0];
        let mut g = Graph::new();
        let ps: Vec<_> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
        let pen = irm_penalty(&mut g, &model, &ps, &task.query).unwrap();
        let pen = g.scalar(pen).unwrap();
        assert!(pen >= 0.0);
    }
}

#[test]
fn violation_squared_is_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    for seed in 0..20 {
        let params = init_mlp(model.sizes(), seed).unwrap();
        let tasks = random_tasks(&mut rng, 2, 1, 3, 4);
        let batches: Vec<Batch> = tasks.iter().map(|ts| ts[0].query.clone()).collect();
        let viol = irm_constraint_violation(&model, params.tensors(), &batches).unwrap();
        for (v, b) in viol.iter().zip(&batches) {
            let mut g = Graph::new();
            let ps: Vec<_> = params.tensors().iter().map(|t| g.constant(t.clone())).collect();
            let pen = irm_penalty(&mut g, &model, &ps, b).unwrap();
            let pen = g.scalar(pen).unwrap();
            assert!(*v >= 0.0);
            assert!(
                (v * v - pen).abs() <= 1e-12 * pen.max(f64::MIN_POSITIVE),
                "{} vs {pen}",
                v * v
            );
        }
    }
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    let shapes = model.param_shapes();
    let batch = random_tasks(&mut rng, 1, 1, 3, 4)[0][0].query.clone();
    let f = |g: &mut Graph, flat| {
        let ps = split_flat(g, flat, &shapes)?;
        irm_penalty(g, &model, &ps, &batch)
    };
    let mut checked = 0;
    for seed in 0..20 {
        let rep = finite_diff_check(f, &init_mlp(model.sizes(), seed).unwrap().flatten(), 1e-5, 1e-3).unwrap();
        if rep.relu_margin >= 1e-3 {
            assert!(rep.pass, "rel err {}", rep.max_rel_error);
            checked += 1;
        }
    }
    assert!(checked >= 5);
}

fn objective_value(tasks: &[Vec<Task>], cfg: &MetaConfig, params: &[Tensor], model: &Mlp) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let ps: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let nodes = meta_objective(&mut g, model, &ps, tasks, cfg).unwrap();
    let vals = nodes.val_losses.iter().map(|&n| g.scalar(n).unwrap()).collect();
    let pens = nodes.penalties.iter().map(|&n| g.scalar(n).unwrap()).collect();
    (g.scalar(nodes.objective).unwrap(), vals, pens)
}

#[test]
fn lambda_zero_single_env_is_summed_maml_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    let params = init_mlp(model.sizes(), 1).unwrap().into_tensors();
    let tasks = random_tasks(&mut rng, 1, 3, 3, 4);
    let mut cfg = synthetic_cfg(Algo::Rml, 0.0);
    cfg.envs = vec![env(0)];
    let (obj, vals, _) = objective_value(&tasks, &cfg, &params, &model);

    // independent construction: adapt each task and sum query cross-entropies
    let mut want = 0.0;
    for t in &tasks[0] {
        let mut g = Graph::new();
        let ps: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let adapted = inner_adapt(&mut g, &model, &ps, &t.support, cfg.alpha, cfg.inner_steps, true).unwrap();
        let out = model.output(&mut g, &adapted, &t.query.x).unwrap();
        let loss = model.risk(&mut g, out, &t.query.targets).unwrap();
        want += g.scalar(loss).unwrap();
    }
    assert!((obj - want).abs() <= 1e-12 * want.abs(), "{obj} vs {want}");
    assert!((vals.iter().sum::<f64>() - want).abs() <= 1e-12 * want.abs());
}

#[test]
fn duplicated_environment_doubles_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    let params = init_mlp(model.sizes(), 2).unwrap().into_tensors();
    let one = random_tasks(&mut rng, 1, 2, 3, 4);
    let two = vec![one[0].clone(), one[0].clone()];
    let cfg = synthetic_cfg(Algo::Rml, 1.0);
    let (single, _, _) = objective_value(&one, &cfg, &params, &model);
    let (double, _, _) = objective_value(&two, &cfg, &params, &model);
    assert!((double - 2.0 * single).abs() <= 1e-12 * double.abs());
}

#[test]
fn objective_is_additive_over_environments() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    let params = init_mlp(model.sizes(), 3).unwrap().into_tensors();
    let all = random_tasks(&mut rng, 3, 2, 3, 4);
    let cfg = synthetic_cfg(Algo::Rml, 1.0);
    let (whole, _, _) = objective_value(&all, &cfg, &params, &model);
    let (a, _, _) = objective_value(&all[..1], &cfg, &params, &model);
    let (b, _, _) = objective_value(&all[1..], &cfg, &params, &model);
    assert!((whole - (a + b)).abs() <= 1e-12 * whole.abs(), "{whole} vs {}", a + b);
}

#[test]
fn penalty_raises_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let model = Mlp::new(&[4, 6, 3]).unwrap();
    let params = init_mlp(model.sizes(), 4).unwrap().into_tensors();
    let tasks = random_tasks(&mut rng, 2, 2, 3, 4);
    let (obj, vals, pens) = objective_value(&tasks, &synthetic_cfg(Algo::Rml, 1.0), &params, &model);
    let val_sum: f64 = vals.iter().sum();
    assert!(obj >= val_sum);
    let want = val_sum + pens.iter().sum::<f64>();
    assert!((obj - want).abs() <= 1e-12 * obj);
}

#[test]
fn meta_gradient_matches_single_graph_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let model = Mlp::new(&[4, 5, 3]).unwrap();
    let params = init_mlp(model.sizes(), 5).unwrap().into_tensors();
    let tasks = random_tasks(&mut rng, 2, 2, 3, 4);
    for algo in [Algo::Maml, Algo::Fomaml, Algo::Rml] {
        let cfg = synthetic_cfg(algo, 1.0);
        let mg = meta_gradient(&model, &params, &tasks, &cfg).unwrap();
        let mut g = Graph::new();
        let ps: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
        let obj = meta_objective(&mut g, &model, &ps, &tasks, &cfg).unwrap().objective;
        let grads = g.grad(obj, &ps, false).unwrap();
        assert!((mg.objective - g.scalar(obj).unwrap()).abs() < 1e-12 * mg.objective);
        for (a, b) in mg.grads.iter().zip(&grads) {
            for (x, y) in a.data().iter().zip(g.value(*b).data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{algo}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn meta_step_closed_form() {
    let state = MetaState::new(theta_one(), 0);
    let cfg = scalar_cfg(Algo::Maml, 1.0);
    let (next, stats) = meta_step(&state, &ScalarLinear, &Fixed(closed_form_task()), &cfg).unwrap();
    // d/dtheta (theta' x_v - y_v)^2 = 2 x_v (theta' x_v - y_v) (1 - 2 alpha x_t^2)
    let (alpha, xt, xv, yv) = (0.1, 1.0, 2.0, 0.0);
    let tp = 0.8;
    let grad = 2.0 * xv * (tp * xv - yv) * (1.0 - 2.0 * alpha * xt * xt);
    assert!((grad - 5.12f64).abs() < 1e-12);
    let got = next.params[0].data()[0];
    assert!((got - (1.0 - grad)).abs() <= 1e-12 * 4.12, "{got}");
    assert_eq!(next.step_count, 1);
    assert!((stats.mean_val_loss - (tp * xv - yv).powi(2)).abs() < 1e-12);
}

#[test]
fn fomaml_drops_the_second_order_factor() {
    let state = MetaState::new(theta_one(), 0);
    let (next, _) = meta_step(
        &state,
        &ScalarLinear,
        &Fixed(closed_form_task()),
        &scalar_cfg(Algo::Fomaml, 1.0),
    )
    .unwrap();
    // 2 x_v (theta' x_v - y_v) = 6.4
    assert!((next.params[0].data()[0] - (1.0 - 6.4)).abs() < 1e-12);
}

#[test]
fn zero_outer_rate_keeps_theta() {
    for algo in Algo::ALL {
        let state = MetaState::new(theta_one(), 0);
        let (next, _) = meta_step(
            &state,
            &ScalarLinear,
            &Fixed(closed_form_task()),
            &scalar_cfg(algo, 0.0),
        )
        .unwrap();
        assert_eq!(bits(&next.params), bits(&state.params), "{algo}");
        assert_eq!(next.step_count, 1);
    }
}

#[test]
fn reptile_closed_form() {
    let state = MetaState::new(theta_one(), 0);
    let (half, _) = reptile_step(
        &state,
        &ScalarLinear,
        &Fixed(closed_form_task()),
        &scalar_cfg(Algo::Reptile, 0.5),
    )
    .unwrap();
    assert!((half.params[0].data()[0] - 0.9).abs() < 1e-15);
    let (full, _) = reptile_step(
        &state,
        &ScalarLinear,
        &Fixed(closed_form_task()),
        &scalar_cfg(Algo::Reptile, 1.0),
    )
    .unwrap();
    assert!((full.params[0].data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn reptile_is_deterministic() {
    let cfg = synthetic_cfg(Algo::Reptile, 1.0);
    assert_eq!(bits(&run_steps(&cfg, 3).params), bits(&run_steps(&cfg, 3).params));
}

#[test]
fn rml_without_penalty_is_maml_bitwise() {
    let maml = run_steps(&synthetic_cfg(Algo::Maml, 1.0), 10);
    let rml = run_steps(&synthetic_cfg(Algo::Rml, 0.0), 10);
    assert_eq!(bits(&maml.params), bits(&rml.params));
}

#[test]
fn penalty_changes_the_rml_trajectory() {
    let maml = run_steps(&synthetic_cfg(Algo::Maml, 1.0), 3);
    let rml = run_steps(&synthetic_cfg(Algo::Rml, 1.0), 3);
    assert_ne!(bits(&maml.params), bits(&rml.params));
}

#[test]
fn fomaml_differs_from_maml_but_agrees_without_inner_steps() {
    let mut maml = synthetic_cfg(Algo::Maml, 0.0);
    let mut fomaml = synthetic_cfg(Algo::Fomaml, 0.0);
    assert_ne!(bits(&run_steps(&maml, 2).params), bits(&run_steps(&fomaml, 2).params));
    maml.inner_steps = 0;
    fomaml.inner_steps = 0;
    let mut rml = synthetic_cfg(Algo::Rml, 0.0);
    rml.inner_steps = 0;
    let a = run_steps(&maml, 2);
    assert_eq!(bits(&a.params), bits(&run_steps(&fomaml, 2).params));
    assert_eq!(bits(&a.params), bits(&run_steps(&rml, 2).params));
}

#[test]
fn fomaml_inner_steps_zero_is_multitask_training() {
    // with no adaptation the meta-gradient is the plain query-loss gradient
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let model = Mlp::new(&[4, 5, 3]).unwrap();
    let params = init_mlp(model.sizes(), 6).unwrap().into_tensors();
    let tasks = random_tasks(&mut rng, 2, 2, 3, 4);
    let mut cfg = synthetic_cfg(Algo::Fomaml, 0.0);
    cfg.inner_steps = 0;
    let mg = meta_gradient(&model, &params, &tasks, &cfg).unwrap();
    let mut g = Graph::new();
    let ps: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let mut total = None;
    for t in tasks.iter().flatten() {
        let out = model.output(&mut g, &ps, &t.query.x).unwrap();
        let l = model.risk(&mut g, out, &t.query.targets).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l).unwrap(),
        });
    }
    let grads = g.grad(total.unwrap(), &ps, false).unwrap();
    for (a, b) in mg.grads.iter().zip(&grads) {
        for (x, y) in a.data().iter().zip(g.value(*b).data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn meta_step_is_independent_of_thread_count() {
    let cfg = synthetic_cfg(Algo::Rml, 1.0);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_steps(&cfg, 3));
    let b = four.install(|| run_steps(&cfg, 3));
    assert_eq!(bits(&a.params), bits(&b.params));
}

#[test]
fn config_validation() {
    let mut cfg = synthetic_cfg(Algo::Rml, 1.0);
    assert!(cfg.validate().is_ok());
    cfg.lambda = -1.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("lambda"));
    cfg.lambda = 1.0;
    cfg.envs.clear();
    assert!(cfg.validate().is_err());
    assert_eq!("fomaml".parse::<Algo>().unwrap(), Algo::Fomaml);
    assert!("sgd".parse::<Algo>().is_err());
    assert_eq!(synthetic_cfg(Algo::Maml, 1.0).effective_lambda(), 0.0);
}

#[test]
fn divergence_names_environment_and_task() {
    let model = Mlp::new(&[2, 2]).unwrap();
    let params = vec![
        Tensor::matrix(2, 2, vec![1e308, 1e308, 1e308, 1e308]).unwrap(),
        Tensor::zeros(&[2]),
    ];
    let task = Task {
        support: class_batch(vec![1.0, 1.0], 1, vec![0]),
        query: class_batch(vec![1.0, 1.0], 1, vec![1]),
        env_id: 0,
    };
    let mut cfg = synthetic_cfg(Algo::Fomaml, 0.0);
    cfg.inner_steps = 0;
    let err = meta_gradient(&model, &params, &[vec![task.clone()], vec![task]], &cfg).unwrap_err();
    assert!(err.to_string().contains("environment 0"), "{err}");
}

#[test]
fn adapt_and_eval_is_pure() {
    let model = Mlp::new(&[10, 8, 5]).unwrap();
    let params = init_mlp(model.sizes(), 1).unwrap();
    let sampler = synthetic_sampler(5, 1);
    let task: Task = sampler.sample(0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().into();
    let before = bits(params.tensors());
    let a = adapt_and_eval(&model, params.tensors(), &task, 0.1, 5).unwrap();
    let b = adapt_and_eval(&model, params.tensors(), &task, 0.1, 5).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(bits(params.tensors()), before);
}

#[test]
fn adapt_and_eval_fits_a_separable_support() {
    // query duplicates the support; four well-separated points
    let model = Mlp::new(&[2, 8, 4]).unwrap();
    let params = init_mlp(model.sizes(), 3).unwrap();
    let x = vec![3.0, 0.0, 0.0, 3.0, -3.0, 0.0, 0.0, -3.0];
    let batch = class_batch(x, 4, vec![0, 1, 2, 3]);
    let task = Task {
        support: batch.clone(),
        query: batch,
        env_id: 0,
    };
    assert_eq!(adapt_and_eval(&model, params.tensors(), &task, 0.5, 100).unwrap(), 1.0);
}

#[test]
fn untrained_model_is_at_chance() {
    let model = Mlp::new(&[10, 32, 32, 5]).unwrap();
    let sampler = synthetic_sampler(5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = init_mlp(model.sizes(), 77).unwrap();
    let accs: Vec<f64> = (0..100)
        .map(|i| {
            let task: Task = sampler.sample(i % 2, &mut rng).unwrap().into();
            adapt_and_eval(&model, params.tensors(), &task, 0.0, 0).unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 100.0;
    assert!((mean - 0.2).abs() <= 0.05, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_is_nonnegative(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let model = Mlp::new(&[3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = random_tasks(&mut rng, 1, 1, 4, 3)[0][0].query.clone();
        batch.x = batch.x.map(|v| v * scale);
        let params = init_mlp(model.sizes(), seed).unwrap();
        let mut g = Graph::new();
        let ps: Vec<_> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
        let pen = irm_penalty(&mut g, &model, &ps, &batch).unwrap();
        let pen = g.scalar(pen).unwrap();
        prop_assert!(pen >= 0.0);
    }

    #[test]
    fn reptile_full_interpolation_lands_on_adapted(theta in -3.0f64..3.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let task = Task {
            support: Batch {
                x: Tensor::matrix(1, 1, vec![x]).unwrap(),
                targets: Targets::Values(Tensor::matrix(1, 1, vec![y]).unwrap()),
            },
            ..closed_form_task()
        };
        let state = MetaState::new(vec![Tensor::matrix(1, 1, vec![theta]).unwrap()], 0);
        let (next, _) = reptile_step(&state, &ScalarLinear, &Fixed(task), &scalar_cfg(Algo::Reptile, 1.0)).unwrap();
        let want = theta - 2.0 * 0.1 * x * (theta * x - y);
        prop_assert!((next.params[0].data()[0] - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}
