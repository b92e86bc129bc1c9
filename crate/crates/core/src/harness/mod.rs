//! Benchmark driver: meta-train each method on base classes with model
//! selection on validation classes, then report novel-class accuracy in the
//! conventional setting (training environments) and the cross-domain
//! setting (held-out environment or dataset).

mod stats;
mod table;

pub use stats::{mean_ci95, Z95};
pub use table::{emit_table, parse_csv_rows, Format, CSV_HEADER};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{adapt_and_eval, meta_step, Algo, MetaConfig, MetaState, StepStats, Task};
use crate::nn::{init_mlp, Mlp, MlpParams};
use crate::tasks::{gen_synthetic, make_split, Dataset, EnvId, EnvSpec, EpisodeSampler, SplitSpec, SyntheticConfig};

/// Independent RNG streams derived from one user seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const TEST: u64 = 6;
}

/// A seed for one purpose, derived from the ChaCha8 stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    Conventional,
    CrossDomain,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::Conventional, Setting::CrossDomain];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Conventional => "conventional",
            Setting::CrossDomain => "cross-domain",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Setting::Conventional),
            "cross-domain" | "ood" => Ok(Setting::CrossDomain),
            _ => Err(Error::Invalid(format!(
                "unknown setting `{s}` (expected conventional or cross-domain)"
            ))),
        }
    }
}

/// Where the benchmark's data comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Generated per seed; the last environment of `env_probs` is held out.
    Synthetic(SyntheticConfig),
    Loaded {
        dataset: Arc<Dataset>,
        train_envs: Vec<EnvId>,
        /// Environments of `dataset` used for the cross-domain setting.
        ood_envs: Vec<EnvId>,
        /// A second dataset whose classes form the cross-domain evaluation
        /// split; all of its environments are used.
        cross_dataset: Option<Arc<Dataset>>,
    },
}

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub data: DataSource,
    pub methods: Vec<Algo>,
    /// `(N, K)` pairs.
    pub shots: Vec<(usize, usize)>,
    /// Shared hyperparameters; `algo`, `n`, `k` and `envs` are set per run.
    pub meta: MetaConfig,
    /// Outer interpolation rate used for Reptile in place of `meta.eta`.
    pub reptile_eta: f64,
    pub hidden: Vec<usize>,
    pub meta_steps: usize,
    pub eval_interval: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub fractions: [f64; 3],
    /// Store measured wall time in the report (makes it nondeterministic).
    pub record_timing: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            methods: Algo::ALL.to_vec(),
            shots: vec![(5, 1)],
            meta: MetaConfig::default(),
            reptile_eta: 1.0,
            hidden: vec![32, 32],
            meta_steps: 2000,
            eval_interval: 50,
            val_episodes: 100,
            test_episodes: 600,
            fractions: [0.5, 0.25, 0.25],
            record_timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub setting: String,
    pub n: usize,
    pub k: usize,
    pub mean_pct: f64,
    pub ci95_pct: f64,
    pub episodes: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

impl MetricsReport {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn row(&self, method: &str, setting: Setting, n: usize, k: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.setting == setting.name() && r.n == n && r.k == k)
    }
}

/// Evaluation data of one setting: episodes come from `classes` of
/// `dataset`, cycling through `envs`.
#[derive(Clone, Debug)]
pub struct EvalPool {
    pub dataset: Arc<Dataset>,
    pub classes: Vec<u32>,
    pub envs: Vec<EnvId>,
}

impl EvalPool {
    /// `count` episodes, the i-th drawn from environment `envs[i % len]`.
    pub fn episodes(&self, n: usize, k: usize, q: usize, count: usize, seed: u64) -> Result<Vec<Task>> {
        if self.envs.is_empty() {
            return Err(Error::Invalid("evaluation pool has no environments".into()));
        }
        let sampler = EpisodeSampler {
            dataset: self.dataset.clone(),
            classes: self.classes.clone(),
            n,
            k,
            q,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| sampler.sample(self.envs[i % self.envs.len()], &mut rng).map(Task::from))
            .collect()
    }
}

/// Resolved datasets, splits and environment lists for one benchmark seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitSpec,
    pub train_envs: Vec<EnvSpec>,
    pub validation: EvalPool,
    pub conventional: EvalPool,
    pub cross_domain: EvalPool,
}

impl Prepared {
    pub fn pool(&self, setting: Setting) -> &EvalPool {
        match setting {
            Setting::Conventional => &self.conventional,
            Setting::CrossDomain => &self.cross_domain,
        }
    }

    pub fn train_sampler(&self, n: usize, k: usize, q: usize) -> EpisodeSampler {
        EpisodeSampler {
            dataset: self.split.base_dataset.clone(),
            classes: self.split.base_classes.clone(),
            n,
            k,
            q,
        }
    }
}

pub fn prepare(data: &DataSource, fractions: [f64; 3], seed: u64) -> Result<Prepared> {
    let (dataset, train_ids, ood_ids, cross) = match data {
        DataSource::Synthetic(cfg) => {
            if cfg.env_probs.len() < 2 {
                return Err(Error::Invalid(
                    "synthetic benchmark needs training environments plus one held-out environment".into(),
                ));
            }
            let ds = Arc::new(gen_synthetic(cfg, derive_seed(seed, streams::DATA))?);
            let e = cfg.env_probs.len() as EnvId - 1;
            (ds, (0..e).collect::<Vec<_>>(), vec![e], None)
        }
        DataSource::Loaded {
            dataset,
            train_envs,
            ood_envs,
            cross_dataset,
        } => (
            dataset.clone(),
            train_envs.clone(),
            ood_envs.clone(),
            cross_dataset.clone(),
        ),
    };
    if train_ids.is_empty() {
        return Err(Error::Invalid("no training environments".into()));
    }
    let spec_of = |id: EnvId| {
        dataset
            .env_specs()
            .iter()
            .find(|e| e.env_id == id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("environment {id} not in dataset")))
    };
    let train_envs = train_ids.iter().map(|&id| spec_of(id)).collect::<Result<Vec<_>>>()?;
    for &id in &ood_ids {
        spec_of(id)?;
    }

    let split = make_split(&dataset, &dataset, fractions, derive_seed(seed, streams::SPLIT))?;
    let validation = EvalPool {
        dataset: dataset.clone(),
        classes: split.validation_classes.clone(),
        envs: train_ids.clone(),
    };
    let conventional = EvalPool {
        dataset: dataset.clone(),
        classes: split.novel_classes.clone(),
        envs: train_ids,
    };
    let cross_domain = match cross {
        Some(other) => {
            let cross_split = make_split(&dataset, &other, fractions, derive_seed(seed, streams::SPLIT))?;
            EvalPool {
                envs: other.env_ids(),
                dataset: other,
                classes: cross_split.novel_classes,
            }
        }
        None => {
            if ood_ids.is_empty() {
                return Err(Error::Invalid(
                    "cross-domain setting needs a held-out environment or dataset".into(),
                ));
            }
            EvalPool {
                dataset,
                classes: split.novel_classes.clone(),
                envs: ood_ids,
            }
        }
    };
    Ok(Prepared {
        split,
        train_envs,
        validation,
        conventional,
        cross_domain,
    })
}

/// Query accuracies of `params` adapted to each task.
pub fn evaluate(model: &Mlp, params: &MlpParams, tasks: &[Task], cfg: &MetaConfig) -> Result<Vec<f64>> {
    tasks
        .par_iter()
        .map(|t| adapt_and_eval(model, params.tensors(), t, cfg.alpha, cfg.inner_steps))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub stats: StepStats,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation accuracy.
    pub best: MlpParams,
    pub best_step: u64,
    pub best_val_accuracy: f64,
    pub last: MlpParams,
    pub curve: Vec<CurvePoint>,
}

/// Everything needed to meta-train one method.
pub struct TrainSpec<'a> {
    pub model: &'a Mlp,
    pub init: MlpParams,
    pub sampler: &'a EpisodeSampler,
    pub validation: &'a [Task],
    pub meta: &'a MetaConfig,
    pub meta_steps: usize,
    pub eval_interval: usize,
    pub train_seed: u64,
}

/// Meta-trains for `meta_steps`, evaluating on the validation tasks at step
/// 0 and every `eval_interval` steps (and at the end), keeping the
/// checkpoint with the highest validation accuracy (earliest on ties).
pub fn train(spec: TrainSpec<'_>) -> Result<TrainOutcome> {
    let TrainSpec {
        model,
        init,
        sampler,
        validation,
        meta,
        meta_steps,
        eval_interval,
        train_seed,
    } = spec;
    meta.validate()?;
    let val_acc = |p: &MlpParams| -> Result<f64> {
        let accs = evaluate(model, p, validation, meta)?;
        Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
    };
    let mut best = init.clone();
    let mut best_step = 0;
    let mut best_val_accuracy = val_acc(&init)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        stats: StepStats::default(),
        val_accuracy: Some(best_val_accuracy),
    }];
    let mut state = MetaState::new(init.into_tensors(), train_seed);
    for step in 1..=meta_steps {
        let (next, stats) = meta_step(&state, model, sampler, meta)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("parameters after meta-step {step}")));
        }
        state = next;
        let mut val_accuracy = None;
        if (eval_interval > 0 && step % eval_interval == 0) || step == meta_steps {
            let params = MlpParams::from_tensors(model.clone(), state.params.clone())?;
            let acc = val_acc(&params)?;
            if acc > best_val_accuracy {
                best_val_accuracy = acc;
                best = params;
                best_step = step as u64;
            }
            val_accuracy = Some(acc);
        }
        curve.push(CurvePoint {
            step: step as u64,
            stats,
            val_accuracy,
        });
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_accuracy,
        last: MlpParams::from_tensors(model.clone(), state.params)?,
        curve,
    })
}

/// Per-run hyperparameters for one method and shot configuration.
pub fn method_config(cfg: &BenchmarkConfig, algo: Algo, n: usize, k: usize, envs: &[EnvSpec]) -> MetaConfig {
    MetaConfig {
        algo,
        n,
        k,
        eta: if algo == Algo::Reptile {
            cfg.reptile_eta
        } else {
            cfg.meta.eta
        },
        envs: envs.to_vec(),
        ..cfg.meta.clone()
    }
}

pub fn layer_sizes(input: usize, hidden: &[usize], way: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(way))
        .collect()
}

/// Episode accuracies of one trained model, per evaluation setting.
type SettingAccuracies = Vec<(Setting, Vec<f64>)>;

/// Trains every method on every shot configuration and evaluates the
/// selected checkpoints on novel classes in both settings. Deterministic
/// per seed unless `record_timing` is set.
pub fn run_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<MetricsReport> {
    if cfg.methods.is_empty() || cfg.shots.is_empty() {
        return Err(Error::Invalid(
            "benchmark needs at least one method and one shot setting".into(),
        ));
    }
    if cfg.test_episodes < 2 {
        return Err(Error::Invalid(
            "need at least 2 test episodes for a confidence interval".into(),
        ));
    }
    let prepared = prepare(&cfg.data, cfg.fractions, seed)?;
    let q = cfg.meta.q;
    let mut shots = cfg.shots.clone();
    shots.sort_unstable();
    shots.dedup();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    // (method index, setting, n, k) -> row, assembled below in roster order
    let mut cells = Vec::new();
    for &(n, k) in &shots {
        let model = Mlp::new(&layer_sizes(prepared.split.base_dataset.feature_dim(), &cfg.hidden, n))?;
        let init_seed = derive_seed(seed, streams::INIT);
        let validation =
            prepared
                .validation
                .episodes(n, k, q, cfg.val_episodes, derive_seed(seed, streams::VALIDATION))?;
        let tests: Vec<(Setting, Vec<Task>)> = Setting::ALL
            .iter()
            .map(|&s| {
                Ok((
                    s,
                    prepared
                        .pool(s)
                        .episodes(n, k, q, cfg.test_episodes, derive_seed(seed, streams::TEST))?,
                ))
            })
            .collect::<Result<_>>()?;
        let sampler = prepared.train_sampler(n, k, q);

        let results: Vec<(usize, Result<SettingAccuracies>, f64)> = cfg
            .methods
            .par_iter()
            .enumerate()
            .map(|(mi, &algo)| {
                let start = Instant::now();
                let meta = method_config(cfg, algo, n, k, &prepared.train_envs);
                let run = || -> Result<SettingAccuracies> {
                    let outcome = train(TrainSpec {
                        model: &model,
                        init: init_mlp(model.sizes(), init_seed)?,
                        sampler: &sampler,
                        validation: &validation,
                        meta: &meta,
                        meta_steps: cfg.meta_steps,
                        eval_interval: cfg.eval_interval,
                        train_seed: derive_seed(seed, streams::TRAIN),
                    })?;
                    tests
                        .iter()
                        .map(|(s, tasks)| Ok((*s, evaluate(&model, &outcome.best, tasks, &meta)?)))
                        .collect()
                };
                let res = run();
                (mi, res, start.elapsed().as_secs_f64())
            })
            .collect();

        for (mi, res, secs) in results {
            let algo = cfg.methods[mi];
            match res {
                Ok(per_setting) => {
                    for (setting, accs) in per_setting {
                        let (mean_pct, ci95_pct) = mean_ci95(&accs)?;
                        cells.push((
                            mi,
                            setting,
                            n,
                            k,
                            MetricsRow {
                                method: algo.name().to_string(),
                                setting: setting.name().to_string(),
                                n,
                                k,
                                mean_pct,
                                ci95_pct,
                                episodes: accs.len(),
                                wall_time_s: if cfg.record_timing { secs } else { 0.0 },
                            },
                        ));
                    }
                }
                Err(e) => failures.push(Failure {
                    method: algo.name().to_string(),
                    message: format!("{n}-way {k}-shot: {e}"),
                }),
            }
        }
    }
    cells.sort_by_key(|c| (c.0, c.1, c.2, c.3));
    rows.extend(cells.into_iter().map(|c| c.4));
    Ok(MetricsReport {
        version: 1,
        seed,
        rows,
        failures,
    })
}
