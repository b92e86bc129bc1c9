use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use metarobust_core::autodiff::Primitive;
use metarobust_core::harness::{
    self, derive_seed, emit_table, evaluate, layer_sizes, mean_ci95, method_config, prepare, run_benchmark, streams,
    BenchmarkConfig, CurvePoint, DataSource, Prepared, TrainSpec,
};
use metarobust_core::nn::{init_mlp, Mlp, MlpParams};
use metarobust_core::tasks::{gen_synthetic, load_csv, Dataset};
use metarobust_core::verify::run_suite;
use metarobust_core::Error;

use crate::config::{ConfigError, RunConfig, Source};
use crate::Failure;

fn config_error(key: &str, msg: String) -> Failure {
    Failure::Config(
        ConfigError::Value {
            key: key.to_string(),
            origin: Source::Default,
            msg,
        }
        .to_string(),
    )
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn load_dataset(key: &str, path: &Path) -> Result<Arc<Dataset>, Failure> {
    if !path.exists() {
        return Err(config_error(key, format!("{} does not exist", path.display())));
    }
    Ok(Arc::new(load_csv(path)?))
}

fn data_source(cfg: &RunConfig) -> Result<DataSource, Failure> {
    let Some(path) = &cfg.data else {
        return Ok(DataSource::Synthetic(cfg.synthetic.clone()));
    };
    let dataset = load_dataset("data", path)?;
    let cross_dataset = cfg
        .cross_data
        .as_deref()
        .map(|p| load_dataset("cross_data", p))
        .transpose()?;
    let ids = dataset.env_ids();
    let train_envs = if cfg.train_envs.is_empty() {
        if ids.len() < 2 && cross_dataset.is_none() {
            return Err(config_error(
                "train_envs",
                format!(
                    "{} has a single environment; set cross_data or train_envs/ood_envs",
                    path.display()
                ),
            ));
        }
        let keep = if cross_dataset.is_some() {
            ids.len()
        } else {
            ids.len() - 1
        };
        ids[..keep].to_vec()
    } else {
        cfg.train_envs.clone()
    };
    let ood_envs = if !cfg.ood_envs.is_empty() {
        cfg.ood_envs.clone()
    } else if cross_dataset.is_some() {
        Vec::new()
    } else {
        ids.iter().copied().filter(|e| !train_envs.contains(e)).collect()
    };
    Ok(DataSource::Loaded {
        dataset,
        train_envs,
        ood_envs,
        cross_dataset,
    })
}

fn benchmark_config(cfg: &RunConfig) -> Result<BenchmarkConfig, Failure> {
    Ok(BenchmarkConfig {
        data: data_source(cfg)?,
        methods: cfg.methods.clone(),
        shots: cfg.shots.clone(),
        meta: cfg.meta.clone(),
        reptile_eta: cfg.reptile_eta,
        hidden: cfg.hidden.clone(),
        meta_steps: cfg.meta_steps,
        eval_interval: cfg.eval_interval,
        val_episodes: cfg.val_episodes,
        test_episodes: cfg.test_episodes,
        fractions: cfg.fractions,
        record_timing: cfg.record_timing,
    })
}

fn prepared(cfg: &RunConfig) -> Result<(BenchmarkConfig, Prepared), Failure> {
    let bench = benchmark_config(cfg)?;
    let p = prepare(&bench.data, bench.fractions, cfg.seed)?;
    Ok((bench, p))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.require("out", &cfg.out)?;
    let data = gen_synthetic(&cfg.synthetic, derive_seed(cfg.seed, streams::DATA))?;
    data.save_csv(&out)?;
    eprintln!("wrote {} samples to {}", data.samples().len(), out.display());
    Ok(())
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), Failure> {
    let mut w = create(path)?;
    let mut body = String::from("step,train_loss,val_accuracy,mean_penalty\n");
    for p in curve {
        let val = p.val_accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
        if p.step == 0 {
            body.push_str(&format!("0,,{val},\n"));
        } else {
            body.push_str(&format!(
                "{},{:?},{val},{:?}\n",
                p.step, p.stats.mean_val_loss, p.stats.mean_penalty
            ));
        }
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(path, e))
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.require("out", &cfg.out)?;
    let curve_path = cfg.curve.clone().unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".curve.csv");
        PathBuf::from(s)
    });
    let (bench, p) = prepared(cfg)?;
    let (n, k, q) = (cfg.meta.n, cfg.meta.k, cfg.meta.q);
    let model = Mlp::new(&layer_sizes(p.split.base_dataset.feature_dim(), &cfg.hidden, n))?;
    let meta = method_config(&bench, cfg.meta.algo, n, k, &p.train_envs);
    let validation = p
        .validation
        .episodes(n, k, q, cfg.val_episodes, derive_seed(cfg.seed, streams::VALIDATION))?;
    let sampler = p.train_sampler(n, k, q);
    let start = Instant::now();
    let outcome = harness::train(TrainSpec {
        model: &model,
        init: init_mlp(model.sizes(), derive_seed(cfg.seed, streams::INIT))?,
        sampler: &sampler,
        validation: &validation,
        meta: &meta,
        meta_steps: cfg.meta_steps,
        eval_interval: cfg.eval_interval,
        train_seed: derive_seed(cfg.seed, streams::TRAIN),
    })?;
    outcome.best.save(&out)?;
    write_curve(&curve_path, &outcome.curve)?;
    eprintln!(
        "trained {} for {} meta-steps in {:.1}s",
        cfg.meta.algo,
        cfg.meta_steps,
        start.elapsed().as_secs_f64()
    );
    println!(
        "{}: best validation accuracy {:.2}% at step {}; checkpoint {}, curve {}",
        cfg.meta.algo,
        100.0 * outcome.best_val_accuracy,
        outcome.best_step,
        out.display(),
        curve_path.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let path = cfg.require("checkpoint", &cfg.checkpoint)?;
    if !path.exists() {
        return Err(config_error("checkpoint", format!("{} does not exist", path.display())));
    }
    let params = MlpParams::load(&path)?;
    let (bench, p) = prepared(cfg)?;
    let (n, k, q) = (cfg.meta.n, cfg.meta.k, cfg.meta.q);
    let model = params.model().clone();
    let dim = p.split.base_dataset.feature_dim();
    if model.input_dim() != dim || model.output_dim() != n {
        return Err(Failure::Runtime(format!(
            "checkpoint maps {} features to {} classes, but the data has {dim} features and n = {n}",
            model.input_dim(),
            model.output_dim()
        )));
    }
    let meta = method_config(&bench, cfg.meta.algo, n, k, &p.train_envs);
    let tasks = p
        .pool(cfg.setting)
        .episodes(n, k, q, cfg.test_episodes, derive_seed(cfg.seed, streams::TEST))?;
    let accs = evaluate(&model, &params, &tasks, &meta)?;
    let (mean, ci) = mean_ci95(&accs)?;
    println!(
        "{} {n}-way {k}-shot: {mean:.2} ± {ci:.2} % ({} episodes)",
        cfg.setting,
        accs.len()
    );
    Ok(())
}

pub fn benchmark(cfg: &RunConfig) -> Result<(), Failure> {
    let bench = benchmark_config(cfg)?;
    let start = Instant::now();
    let report = run_benchmark(&bench, cfg.seed)?;
    eprintln!("benchmark finished in {:.1}s", start.elapsed().as_secs_f64());
    for f in &report.failures {
        eprintln!("{} failed: {}", f.method, f.message);
    }
    if report.rows.is_empty() {
        return Err(Failure::Runtime("every method failed".into()));
    }
    let text = emit_table(&report, cfg.format)?;
    match &cfg.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| io_failure(path, e))?;
        }
        None => print!("{text}"),
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} method(s) failed", report.failures.len())))
    }
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<&str>) -> Result<(), Failure> {
    if let Some(name) = fault {
        if !Primitive::NAMES.contains(&name) {
            return Err(Failure::Config(format!(
                "--inject-fault: unknown primitive `{name}` (one of {})",
                Primitive::NAMES.join(", ")
            )));
        }
    }
    let start = Instant::now();
    let results = run_suite(cfg.seed, fault).map_err(|e: Error| Failure::Runtime(e.to_string()))?;
    let mut failed = 0;
    for r in &results {
        failed += !r.pass as usize;
        println!(
            "{} {:<45} max rel err {:.3e} (rtol {:.0e})",
            if r.pass { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.rtol
        );
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        Err(Failure::Runtime(format!("{failed} gradient check(s) failed")))
    } else {
        Ok(())
    }
}
