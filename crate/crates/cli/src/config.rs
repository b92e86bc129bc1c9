//! Flat `key = value` run configuration.
//!
//! Values are resolved with the precedence flag > config file >
//! `METAROBUST_SEED` (seed only) > built-in default, then parsed and
//! checked against the constraint of each key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use metarobust_core::harness::{Format, Setting};
use metarobust_core::meta::{Algo, MetaConfig};
use metarobust_core::tasks::SyntheticConfig;

pub const SEED_ENV: &str = "METAROBUST_SEED";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kind {
    /// Float strictly greater than the bound.
    FloatAbove(f64),
    /// Float at least the bound.
    FloatAtLeast(f64),
    /// Integer at least the bound.
    Int(u64),
    Choice(&'static [&'static str]),
    /// Comma-separated floats in [0, 1].
    Probs,
    /// Comma-separated positive integers.
    Sizes,
    /// Comma-separated integers, possibly empty.
    Ids,
    /// Comma-separated `NxK` pairs.
    Shots,
    Methods,
    Bool,
    Path,
}

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

impl KeySpec {
    pub fn constraint(&self) -> String {
        match self.kind {
            Kind::FloatAbove(b) => format!("float > {b}"),
            Kind::FloatAtLeast(b) => format!("float >= {b}"),
            Kind::Int(b) => format!("integer >= {b}"),
            Kind::Choice(cs) => format!("one of {}", cs.join(", ")),
            Kind::Probs => "comma-separated probabilities in [0, 1]".into(),
            Kind::Sizes => "comma-separated positive integers".into(),
            Kind::Ids => "comma-separated integers, empty for automatic".into(),
            Kind::Shots => "comma-separated NxK pairs".into(),
            Kind::Methods => "comma-separated subset of maml, fomaml, reptile, rml".into(),
            Kind::Bool => "true or false".into(),
            Kind::Path => "file path, empty for none".into(),
        }
    }

    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }
}

const ALGOS: &[&str] = &["maml", "fomaml", "reptile", "rml"];

pub const KEYS: &[KeySpec] = &[
    KeySpec {
        name: "seed",
        default: "0",
        kind: Kind::Int(0),
        help: "master random seed",
    },
    KeySpec {
        name: "alpha",
        default: "0.05",
        kind: Kind::FloatAbove(0.0),
        help: "inner-loop learning rate",
    },
    KeySpec {
        name: "eta",
        default: "0.01",
        kind: Kind::FloatAbove(0.0),
        help: "outer learning rate",
    },
    KeySpec {
        name: "lambda",
        default: "1.0",
        kind: Kind::FloatAtLeast(0.0),
        help: "invariance penalty weight (rml)",
    },
    KeySpec {
        name: "inner_steps",
        default: "3",
        kind: Kind::Int(1),
        help: "gradient steps of inner adaptation",
    },
    KeySpec {
        name: "n",
        default: "5",
        kind: Kind::Int(2),
        help: "classes per episode",
    },
    KeySpec {
        name: "k",
        default: "1",
        kind: Kind::Int(1),
        help: "support samples per class",
    },
    KeySpec {
        name: "q",
        default: "15",
        kind: Kind::Int(1),
        help: "query samples per class",
    },
    KeySpec {
        name: "meta_batch",
        default: "4",
        kind: Kind::Int(1),
        help: "tasks per environment per meta-step",
    },
    KeySpec {
        name: "algo",
        default: "rml",
        kind: Kind::Choice(ALGOS),
        help: "algorithm for train",
    },
    KeySpec {
        name: "reptile_eta",
        default: "1.0",
        kind: Kind::FloatAbove(0.0),
        help: "interpolation rate of reptile",
    },
    KeySpec {
        name: "hidden",
        default: "32,32",
        kind: Kind::Sizes,
        help: "hidden layer widths",
    },
    KeySpec {
        name: "meta_steps",
        default: "2000",
        kind: Kind::Int(0),
        help: "outer updates per training run",
    },
    KeySpec {
        name: "eval_interval",
        default: "50",
        kind: Kind::Int(1),
        help: "meta-steps between validations",
    },
    KeySpec {
        name: "val_episodes",
        default: "100",
        kind: Kind::Int(1),
        help: "validation episodes per check",
    },
    KeySpec {
        name: "test_episodes",
        default: "600",
        kind: Kind::Int(2),
        help: "evaluation episodes",
    },
    KeySpec {
        name: "n_classes",
        default: "20",
        kind: Kind::Int(3),
        help: "synthetic classes",
    },
    KeySpec {
        name: "per_class_per_env",
        default: "40",
        kind: Kind::Int(2),
        help: "synthetic samples per class and environment",
    },
    KeySpec {
        name: "d_inv",
        default: "5",
        kind: Kind::Int(1),
        help: "invariant feature dimension",
    },
    KeySpec {
        name: "d_sp",
        default: "5",
        kind: Kind::Int(1),
        help: "spurious feature dimension",
    },
    KeySpec {
        name: "sigma_inv",
        default: "0.5",
        kind: Kind::FloatAbove(0.0),
        help: "invariant feature noise",
    },
    KeySpec {
        name: "sigma_sp",
        default: "0.1",
        kind: Kind::FloatAbove(0.0),
        help: "spurious feature noise (< sigma_inv)",
    },
    KeySpec {
        name: "env_probs",
        default: "0.9,0.8,0.1",
        kind: Kind::Probs,
        help: "spurious agreement per synthetic environment; the last is held out",
    },
    KeySpec {
        name: "fractions",
        default: "0.5,0.25,0.25",
        kind: Kind::Probs,
        help: "base/validation/novel class fractions (sum 1)",
    },
    KeySpec {
        name: "data",
        default: "",
        kind: Kind::Path,
        help: "dataset CSV used instead of synthetic data",
    },
    KeySpec {
        name: "cross_data",
        default: "",
        kind: Kind::Path,
        help: "second dataset CSV for the cross-domain setting",
    },
    KeySpec {
        name: "train_envs",
        default: "",
        kind: Kind::Ids,
        help: "training environments of a loaded dataset (default all but the last)",
    },
    KeySpec {
        name: "ood_envs",
        default: "",
        kind: Kind::Ids,
        help: "held-out environments of a loaded dataset (default the last)",
    },
    KeySpec {
        name: "setting",
        default: "conventional",
        kind: Kind::Choice(&["conventional", "cross-domain"]),
        help: "evaluation setting for eval",
    },
    KeySpec {
        name: "methods",
        default: "maml,fomaml,reptile,rml",
        kind: Kind::Methods,
        help: "benchmark roster",
    },
    KeySpec {
        name: "shots",
        default: "5x1",
        kind: Kind::Shots,
        help: "benchmark N-way K-shot settings",
    },
    KeySpec {
        name: "out",
        default: "",
        kind: Kind::Path,
        help: "output file (CSV, checkpoint or report)",
    },
    KeySpec {
        name: "curve",
        default: "",
        kind: Kind::Path,
        help: "training-curve CSV (default <out>.curve.csv)",
    },
    KeySpec {
        name: "checkpoint",
        default: "",
        kind: Kind::Path,
        help: "checkpoint to evaluate",
    },
    KeySpec {
        name: "format",
        default: "json",
        kind: Kind::Choice(&["text", "csv", "json"]),
        help: "benchmark report format",
    },
    KeySpec {
        name: "record_timing",
        default: "false",
        kind: Kind::Bool,
        help: "store wall time in reports (breaks byte-identical reruns)",
    },
    KeySpec {
        name: "workers",
        default: "0",
        kind: Kind::Int(0),
        help: "worker threads, 0 for all cores",
    },
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Default,
    Env,
    File { path: PathBuf, line: usize },
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::Env => write!(f, "environment variable {SEED_ENV}"),
            Source::File { path, line } => write!(f, "{}:{line}", path.display()),
            Source::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Source },
    #[error("{origin}: `{key}`: {msg}")]
    Value { key: String, origin: Source, msg: String },
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("cannot read config {path}: {err}")]
    Io { path: String, err: std::io::Error },
}

/// Raw values by key with their origin.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
        let spec = key_spec(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
            origin: source.clone(),
        })?;
        self.values.insert(spec.name, (value.trim().to_string(), source));
        Ok(())
    }

    pub fn read_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Io {
            path: path.display().to_string(),
            err,
        })?;
        self.read_str(&text, path)
    }

    pub fn read_str(&mut self, text: &str, path: &Path) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: path.display().to_string(),
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let key = key.trim();
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(ConfigError::Syntax {
                    path: path.display().to_string(),
                    line,
                    msg: format!("`{key}` already set on line {first}"),
                });
            }
            self.set(
                key,
                value,
                Source::File {
                    path: path.to_path_buf(),
                    line,
                },
            )?;
        }
        Ok(())
    }

    fn get(&self, key: &'static str) -> (&str, Source) {
        match self.values.get(key) {
            Some((v, s)) => (v.as_str(), s.clone()),
            None => (key_spec(key).expect("known key").default, Source::Default),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    /// Shared hyperparameters; `envs` is filled in once data is prepared.
    pub meta: MetaConfig,
    pub reptile_eta: f64,
    pub hidden: Vec<usize>,
    pub meta_steps: usize,
    pub eval_interval: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub synthetic: SyntheticConfig,
    pub fractions: [f64; 3],
    pub data: Option<PathBuf>,
    pub cross_data: Option<PathBuf>,
    pub train_envs: Vec<u32>,
    pub ood_envs: Vec<u32>,
    pub setting: Setting,
    pub methods: Vec<Algo>,
    pub shots: Vec<(usize, usize)>,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub format: Format,
    pub record_timing: bool,
    pub workers: usize,
}

struct Resolver<'a> {
    raw: &'a RawConfig,
}

impl Resolver<'_> {
    fn err(&self, key: &'static str, msg: String) -> ConfigError {
        ConfigError::Value {
            key: key.to_string(),
            origin: self.raw.get(key).1,
            msg,
        }
    }

    fn list<T>(&self, key: &'static str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, ConfigError> {
        let (v, _) = self.raw.get(key);
        let spec = key_spec(key).unwrap();
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse(s).ok_or_else(|| self.err(key, format!("expected {}, got `{v}`", spec.constraint()))))
            .collect()
    }

    fn float(&self, key: &'static str) -> Result<f64, ConfigError> {
        let (v, _) = self.raw.get(key);
        let x: f64 = v
            .parse()
            .map_err(|_| self.err(key, format!("expected a number, got `{v}`")))?;
        let ok = match key_spec(key).unwrap().kind {
            Kind::FloatAbove(b) => x > b,
            Kind::FloatAtLeast(b) => x >= b,
            _ => true,
        };
        if !ok || !x.is_finite() {
            return Err(self.err(
                key,
                format!("must be a finite {}, got {v}", key_spec(key).unwrap().constraint()),
            ));
        }
        Ok(x)
    }

    fn int(&self, key: &'static str) -> Result<usize, ConfigError> {
        let (v, _) = self.raw.get(key);
        let x: u64 = v
            .parse()
            .map_err(|_| self.err(key, format!("expected a non-negative integer, got `{v}`")))?;
        if let Kind::Int(min) = key_spec(key).unwrap().kind {
            if x < min {
                return Err(self.err(key, format!("must be an integer >= {min}, got {v}")));
            }
        }
        usize::try_from(x).map_err(|_| self.err(key, format!("{v} is too large")))
    }

    fn choice(&self, key: &'static str) -> Result<&str, ConfigError> {
        let (v, _) = self.raw.get(key);
        let Kind::Choice(cs) = key_spec(key).unwrap().kind else {
            unreachable!()
        };
        if cs.contains(&v) {
            Ok(v)
        } else {
            Err(self.err(key, format!("expected one of {}, got `{v}`", cs.join(", "))))
        }
    }

    fn path(&self, key: &'static str) -> Option<PathBuf> {
        let (v, _) = self.raw.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

impl RunConfig {
    pub fn resolve(raw: &RawConfig) -> Result<Self, ConfigError> {
        let r = Resolver { raw };
        let seed_str = raw.get("seed").0;
        let seed: u64 = seed_str
            .parse()
            .map_err(|_| r.err("seed", format!("expected a non-negative integer, got `{seed_str}`")))?;

        let probs = |key| r.list(key, |s| s.parse::<f64>().ok().filter(|p| (0.0..=1.0).contains(p)));
        let env_probs = probs("env_probs")?;
        if env_probs.len() < 2 {
            return Err(r.err(
                "env_probs",
                "need at least one training and one held-out environment".into(),
            ));
        }
        let fr = probs("fractions")?;
        let fractions: [f64; 3] = fr
            .clone()
            .try_into()
            .map_err(|_| r.err("fractions", format!("expected 3 values, got {}", fr.len())))?;
        if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(r.err("fractions", "must sum to 1".into()));
        }

        let hidden = r.list("hidden", |s| s.parse::<usize>().ok().filter(|&h| h > 0))?;
        let methods = r.list("methods", |s| s.parse::<Algo>().ok())?;
        if methods.is_empty() {
            return Err(r.err("methods", "need at least one method".into()));
        }
        let shots = r.list("shots", |s| {
            let (n, k) = s.split_once(['x', 'X'])?;
            let (n, k) = (n.trim().parse::<usize>().ok()?, k.trim().parse::<usize>().ok()?);
            (n >= 2 && k >= 1).then_some((n, k))
        })?;
        if shots.is_empty() {
            return Err(r.err("shots", "need at least one NxK pair".into()));
        }
        let ids = |key| r.list(key, |s| s.parse::<u32>().ok());

        let meta = MetaConfig {
            alpha: r.float("alpha")?,
            eta: r.float("eta")?,
            lambda: r.float("lambda")?,
            inner_steps: r.int("inner_steps")?,
            n: r.int("n")?,
            k: r.int("k")?,
            q: r.int("q")?,
            meta_batch: r.int("meta_batch")?,
            algo: r.choice("algo")?.parse().expect("listed algorithm"),
            envs: Vec::new(),
        };
        let synthetic = SyntheticConfig {
            n_classes: r.int("n_classes")?,
            per_class_per_env: r.int("per_class_per_env")?,
            d_inv: r.int("d_inv")?,
            d_sp: r.int("d_sp")?,
            sigma_inv: r.float("sigma_inv")?,
            sigma_sp: r.float("sigma_sp")?,
            env_probs,
        };
        if synthetic.sigma_sp >= synthetic.sigma_inv {
            return Err(r.err("sigma_sp", "must be smaller than sigma_inv".into()));
        }
        let max_k = shots.iter().map(|s| s.1).max().unwrap_or(1).max(meta.k);
        let data = r.path("data");
        if data.is_none() && synthetic.per_class_per_env < max_k + meta.q {
            return Err(r.err(
                "per_class_per_env",
                format!("must be at least k + q = {}", max_k + meta.q),
            ));
        }

        Ok(RunConfig {
            seed,
            meta,
            reptile_eta: r.float("reptile_eta")?,
            hidden,
            meta_steps: r.int("meta_steps")?,
            eval_interval: r.int("eval_interval")?,
            val_episodes: r.int("val_episodes")?,
            test_episodes: r.int("test_episodes")?,
            synthetic,
            fractions,
            data,
            cross_data: r.path("cross_data"),
            train_envs: ids("train_envs")?,
            ood_envs: ids("ood_envs")?,
            setting: r.choice("setting")?.parse().expect("listed setting"),
            methods,
            shots,
            out: r.path("out"),
            curve: r.path("curve"),
            checkpoint: r.path("checkpoint"),
            format: r.choice("format")?.parse().expect("listed format"),
            record_timing: match raw.get("record_timing").0 {
                "true" => true,
                "false" => false,
                v => return Err(r.err("record_timing", format!("expected true or false, got `{v}`"))),
            },
            workers: r.int("workers")?,
        })
    }

    /// Fails with a config error naming `key` unless the path is set.
    pub fn require(&self, key: &'static str, value: &Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        value.clone().ok_or_else(|| ConfigError::Value {
            key: key.to_string(),
            origin: Source::Default,
            msg: "required by this subcommand".into(),
        })
    }
}

/// Builds the raw configuration from its sources, lowest precedence first.
pub fn gather(
    env_seed: Option<String>,
    file: Option<&Path>,
    flags: &[(String, String)],
) -> Result<RawConfig, ConfigError> {
    let mut raw = RawConfig::default();
    if let Some(seed) = env_seed {
        raw.set("seed", &seed, Source::Env)?;
    }
    if let Some(path) = file {
        raw.read_file(path)?;
    }
    for (key, value) in flags {
        raw.set(key, value, Source::Flag)?;
    }
    Ok(raw)
}

/// One line per key: name, default and constraint.
pub fn keys_help() -> String {
    let width = KEYS
        .iter()
        .map(|k| k.name.len() + k.default.len() + 3)
        .max()
        .unwrap_or(0);
    let mut s = String::from("Config keys (`key = value` in --config files, or --key VALUE flags):\n");
    for k in KEYS {
        let head = format!("{} = {}", k.name, k.default);
        s.push_str(&format!("  {head:<width$}  {} [{}]\n", k.help, k.constraint()));
    }
    s
}
