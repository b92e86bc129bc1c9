//! Multi-environment labelled datasets and N-way K-shot episodes.
//!
//! The synthetic generator is a small structural-equation model: each class
//! has an invariant prototype and a spurious prototype. The invariant block
//! always follows the class; the spurious block follows it only with an
//! environment-specific probability, and is much less noisy, so it is the
//! tempting shortcut that breaks when the environment changes.

mod episode;

pub use episode::{make_split, sample_episode, Episode, EpisodeSampler, SplitSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type EnvId = u32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub env_id: EnvId,
    /// Probability the spurious block agrees with the label; unknown for
    /// data loaded from CSV.
    pub spurious_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: ClassId,
    pub env_id: EnvId,
}

/// Prototypes drawn by [`gen_synthetic`], one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub invariant: Vec<Vec<f64>>,
    pub spurious: Vec<Vec<f64>>,
}

/// An immutable labelled corpus tagged by environment.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_ids: Vec<ClassId>,
    env_specs: Vec<EnvSpec>,
    feature_dim: usize,
    cells: BTreeMap<(ClassId, EnvId), Vec<usize>>,
    prototypes: Option<Prototypes>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, env_specs: Vec<EnvSpec>) -> Result<Self> {
        let feature_dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
        if feature_dim == 0 {
            return Err(Error::Invalid("dataset needs samples with at least one feature".into()));
        }
        let envs: BTreeSet<EnvId> = env_specs.iter().map(|e| e.env_id).collect();
        if envs.len() != env_specs.len() {
            return Err(Error::Invalid("duplicate environment ids".into()));
        }
        for e in &env_specs {
            if let Some(p) = e.spurious_prob {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Invalid(format!(
                        "env {}: probability {p} outside [0, 1]",
                        e.env_id
                    )));
                }
            }
        }
        let mut cells: BTreeMap<(ClassId, EnvId), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Invalid(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if !envs.contains(&s.env_id) {
                return Err(Error::Invalid(format!("sample {i} has unknown env {}", s.env_id)));
            }
            cells.entry((s.class_id, s.env_id)).or_default().push(i);
        }
        let class_ids: BTreeSet<ClassId> = samples.iter().map(|s| s.class_id).collect();
        Ok(Dataset {
            samples,
            class_ids: class_ids.into_iter().collect(),
            env_specs,
            feature_dim,
            cells,
            prototypes: None,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sorted distinct class ids.
    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn env_specs(&self) -> &[EnvSpec] {
        &self.env_specs
    }

    pub fn env_ids(&self) -> Vec<EnvId> {
        self.env_specs.iter().map(|e| e.env_id).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn prototypes(&self) -> Option<&Prototypes> {
        self.prototypes.as_ref()
    }

    /// Sample indices of one (class, environment) cell, in dataset order.
    pub fn cell(&self, class: ClassId, env: EnvId) -> &[usize] {
        self.cells.get(&(class, env)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            write!(line, "{},{}", s.class_id, s.env_id).unwrap();
            for v in &s.features {
                // shortest representation that parses back to the same bits
                write!(line, ",{v}").unwrap();
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub per_class_per_env: usize,
    pub d_inv: usize,
    pub d_sp: usize,
    pub sigma_inv: f64,
    pub sigma_sp: f64,
    /// Spurious agreement probability per environment; env ids are the
    /// positions in this list.
    pub env_probs: Vec<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 20,
            per_class_per_env: 40,
            d_inv: 5,
            d_sp: 5,
            sigma_inv: 0.5,
            sigma_sp: 0.1,
            env_probs: vec![0.9, 0.8, 0.1],
        }
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset from the invariant/spurious structural model.
///
/// Every class gets an invariant prototype and a spurious prototype on the
/// unit sphere of its block. A sample of class `y` in environment `e` is
/// `[mu_y + N(0, sigma_inv^2)] ++ [nu_c + N(0, sigma_sp^2)]`, where `c = y`
/// with probability `p_e` and otherwise a uniformly drawn other class.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let bad = |m: String| Err(Error::Invalid(m));
    if cfg.d_inv == 0 || cfg.d_sp == 0 {
        return bad(format!(
            "feature blocks must be nonempty (d_inv={}, d_sp={})",
            cfg.d_inv, cfg.d_sp
        ));
    }
    if cfg.n_classes < 2 {
        return bad(format!("need at least 2 classes, got {}", cfg.n_classes));
    }
    if cfg.per_class_per_env == 0 {
        return bad("per_class_per_env must be positive".into());
    }
    if !(cfg.sigma_sp > 0.0 && cfg.sigma_inv > cfg.sigma_sp) {
        return bad(format!(
            "need sigma_inv > sigma_sp > 0 (got {} and {})",
            cfg.sigma_inv, cfg.sigma_sp
        ));
    }
    if cfg.env_probs.is_empty() {
        return bad("need at least one environment".into());
    }
    if let Some(p) = cfg.env_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return bad(format!("spurious probability {p} outside [0, 1]"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invariant: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| unit_sphere(&mut rng, cfg.d_inv)).collect();
    let spurious: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| unit_sphere(&mut rng, cfg.d_sp)).collect();

    let mut samples = Vec::with_capacity(cfg.env_probs.len() * cfg.n_classes * cfg.per_class_per_env);
    for (env, &p) in cfg.env_probs.iter().enumerate() {
        for (y, inv) in invariant.iter().enumerate() {
            for _ in 0..cfg.per_class_per_env {
                let mut features = Vec::with_capacity(cfg.d_inv + cfg.d_sp);
                for &m in inv {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(m + cfg.sigma_inv * z);
                }
                let agree = rng.random::<f64>() < p;
                let source = if agree {
                    y
                } else {
                    let r = rng.random_range(0..cfg.n_classes - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                };
                for &m in &spurious[source] {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(m + cfg.sigma_sp * z);
                }
                samples.push(Sample {
                    features,
                    class_id: y as ClassId,
                    env_id: env as EnvId,
                });
            }
        }
    }
    let envs = cfg
        .env_probs
        .iter()
        .enumerate()
        .map(|(i, &p)| EnvSpec {
            env_id: i as EnvId,
            spurious_prob: Some(p),
        })
        .collect();
    let mut ds = Dataset::new(samples, envs)?;
    ds.prototypes = Some(Prototypes { invariant, spurious });
    Ok(ds)
}

/// Parses `class_id,env_id,f1,...,fd` rows (no header).
pub fn read_csv(r: impl Read, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(parse_err(
                lineno,
                format!("expected class,env and features, got {} fields", fields.len()),
            ));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(parse_err(
                    lineno,
                    format!("ragged row: {} features, expected {}", fields.len() - 2, w - 2),
                ))
            }
            _ => {}
        }
        let class_id = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("class id {:?} is not a nonnegative integer", fields[0])))?;
        let env_id = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("env id {:?} is not a nonnegative integer", fields[1])))?;
        let features = fields[2..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(lineno, format!("feature {f:?} is not a finite number")))
            })
            .collect::<Result<_>>()?;
        samples.push(Sample {
            features,
            class_id,
            env_id,
        });
    }
    if samples.is_empty() {
        return Err(parse_err(1, "empty file".into()));
    }
    let envs: BTreeSet<EnvId> = samples.iter().map(|s| s.env_id).collect();
    let specs = envs
        .into_iter()
        .map(|env_id| EnvSpec {
            env_id,
            spurious_prob: None,
        })
        .collect();
    Dataset::new(samples, specs)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path)
}
