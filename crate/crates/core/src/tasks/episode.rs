use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassId, Dataset, EnvId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One few-shot task: support set for adaptation, query set for evaluation,
/// all drawn from a single environment.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub env_id: EnvId,
    /// Global class id of each local label.
    pub class_map: Vec<ClassId>,
    /// Dataset indices of the support and query samples.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.class_map.len()
    }
}

/// Draws an N-way episode with K support and Q query samples per class.
///
/// Classes are drawn without replacement and get local labels in draw
/// order; within each class the first K drawn samples are support, the
/// next Q are query.
pub fn sample_episode(
    dataset: &Dataset,
    classes: &[ClassId],
    env_id: EnvId,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Invalid(format!("need N, K, Q >= 1 (got {n}, {k}, {q})")));
    }
    if classes.len() < n {
        return Err(Error::Insufficient(format!(
            "{n}-way episode needs {n} classes, split has {}",
            classes.len()
        )));
    }
    for &c in classes {
        let have = dataset.cell(c, env_id).len();
        if have < k + q {
            return Err(Error::Insufficient(format!(
                "cell (class {c}, env {env_id}) has {have} samples, need {}",
                k + q
            )));
        }
    }

    let d = dataset.feature_dim();
    let mut support_x = Vec::with_capacity(n * k * d);
    let mut query_x = Vec::with_capacity(n * q * d);
    let mut support_y = Vec::with_capacity(n * k);
    let mut query_y = Vec::with_capacity(n * q);
    let mut support_ids = Vec::with_capacity(n * k);
    let mut query_ids = Vec::with_capacity(n * q);
    let mut class_map = Vec::with_capacity(n);

    for (local, ci) in index::sample(rng, classes.len(), n).into_iter().enumerate() {
        let class = classes[ci];
        class_map.push(class);
        let cell = dataset.cell(class, env_id);
        for (j, si) in index::sample(rng, cell.len(), k + q).into_iter().enumerate() {
            let id = cell[si];
            let feats = &dataset.samples()[id].features;
            if j < k {
                support_x.extend_from_slice(feats);
                support_y.push(local);
                support_ids.push(id);
            } else {
                query_x.extend_from_slice(feats);
                query_y.push(local);
                query_ids.push(id);
            }
        }
    }
    Ok(Episode {
        support_x: Tensor::matrix(n * k, d, support_x)?,
        support_y,
        query_x: Tensor::matrix(n * q, d, query_x)?,
        query_y,
        env_id,
        class_map,
        support_ids,
        query_ids,
    })
}

/// Disjoint base / validation / novel class sets plus the datasets they
/// refer to. The setting is conventional iff both handles are the same
/// dataset.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub base_classes: Vec<ClassId>,
    pub validation_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    pub base_dataset: Arc<Dataset>,
    pub eval_dataset: Arc<Dataset>,
}

impl SplitSpec {
    pub fn is_conventional(&self) -> bool {
        Arc::ptr_eq(&self.base_dataset, &self.eval_dataset)
    }

    /// Checks pairwise disjointness of class sets that live in the same
    /// dataset.
    pub fn validate(&self) -> Result<()> {
        let val: BTreeSet<_> = self.validation_classes.iter().collect();
        if let Some(c) = self.novel_classes.iter().find(|c| val.contains(c)) {
            return Err(Error::Invalid(format!("class {c} is both validation and novel")));
        }
        if self.is_conventional() {
            let base: BTreeSet<_> = self.base_classes.iter().collect();
            if let Some(c) = self
                .validation_classes
                .iter()
                .chain(&self.novel_classes)
                .find(|c| base.contains(c))
            {
                return Err(Error::Invalid(format!("class {c} is in base and an evaluation split")));
            }
        }
        Ok(())
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Splits classes into base / validation / novel.
///
/// Conventional (`base` and `eval` are the same `Arc`): the dataset's
/// classes are shuffled and cut by `fractions`. Cross-domain: all of
/// `base`'s classes are base classes and `eval`'s classes are divided
/// between validation and novel in the ratio of the last two fractions.
pub fn make_split(base: &Arc<Dataset>, eval: &Arc<Dataset>, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) {
        return Err(Error::Invalid(format!(
            "split fractions must be nonnegative: {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = if Arc::ptr_eq(base, eval) {
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split fractions must sum to 1, got {total}")));
        }
        let mut classes = base.class_ids().to_vec();
        classes.shuffle(&mut rng);
        let n = classes.len();
        let n_base = round_count(fractions[0], n);
        let n_val = round_count(fractions[1], n).min(n - n_base);
        SplitSpec {
            base_classes: classes[..n_base].to_vec(),
            validation_classes: classes[n_base..n_base + n_val].to_vec(),
            novel_classes: classes[n_base + n_val..].to_vec(),
            base_dataset: base.clone(),
            eval_dataset: eval.clone(),
        }
    } else {
        let eval_total = fractions[1] + fractions[2];
        if eval_total.is_nan() || eval_total <= 0.0 {
            return Err(Error::Invalid("validation and novel fractions are both zero".into()));
        }
        let mut classes = eval.class_ids().to_vec();
        classes.shuffle(&mut rng);
        let n_val = round_count(fractions[1] / eval_total, classes.len());
        SplitSpec {
            base_classes: base.class_ids().to_vec(),
            validation_classes: classes[..n_val].to_vec(),
            novel_classes: classes[n_val..].to_vec(),
            base_dataset: base.clone(),
            eval_dataset: eval.clone(),
        }
    };
    split.validate()?;
    Ok(split)
}

/// Draws episodes from a fixed dataset and class set.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub dataset: Arc<Dataset>,
    pub classes: Vec<ClassId>,
    pub n: usize,
    pub k: usize,
    pub q: usize,
}

impl EpisodeSampler {
    pub fn sample(&self, env_id: EnvId, rng: &mut ChaCha8Rng) -> Result<Episode> {
        sample_episode(&self.dataset, &self.classes, env_id, self.n, self.k, self.q, rng)
    }
}
