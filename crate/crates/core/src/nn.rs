//! The parametric model: an MLP whose last linear layer produces the logits,
//! softmax cross-entropy risk and argmax accuracy.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "metarobust-ckpt v1";

/// Layer shapes of an MLP, e.g. `[10, 32, 5]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Invalid(format!(
                "an MLP needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Invalid(format!("layer sizes must be positive: {sizes:?}")));
        }
        Ok(Mlp { sizes: sizes.to_vec() })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Parameter shapes in `[w0, b0, w1, b1, ..]` order; weights are `[out, in]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.sizes
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Logits for a `[batch, in]` input: relu between hidden layers, none on
    /// the output layer.
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let n_layers = self.sizes.len() - 1;
        if params.len() != 2 * n_layers {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * n_layers,
                params.len()
            )));
        }
        let (batch, d) = g.value(x).dims2("forward")?;
        if d != self.sizes[0] {
            return Err(Error::shape(
                "forward",
                format!("input has {d} features, first layer expects {}", self.sizes[0]),
            ));
        }
        let mut h = x;
        for (layer, wb) in params.chunks(2).enumerate() {
            let wt = g.transpose(wb[0])?;
            let z = g.matmul(h, wt)?;
            let b = g.broadcast(wb[1], &[batch, self.sizes[layer + 1]])?;
            h = g.add(z, b)?;
            if layer + 1 < n_layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Concrete parameter values θ for an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    model: Mlp,
    tensors: Vec<Tensor>,
}

/// Glorot-uniform weights and zero biases from a seeded ChaCha8 generator.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    let model = Mlp::new(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        tensors.push(Tensor::matrix(fan_out, fan_in, data)?);
        tensors.push(Tensor::zeros(&[fan_out]));
    }
    Ok(MlpParams { model, tensors })
}

impl MlpParams {
    pub fn from_tensors(model: Mlp, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = model.param_shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s != t.shape()) {
            return Err(Error::Invalid(format!(
                "parameter shapes do not match layer sizes {:?}",
                model.sizes
            )));
        }
        Ok(MlpParams { model, tensors })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// `(weight, bias)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.tensors.chunks(2).map(|c| (&c[0], &c[1]))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(model: Mlp, flat: &[f64]) -> Result<Self> {
        if flat.len() != model.num_params() {
            return Err(Error::Invalid(format!(
                "expected {} values, got {}",
                model.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::new();
        for shape in model.param_shapes() {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(MlpParams { model, tensors })
    }

    /// Adds every tensor to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Header line, then the flat parameters as little-endian `f64`.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let sizes: Vec<String> = self.model.sizes.iter().map(ToString::to_string).collect();
        writeln!(w, "{CHECKPOINT_MAGIC} {}", sizes.join(","))?;
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        let bad = |msg: String| Error::Invalid(format!("checkpoint: {msg}"));
        r.read_line(&mut header).map_err(|e| bad(e.to_string()))?;
        let sizes = header
            .trim_end_matches('\n')
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|s| s.strip_prefix(' '))
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let sizes: Vec<usize> = sizes
            .split(',')
            .map(|s| s.parse().map_err(|_| bad(format!("bad layer size {s:?}"))))
            .collect::<Result<_>>()?;
        let model = Mlp::new(&sizes)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() != 8 * model.num_params() {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * model.num_params(),
                bytes.len()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        MlpParams::unflatten(model, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        MlpParams::read_checkpoint(file)
    }
}

/// A scalar loss node together with how many samples it averages.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub node: NodeId,
    pub n_samples: usize,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "labels",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `[batch, N]` logits.
///
/// The row max is subtracted as a constant before exponentiating; the result
/// and its derivatives do not depend on that shift.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<LossValue> {
    let (batch, classes) = g.value(logits).dims2("cross_entropy")?;
    check_labels(labels, batch, classes)?;
    if batch == 0 {
        return Err(Error::Invalid("cross_entropy of an empty batch".into()));
    }
    let z = g.value(logits);
    let maxes: Vec<f64> = (0..batch)
        .map(|i| z.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut onehot = vec![0.0; batch * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }

    let m = g.constant(Tensor::matrix(batch, 1, maxes)?);
    let m = g.broadcast(m, &[batch, classes])?;
    let shifted = g.sub(logits, m)?;
    let e = g.exp(shifted)?;
    let se = g.sum_to(e, &[batch, 1])?;
    let lse = g.log(se)?;
    let onehot = g.constant(Tensor::matrix(batch, classes, onehot)?);
    let picked = g.mul(shifted, onehot)?;
    let picked = g.sum_to(picked, &[batch, 1])?;
    let per_row = g.sub(lse, picked)?;
    let node = g.mean(per_row)?;
    Ok(LossValue { node, n_samples: batch })
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest
/// class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, classes) = logits.dims2("accuracy")?;
    check_labels(labels, batch, classes)?;
    if batch == 0 {
        return Err(Error::Invalid("accuracy of an empty batch".into()));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(logits.row(*i)) == l)
        .count();
    Ok(correct as f64 / batch as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn logits(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        g.param(Tensor::matrix(rows, cols, data).unwrap())
    }

    fn ce_value(rows: usize, cols: usize, data: Vec<f64>, labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let z = logits(&mut g, rows, cols, data);
        let l = cross_entropy(&mut g, z, labels).unwrap();
        g.scalar(l.node).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(&[4, 8, 5], 7).unwrap();
        let b = init_mlp(&[4, 8, 5], 7).unwrap();
        assert_eq!(a, b);
        let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, init_mlp(&[4, 8, 5], 8).unwrap());
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let p = init_mlp(&[4, 8, 5], 7).unwrap();
        let shapes: Vec<_> = p.layers().map(|(w, _)| w.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 4], vec![5, 8]]);
        assert!(p.layers().all(|(_, b)| b.data().iter().all(|&v| v == 0.0)));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(p.tensors()[0].data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_mlp(&[], 0).is_err());
        assert!(init_mlp(&[4], 0).is_err());
        assert!(init_mlp(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn flatten_round_trips_bitwise() {
        let p = init_mlp(&[3, 6, 4, 2], 1).unwrap();
        let q = MlpParams::unflatten(p.model().clone(), &p.flatten()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let p = init_mlp(&[4, 8, 5], 3).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert!(buf.starts_with(b"metarobust-ckpt v1 4,8,5\n"));
        assert_eq!(
            buf.len(),
            "metarobust-ckpt v1 4,8,5\n".len() + 8 * p.model().num_params()
        );
        assert_eq!(MlpParams::read_checkpoint(buf.as_slice()).unwrap(), p);
        assert!(MlpParams::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let p = init_mlp(&[3, 4, 2], 0).unwrap();
        let mut g = Graph::new();
        let ps = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = p.model().forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn rows_are_independent() {
        let p = init_mlp(&[3, 5, 2], 4).unwrap();
        let run = |rows: Vec<f64>, n: usize| {
            let mut g = Graph::new();
            let ps = p.bind(&mut g);
            let x = g.constant(Tensor::matrix(n, 3, rows).unwrap());
            let y = p.model().forward(&mut g, &ps, x).unwrap();
            g.value(y).clone()
        };
        let one = run(vec![0.1, -0.4, 0.9], 1);
        let two = run(vec![0.1, -0.4, 0.9, 0.1, -0.4, 0.9], 2);
        assert_eq!(two.row(0), one.row(0));
        assert_eq!(two.row(1), one.row(0));
    }

    #[test]
    fn identity_linear_layer() {
        let model = Mlp::new(&[2, 2]).unwrap();
        let p = MlpParams::from_tensors(
            model,
            vec![
                Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
            ],
        )
        .unwrap();
        let mut g = Graph::new();
        let ps = p.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let y = p.model().forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn forward_rejects_wrong_feature_dim() {
        let p = init_mlp(&[3, 2], 0).unwrap();
        let mut g = Graph::new();
        let ps = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(p.model().forward(&mut g, &ps, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let v = ce_value(3, 5, vec![0.0; 15], &[0, 3, 4]);
        assert!((v - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_softplus() {
        // softplus(-20) = ln(1 + e^-20); log-sum-exp rounds 1 + e^-20 to
        // the nearest double first, which costs ~1e-16 absolute accuracy
        let want = (-20f64).exp().ln_1p();
        let v = ce_value(1, 2, vec![10.0, -10.0], &[0]);
        assert!((v - want).abs() <= 1e-15, "{v} vs {want}");
        assert!((v - 2.0611536e-9).abs() < 1e-15);
    }

    #[test]
    fn class_permutation_symmetry() {
        let z = vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
        let a = ce_value(2, 3, z.clone(), &[2, 0]);
        // permutation (0 1 2) -> (2 0 1)
        let perm = |r: &[f64]| vec![r[1], r[2], r[0]];
        let mut pz = perm(&z[0..3]);
        pz.extend(perm(&z[3..6]));
        let b = ce_value(2, 3, pz, &[1, 2]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let z = vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
        let shifted: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i < 3 { 4.5 } else { -2.25 })
            .collect();
        let (a, b) = (
            ce_value(2, 3, z.clone(), &[1, 2]),
            ce_value(2, 3, shifted.clone(), &[1, 2]),
        );
        assert!((a - b).abs() <= 1e-10 * a);
        let labels = [1, 2];
        let za = Tensor::matrix(2, 3, z.clone()).unwrap();
        let zb = Tensor::matrix(2, 3, shifted).unwrap();
        assert_eq!(accuracy(&za, &labels).unwrap(), accuracy(&zb, &labels).unwrap());
        assert_eq!(
            accuracy(&za, &labels).unwrap(),
            accuracy(&za.map(|v| 3.7 * v), &labels).unwrap()
        );
    }

    #[test]
    fn out_of_range_label() {
        let mut g = Graph::new();
        let z = logits(&mut g, 1, 3, vec![0.0; 3]);
        assert!(matches!(
            cross_entropy(&mut g, z, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn accuracy_counting_and_ties() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&eye, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&Tensor::zeros(&[3, 4]), &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&Tensor::zeros(&[2, 4]), &[0, 0]).unwrap(), 1.0);
        let z = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&z, &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let model = Mlp::new(&[3, 4, 3]).unwrap();
        let x = Tensor::matrix(
            4,
            3,
            vec![0.5, -1.0, 0.2, 1.1, 0.3, -0.4, -0.8, 0.9, 0.6, 0.0, -0.3, 1.4],
        )
        .unwrap();
        let labels = [0, 2, 1, 2];
        let m = model.clone();
        let f = move |g: &mut Graph, flat: NodeId| {
            let ps = crate::verify::split_flat(g, flat, &m.param_shapes())?;
            let xn = g.constant(x.clone());
            let z = m.forward(g, &ps, xn)?;
            Ok(cross_entropy(g, z, &labels)?.node)
        };
        let mut seed = 0;
        loop {
            let point = init_mlp(model.sizes(), seed).unwrap().flatten();
            let point: Vec<f64> = point.iter().enumerate().map(|(i, v)| v + 0.01 * i as f64).collect();
            let rep = finite_diff_check(&f, &point, 1e-5, 1e-4).unwrap();
            if rep.relu_margin < 1e-3 {
                seed += 1;
                continue;
            }
            assert!(rep.pass, "max rel err {}", rep.max_rel_error);
            break;
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        for s in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert!(ce_value(3, 4, data, &[0, 1, 3]) >= 0.0);
        }
    }
}
