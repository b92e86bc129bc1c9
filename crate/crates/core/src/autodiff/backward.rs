use super::{Graph, NodeId, Primitive};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(super) fn grad(g: &mut Graph, output: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
    let out_shape = g.shape(output).to_vec();
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NotScalar(out_shape));
    }
    if let Some(w) = wrt.iter().find(|w| !g.node(**w).requires_grad) {
        return Err(Error::NotDifferentiable(w.0));
    }
    let Some(lo) = wrt.iter().map(|w| w.0).min() else {
        return Ok(Vec::new());
    };

    // Nodes in [lo, output] that depend on some wrt node; only these carry
    // gradient worth propagating.
    let hi = output.0;
    let span = hi.saturating_sub(lo) + 1;
    let mut relevant = vec![false; span];
    for w in wrt {
        if w.0 <= hi {
            relevant[w.0 - lo] = true;
        }
    }
    if lo <= hi {
        for i in lo..=hi {
            if !relevant[i - lo] {
                let node = g.node(NodeId(i));
                relevant[i - lo] = node.requires_grad && node.parents.iter().any(|p| p.0 >= lo && relevant[p.0 - lo]);
            }
        }
    }

    g.with_recording(create_graph, |g| {
        let mut grads: Vec<Option<NodeId>> = vec![None; span];
        if lo <= hi && relevant[hi - lo] {
            grads[hi - lo] = Some(g.constant(Tensor::ones(&out_shape)));
            for i in (lo..=hi).rev() {
                let Some(upstream) = grads[i - lo] else { continue };
                if !relevant[i - lo] {
                    continue;
                }
                let is_relevant = |p: NodeId| p.0 >= lo && relevant[p.0 - lo];
                for (parent, contrib) in vjp(g, NodeId(i), upstream, &is_relevant)? {
                    if !is_relevant(parent) {
                        continue;
                    }
                    let slot = &mut grads[parent.0 - lo];
                    *slot = Some(match *slot {
                        None => contrib,
                        Some(acc) => g.add(acc, contrib)?,
                    });
                }
            }
        }
        wrt.iter()
            .map(|w| match (w.0 <= hi).then(|| grads[w.0 - lo]).flatten() {
                Some(id) => Ok(id),
                None => {
                    let zeros = Tensor::zeros(g.shape(*w));
                    Ok(g.constant(zeros))
                }
            })
            .collect()
    })
}

/// Vector-Jacobian products of node `id` for its relevant parents, expressed
/// as graph operations so that they are themselves differentiable.
fn vjp(
    g: &mut Graph,
    id: NodeId,
    upstream: NodeId,
    is_relevant: &dyn Fn(NodeId) -> bool,
) -> Result<Vec<(NodeId, NodeId)>> {
    use Primitive::*;
    let node = g.node(id);
    let op = node.op.clone();
    let parents = node.parents.clone();
    let shape_of = |g: &Graph, n: NodeId| g.shape(n).to_vec();
    let mut out = Vec::with_capacity(parents.len());

    match &op {
        Leaf => {}
        Add => {
            for &p in &parents {
                if is_relevant(p) {
                    out.push((p, upstream));
                }
            }
        }
        Sub => {
            if is_relevant(parents[0]) {
                out.push((parents[0], upstream));
            }
            if is_relevant(parents[1]) {
                out.push((parents[1], g.scale(upstream, -1.0)?));
            }
        }
        Mul => {
            let (a, b) = (parents[0], parents[1]);
            if is_relevant(a) {
                out.push((a, g.mul(upstream, b)?));
            }
            if is_relevant(b) {
                out.push((b, g.mul(upstream, a)?));
            }
        }
        Scale(c) => out.push((parents[0], g.scale(upstream, *c)?)),
        MatMul => {
            let (a, b) = (parents[0], parents[1]);
            if is_relevant(a) {
                let bt = g.transpose(b)?;
                out.push((a, g.matmul(upstream, bt)?));
            }
            if is_relevant(b) {
                let at = g.transpose(a)?;
                out.push((b, g.matmul(at, upstream)?));
            }
        }
        Transpose => out.push((parents[0], g.transpose(upstream)?)),
        Relu => {
            // subgradient 0 at the kink; the mask is piecewise constant
            let mask = g.value(parents[0]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let mask = g.constant(mask);
            out.push((parents[0], g.mul(upstream, mask)?));
        }
        Exp => out.push((parents[0], g.mul(upstream, id)?)),
        Log => {
            let r = g.recip(parents[0])?;
            out.push((parents[0], g.mul(upstream, r)?));
        }
        Recip => {
            let sq = g.square(id)?;
            let neg = g.scale(sq, -1.0)?;
            out.push((parents[0], g.mul(upstream, neg)?));
        }
        Sum => {
            let s = shape_of(g, parents[0]);
            out.push((parents[0], g.broadcast(upstream, &s)?));
        }
        Mean => {
            let s = shape_of(g, parents[0]);
            let n = s.iter().product::<usize>() as f64;
            let b = g.broadcast(upstream, &s)?;
            out.push((parents[0], g.scale(b, 1.0 / n)?));
        }
        Broadcast(_) => {
            let s = shape_of(g, parents[0]);
            out.push((parents[0], g.sum_to(upstream, &s)?));
        }
        SumTo(_) => {
            let s = shape_of(g, parents[0]);
            out.push((parents[0], g.broadcast(upstream, &s)?));
        }
        Reshape(_) => {
            let s = shape_of(g, parents[0]);
            out.push((parents[0], g.reshape(upstream, &s)?));
        }
        Concat { axis } => {
            let mut offset = 0;
            for &p in &parents {
                let len = g.shape(p)[*axis];
                if is_relevant(p) {
                    out.push((p, g.slice(upstream, *axis, offset, offset + len)?));
                }
                offset += len;
            }
        }
        Slice { axis, start, end } => {
            let full = shape_of(g, parents[0]);
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                let mut s = full.clone();
                s[*axis] = *start;
                parts.push(g.constant(Tensor::zeros(&s)));
            }
            parts.push(upstream);
            if *end < full[*axis] {
                let mut s = full.clone();
                s[*axis] = full[*axis] - end;
                parts.push(g.constant(Tensor::zeros(&s)));
            }
            let padded = if parts.len() == 1 {
                upstream
            } else {
                g.concat(&parts, *axis)?
            };
            out.push((parents[0], padded));
        }
        Square => {
            let two_x = g.scale(parents[0], 2.0)?;
            out.push((parents[0], g.mul(upstream, two_x)?));
        }
        SumSquares => {
            let s = shape_of(g, parents[0]);
            let b = g.broadcast(upstream, &s)?;
            let two_x = g.scale(parents[0], 2.0)?;
            out.push((parents[0], g.mul(b, two_x)?));
        }
    }

    if g.fault() == Some(op.name()) {
        for (_, c) in out.iter_mut() {
            *c = g.scale(*c, 1.5)?;
        }
    }
    Ok(out)
}
