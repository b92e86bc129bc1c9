use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcastable, Tensor};

/// The primitive operations a node can record.
///
/// Elementwise binary ops require identical shapes; broadcasting only
/// happens through the explicit `Broadcast` op.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Recip,
    /// Sum of all elements to a scalar.
    Sum,
    Mean,
    Broadcast(Vec<usize>),
    /// Sum over broadcast dimensions down to the given shape.
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Square,
    SumSquares,
}

impl Primitive {
    pub const NAMES: &'static [&'static str] = &[
        "leaf",
        "add",
        "sub",
        "mul",
        "scale",
        "matmul",
        "transpose",
        "relu",
        "exp",
        "log",
        "recip",
        "sum",
        "mean",
        "broadcast",
        "sum_to",
        "reshape",
        "concat",
        "slice",
        "square",
        "sum_squares",
    ];

    pub fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            Leaf => "leaf",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Scale(_) => "scale",
            MatMul => "matmul",
            Transpose => "transpose",
            Relu => "relu",
            Exp => "exp",
            Log => "log",
            Recip => "recip",
            Sum => "sum",
            Mean => "mean",
            Broadcast(_) => "broadcast",
            SumTo(_) => "sum_to",
            Reshape(_) => "reshape",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Square => "square",
            SumSquares => "sum_squares",
        }
    }

    /// Expected input count; `given` is echoed back for variadic ops.
    pub(crate) fn arity(&self, given: usize) -> usize {
        use Primitive::*;
        match self {
            Leaf => 0,
            Add | Sub | Mul | MatMul => 2,
            Concat { .. } => given.max(1),
            _ => 1,
        }
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        use Primitive::*;
        let name = self.name();
        match self {
            Leaf => Err(Error::Invalid("leaf nodes are created with param/constant".into())),
            Add => inputs[0].zip_map(inputs[1], name, |a, b| a + b),
            Sub => inputs[0].zip_map(inputs[1], name, |a, b| a - b),
            Mul => inputs[0].zip_map(inputs[1], name, |a, b| a * b),
            Scale(c) => Ok(inputs[0].map(|v| c * v)),
            MatMul => matmul(inputs[0], inputs[1]),
            Transpose => transpose(inputs[0]),
            Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
            Exp => Ok(inputs[0].map(f64::exp)),
            Log => Ok(inputs[0].map(f64::ln)),
            Recip => Ok(inputs[0].map(|v| 1.0 / v)),
            Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            Broadcast(to) => broadcast(inputs[0], to),
            SumTo(to) => sum_to(inputs[0], to),
            Reshape(to) => {
                let x = inputs[0];
                if to.iter().product::<usize>() != x.numel() {
                    return Err(Error::shape(name, format!("{:?} -> {to:?}", x.shape())));
                }
                x.reshaped(to)
            }
            Concat { axis } => concat(inputs, *axis),
            Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end),
            Square => Ok(inputs[0].map(|v| v * v)),
            SumSquares => Ok(Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum())),
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

fn broadcast(x: &Tensor, to: &[usize]) -> Result<Tensor> {
    if !broadcastable(x.shape(), to) {
        return Err(Error::shape("broadcast", format!("{:?} -> {to:?}", x.shape())));
    }
    let d = x.data();
    let data = broadcast_index_map(x.shape(), to).into_iter().map(|i| d[i]).collect();
    Tensor::new(to.to_vec(), data)
}

fn sum_to(x: &Tensor, to: &[usize]) -> Result<Tensor> {
    if !broadcastable(to, x.shape()) {
        return Err(Error::shape("sum_to", format!("{:?} -> {to:?}", x.shape())));
    }
    let mut out = vec![0.0; to.iter().product()];
    for (src, dst) in broadcast_index_map(to, x.shape()).into_iter().enumerate() {
        out[dst] += x.data()[src];
    }
    Tensor::new(to.to_vec(), out)
}

/// (outer, axis length, inner) block sizes of `shape` around `axis`.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for {first:?}"),
        ));
    }
    let mut shape = first.to_vec();
    shape[axis] = 0;
    for p in parts {
        let s = p.shape();
        let same_rest =
            s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
        }
        shape[axis] += s[axis];
    }
    let (outer, _, inner) = blocks(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, data)
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() || start > end || end > s[axis] {
        return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
    }
    let (outer, len, inner) = blocks(s, axis);
    let mut shape = s.to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(shape, data)
}
