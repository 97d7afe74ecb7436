use super::tape::Var;
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Primitive operation kinds recorded on a tape.
///
/// Every vector-Jacobian product is itself written with recorded ops, so the
/// gradients a backward pass produces can be differentiated again.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// Scalar var times tensor var: inputs `[scalar, tensor]`.
    MulScalar,
    /// `[n, m] + [m]`, the vector added to every row.
    AddRow,
    /// `[n, m] -> [m]`.
    SumRows,
    /// `[m] -> [n, m]`.
    BroadcastRows(usize),
    Matmul,
    Transpose,
    Tanh,
    Relu,
    Sin,
    Cos,
    Sqrt,
    Square,
    /// Sum of all elements, rank-0 output.
    Sum,
    /// Mean of all elements, rank-0 output.
    Mean,
    /// Rank-0 scalar repeated to the given shape.
    Expand(Vec<usize>),
    /// Concatenation along the leading axis.
    Concat,
    /// Rows `start..start + len` along the leading axis.
    Slice { start: usize, len: usize },
    /// Cosine of the angle between two same-shaped tensors, read as flat
    /// vectors. Defined as 0 when either has zero norm.
    CosineSimilarity,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar => "mul_scalar",
            Op::AddRow => "add_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand(_) => "expand",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::CosineSimilarity => "cosine_similarity",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MulScalar | Op::AddRow | Op::Matmul => {
                Some(2)
            }
            Op::CosineSimilarity => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }

    fn mismatch(&self, inputs: &[&Tensor]) -> Error {
        Error::Shape {
            op: self.name(),
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    /// Computes the op's value from its input values.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(self.mismatch(inputs));
            }
        }
        let same_shape = |a: &Tensor, b: &Tensor| a.shape() == b.shape();
        let out = match self {
            Op::Leaf => return Err(self.mismatch(inputs)),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if !same_shape(a, b) {
                    return Err(self.mismatch(inputs));
                }
                match self {
                    Op::Add => a.zip_map(b, |x, y| x + y),
                    Op::Sub => a.zip_map(b, |x, y| x - y),
                    Op::Mul => a.zip_map(b, |x, y| x * y),
                    _ => a.zip_map(b, |x, y| x / y),
                }
            }
            Op::Neg => inputs[0].map(|x| -x),
            Op::Scale(c) => inputs[0].map(|x| x * c),
            Op::AddScalar(c) => inputs[0].map(|x| x + c),
            Op::MulScalar => {
                let (s, t) = (inputs[0], inputs[1]);
                if s.rank() != 0 {
                    return Err(self.mismatch(inputs));
                }
                let s = s.data()[0];
                t.map(|x| s * x)
            }
            Op::AddRow => {
                let (a, r) = (inputs[0], inputs[1]);
                if a.rank() != 2 || r.shape() != [a.shape()[1]] {
                    return Err(self.mismatch(inputs));
                }
                let m = a.shape()[1];
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(m) {
                    for (o, &b) in row.iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::SumRows => {
                let a = inputs[0];
                if a.rank() != 2 {
                    return Err(self.mismatch(inputs));
                }
                let m = a.shape()[1];
                let mut out = vec![0.0; m];
                for row in a.data().chunks(m) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::vector(out)
            }
            Op::BroadcastRows(n) => {
                let r = inputs[0];
                if r.rank() != 1 {
                    return Err(self.mismatch(inputs));
                }
                let m = r.len();
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..*n {
                    data.extend_from_slice(r.data());
                }
                Tensor::new(vec![*n, m], data)?
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(inputs));
                }
                tensor::matmul(a, b)
            }
            Op::Transpose => {
                if inputs[0].rank() != 2 {
                    return Err(self.mismatch(inputs));
                }
                tensor::transpose(inputs[0])
            }
            Op::Tanh => inputs[0].map(f64::tanh),
            Op::Relu => inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sin => inputs[0].map(f64::sin),
            Op::Cos => inputs[0].map(f64::cos),
            Op::Sqrt => inputs[0].map(f64::sqrt),
            Op::Square => inputs[0].map(|x| x * x),
            Op::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
            Op::Mean => {
                let a = inputs[0];
                if a.is_empty() {
                    return Err(self.mismatch(inputs));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Expand(shape) => {
                if inputs[0].rank() != 0 {
                    return Err(self.mismatch(inputs));
                }
                Tensor::full(shape, inputs[0].data()[0])
            }
            Op::Concat => {
                let first = inputs.first().ok_or_else(|| self.mismatch(inputs))?;
                if first.rank() == 0 {
                    return Err(self.mismatch(inputs));
                }
                let tail = &first.shape()[1..];
                if inputs.iter().any(|t| t.rank() == 0 || &t.shape()[1..] != tail) {
                    return Err(self.mismatch(inputs));
                }
                let lead: usize = inputs.iter().map(|t| t.shape()[0]).sum();
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(shape, data)?
            }
            Op::Slice { start, len } => {
                let a = inputs[0];
                if a.rank() == 0 || start + len > a.shape()[0] {
                    return Err(self.mismatch(inputs));
                }
                let row: usize = a.shape()[1..].iter().product();
                let mut shape = a.shape().to_vec();
                shape[0] = *len;
                Tensor::new(shape, a.data()[start * row..(start + len) * row].to_vec())?
            }
            Op::CosineSimilarity => {
                let (u, v) = (inputs[0], inputs[1]);
                if !same_shape(u, v) {
                    return Err(self.mismatch(inputs));
                }
                Tensor::scalar(cosine(u.data(), v.data()))
            }
        };
        Ok(out)
    }

    /// Vector-Jacobian product: given the upstream gradient `g` of this
    /// node's output, returns one gradient per input (`None` where the input
    /// does not need one).
    pub(crate) fn vjp<'t>(
        &self,
        inputs: &[Var<'t>],
        out: Var<'t>,
        g: Var<'t>,
        needs: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>> {
        let tape = out.tape();
        let mut grads: Vec<Option<Var<'t>>> = vec![None; inputs.len()];
        macro_rules! set {
            ($i:expr, $e:expr) => {
                if needs[$i] {
                    grads[$i] = Some($e);
                }
            };
        }
        match self {
            Op::Leaf => {}
            Op::Add => {
                set!(0, g);
                set!(1, g);
            }
            Op::Sub => {
                set!(0, g);
                set!(1, g.neg()?);
            }
            Op::Mul => {
                set!(0, g.mul(inputs[1])?);
                set!(1, g.mul(inputs[0])?);
            }
            Op::Div => {
                let b = inputs[1];
                set!(0, g.div(b)?);
                set!(1, g.mul(out)?.div(b)?.neg()?);
            }
            Op::Neg => set!(0, g.neg()?),
            Op::Scale(c) => set!(0, g.scale(*c)?),
            Op::AddScalar(_) => set!(0, g),
            Op::MulScalar => {
                let (s, t) = (inputs[0], inputs[1]);
                set!(0, g.mul(t)?.sum()?);
                set!(1, s.mul_scalar(g)?);
            }
            Op::AddRow => {
                set!(0, g);
                set!(1, g.sum_rows()?);
            }
            Op::SumRows => {
                let n = inputs[0].shape()[0];
                set!(0, g.broadcast_rows(n)?);
            }
            Op::BroadcastRows(_) => set!(0, g.sum_rows()?),
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                set!(0, g.matmul(b.transpose()?)?);
                set!(1, a.transpose()?.matmul(g)?);
            }
            Op::Transpose => set!(0, g.transpose()?),
            Op::Tanh => {
                // 1 - tanh(x)^2, in terms of the recorded output
                let d = out.square()?.neg()?.add_scalar(1.0)?;
                set!(0, g.mul(d)?);
            }
            Op::Relu => {
                let mask = inputs[0].value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                set!(0, g.mul(tape.constant(mask))?);
            }
            Op::Sin => set!(0, g.mul(inputs[0].cos()?)?),
            Op::Cos => set!(0, g.mul(inputs[0].sin()?)?.neg()?),
            Op::Sqrt => set!(0, g.scale(0.5)?.div(out)?),
            Op::Square => set!(0, g.mul(inputs[0])?.scale(2.0)?),
            Op::Sum => {
                let shape = inputs[0].shape();
                set!(0, g.expand(&shape)?);
            }
            Op::Mean => {
                let shape = inputs[0].shape();
                let n = inputs[0].value().len() as f64;
                set!(0, g.scale(1.0 / n)?.expand(&shape)?);
            }
            Op::Expand(_) => set!(0, g.sum()?),
            Op::Concat => {
                let mut start = 0;
                for (i, x) in inputs.iter().enumerate() {
                    let len = x.shape()[0];
                    set!(i, g.slice_rows(start, len)?);
                    start += len;
                }
            }
            Op::Slice { start, len } => {
                if needs[0] {
                    let shape = inputs[0].shape();
                    let mut parts = Vec::with_capacity(3);
                    let mut pad = |rows: usize| {
                        if rows > 0 {
                            let mut s = shape.clone();
                            s[0] = rows;
                            parts.push(tape.constant(Tensor::zeros(&s)));
                        }
                    };
                    pad(*start);
                    let tail = shape[0] - start - len;
                    let mut parts_after = Vec::new();
                    if tail > 0 {
                        let mut s = shape.clone();
                        s[0] = tail;
                        parts_after.push(tape.constant(Tensor::zeros(&s)));
                    }
                    parts.push(g);
                    parts.extend(parts_after);
                    grads[0] = Some(tape.concat(&parts)?);
                }
            }
            Op::CosineSimilarity => {
                let (u, v) = (inputs[0], inputs[1]);
                let (uv, vv) = (u.value(), v.value());
                let nu2: f64 = uv.data().iter().map(|x| x * x).sum();
                let nv2: f64 = vv.data().iter().map(|x| x * x).sum();
                if nu2 == 0.0 || nv2 == 0.0 {
                    // constant 0 on this branch
                    return Ok(grads);
                }
                let nu2 = u.square()?.sum()?;
                let nv2 = v.square()?.sum()?;
                let inv = nu2.mul(nv2)?.sqrt()?;
                let one = tape.constant(Tensor::scalar(1.0));
                let inv = one.div(inv)?;
                // d cos / du = v / (|u||v|) - cos * u / |u|^2
                if needs[0] {
                    let d = inv.mul_scalar(v)?.sub(out.div(nu2)?.mul_scalar(u)?)?;
                    grads[0] = Some(g.mul_scalar(d)?);
                }
                if needs[1] {
                    let d = inv.mul_scalar(u)?.sub(out.div(nv2)?.mul_scalar(v)?)?;
                    grads[1] = Some(g.mul_scalar(d)?);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>();
    let nv: f64 = v.iter().map(|b| b * b).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        log::debug!("cosine similarity of a zero-norm vector, using 0");
        return 0.0;
    }
    (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}
