//! Reverse-mode differentiation over a dynamically recorded operation list.
//!
//! Operations are appended to a [`Tape`] as they run, so nodes are already in
//! topological order and [`Tape::backward`] is a single reverse sweep. Every
//! operation supplies its own vector-Jacobian product.

use std::cell::RefCell;

use super::tensor::{sigmoid_scalar, softmax_slice, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Relu(Var),
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    SignedSqrt(Var, f64),
    Softmax(Var),
    ScaleBy(Var, Var, usize),
    MarginCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        lambdas: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass. Not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar output with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite result from {op:?}")));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    /// Records an input. Gradients are available for every leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.matmul(y))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with(a, Tensor::transpose)?;
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p + q))?;
        self.push(out, Op::Add(a, b))
    }

    /// `a[M×N] + b` with `b` holding `N` values broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, bias| {
            let (m, n) = rows_cols(x)?;
            if bias.len() != n {
                return Err(Error::dim(format!(
                    "row bias {:?} does not fit {:?}",
                    bias.shape(),
                    x.shape()
                )));
            }
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out.data_mut()[i * n + j] += bias.data()[j];
                }
            }
            Ok(out)
        })?;
        self.push(out, Op::AddRow(a, b))
    }

    /// Scales row `i` of `a[M×N]` by `g[i]` (`g` holds `M` values).
    pub fn mul_col(&self, a: Var, g: Var) -> Result<Var> {
        let out = self.with2(a, g, |x, gate| {
            let (m, n) = rows_cols(x)?;
            if gate.len() != m {
                return Err(Error::dim(format!(
                    "column gate {:?} does not fit {:?}",
                    gate.shape(),
                    x.shape()
                )));
            }
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out.data_mut()[i * n + j] *= gate.data()[i];
                }
            }
            Ok(out)
        })?;
        self.push(out, Op::MulCol(a, g))
    }

    /// Scales column `j` of `a[M×N]` by `g[j]` (`g` holds `N` values).
    pub fn mul_row(&self, a: Var, g: Var) -> Result<Var> {
        let out = self.with2(a, g, |x, gate| {
            let (m, n) = rows_cols(x)?;
            if gate.len() != n {
                return Err(Error::dim(format!(
                    "row gate {:?} does not fit {:?}",
                    gate.shape(),
                    x.shape()
                )));
            }
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out.data_mut()[i * n + j] *= gate.data()[j];
                }
            }
            Ok(out)
        })?;
        self.push(out, Op::MulRow(a, g))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p * q))?;
        self.push(out, Op::Hadamard(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.with(a, |x| x.map(|v| v * c));
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.with(a, |x| x.map(|v| v + c));
        self.push(out, Op::Shift(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| x.map(sigmoid_scalar));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| x.map(|v| v.max(0.0)));
        self.push(out, Op::Relu(a))
    }

    /// Column means of `a[M×N]` as a `1×N` row.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| {
            let (m, _) = rows_cols(x)?;
            Ok::<_, Error>(super::tensor::sum_rows(x)?.map(|v| v / m as f64))
        })?;
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| Tensor::scalar(x.sum()));
        self.push(out, Op::SumAll(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with(a, |x| x.reshape(shape))?;
        self.push(out, Op::Reshape(a))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (_, n) = rows_cols(&nodes[parts[0].0].value)?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (m, c) = rows_cols(t)?;
                if c != n {
                    return Err(Error::dim(format!("concat column mismatch: {c} vs {n}")));
                }
                rows += m;
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[rows, n], data)?
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let out = self.with(a, |x| {
            let (m, n) = rows_cols(x)?;
            let mut data = Vec::with_capacity(index.len() * n);
            for &i in index {
                if i >= m {
                    return Err(Error::dim(format!("row {i} out of range for {m} rows")));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(&[index.len(), n], data)
        })?;
        self.push(out, Op::GatherRows(a, index.to_vec()))
    }

    /// Unit-L2 rows. A zero row is a numeric error.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (out, norms) = self.with(a, |x| {
            let (m, n) = rows_cols(x)?;
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(m);
            for i in 0..m {
                let row = &mut out.data_mut()[i * n..(i + 1) * n];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::numeric(format!("cannot normalize zero-norm row {i}")));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            Ok((out, norms))
        })?;
        self.push(out, Op::NormalizeRows(a, norms))
    }

    /// `sign(x)·(√(|x|+eps) − √eps)`; smooth at zero for `eps > 0`.
    pub fn signed_sqrt(&self, a: Var, eps: f64) -> Result<Var> {
        let root = eps.sqrt();
        let out = self.with(a, |x| x.map(|v| v.signum() * ((v.abs() + eps).sqrt() - root)));
        self.push(out, Op::SignedSqrt(a, eps))
    }

    /// Softmax over all entries.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| Tensor::new(x.shape(), softmax_slice(x.data())?))?;
        self.push(out, Op::Softmax(a))
    }

    /// `a · s[index]` for a scalar picked out of `s`.
    pub fn scale_by(&self, a: Var, s: Var, index: usize) -> Result<Var> {
        let out = self.with2(a, s, |x, w| {
            let c = *w
                .data()
                .get(index)
                .ok_or_else(|| Error::dim(format!("index {index} out of range")))?;
            Ok::<_, Error>(x.map(|v| v * c))
        })?;
        self.push(out, Op::ScaleBy(a, s, index))
    }

    /// Mean over rows of `−log softmax(z')[y]` where `z'` is `z` with the
    /// target logit multiplied by that row's `lambda`. The lambdas are
    /// constants for differentiation.
    pub fn margin_cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        lambdas: &[f64],
    ) -> Result<Var> {
        let (loss, probs) = self.with(logits, |z| {
            let (b, k) = rows_cols(z)?;
            if targets.len() != b || lambdas.len() != b {
                return Err(Error::dim(format!(
                    "{b} logit rows but {} targets and {} margins",
                    targets.len(),
                    lambdas.len()
                )));
            }
            let mut probs = Vec::with_capacity(b * k);
            let mut total = 0.0;
            for (i, (&y, &lam)) in targets.iter().zip(lambdas).enumerate() {
                if y >= k {
                    return Err(Error::dim(format!("target {y} out of range for {k} classes")));
                }
                let mut row = z.row(i).to_vec();
                row[y] *= lam;
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            Ok((total / b as f64, probs))
        })?;
        self.push(
            Tensor::scalar(loss),
            Op::MarginCrossEntropy {
                logits,
                targets: targets.to_vec(),
                lambdas: lambdas.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                nodes[out.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[out.0] = Some(Tensor::full(nodes[out.0].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transpose()?)?;
                    let gb = val(*a).transpose()?.matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()?),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let gb = super::tensor::sum_rows(&g)?.reshape(val(*b).shape())?;
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(a, gate) => {
                    let (m, n) = g.dims2()?;
                    let x = val(*a);
                    let s = val(*gate);
                    let mut ga = g.clone();
                    let mut gs = vec![0.0; m];
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            ga.data_mut()[k] = g.data()[k] * s.data()[r];
                            gs[r] += g.data()[k] * x.data()[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *gate, Tensor::new(s.shape(), gs)?);
                }
                Op::MulRow(a, gate) => {
                    let (m, n) = g.dims2()?;
                    let x = val(*a);
                    let s = val(*gate);
                    let mut ga = g.clone();
                    let mut gs = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            ga.data_mut()[k] = g.data()[k] * s.data()[c];
                            gs[c] += g.data()[k] * x.data()[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *gate, Tensor::new(s.shape(), gs)?);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.zip_map(val(*b), |p, q| p * q)?;
                    let gb = g.zip_map(val(*a), |p, q| p * q)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::Shift(a) => acc(&mut grads, *a, g.clone()),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |d, s| d * s * (1.0 - s))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })?;
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let (m, n) = x.dims2()?;
                    let mut ga = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        for c in 0..n {
                            ga.data_mut()[r * n + c] = g.data()[c] / m as f64;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
                Op::Reshape(a) => acc(&mut grads, *a, g.reshape(val(*a).shape())?),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = val(*p).shape().to_vec();
                        let len: usize = shape.iter().product();
                        let piece = g.data()[offset..offset + len].to_vec();
                        acc(&mut grads, *p, Tensor::new(&shape, piece)?);
                        offset += len;
                    }
                }
                Op::GatherRows(a, index) => {
                    let x = val(*a);
                    let (_, n) = x.dims2()?;
                    let mut ga = Tensor::zeros(x.shape());
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..n {
                            ga.data_mut()[src * n + c] += g.data()[r * n + c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let (m, n) = y.dims2()?;
                    let mut ga = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            ga.data_mut()[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SignedSqrt(a, eps) => {
                    let ga = g.zip_map(val(*a), |d, x| d / (2.0 * (x.abs() + eps).sqrt()))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let dot: f64 = p.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
                    let ga = p.zip_map(&g, |pi, gi| pi * (gi - dot))?;
                    acc(&mut grads, *a, ga);
                }
                Op::ScaleBy(a, s, index) => {
                    let w = val(*s);
                    let c = w.data()[*index];
                    let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                    let mut gs = Tensor::zeros(w.shape());
                    gs.data_mut()[*index] = dot;
                    acc(&mut grads, *a, g.map(|v| v * c));
                    acc(&mut grads, *s, gs);
                }
                Op::MarginCrossEntropy { logits, targets, lambdas, probs } => {
                    let z = val(*logits);
                    let (b, k) = z.dims2()?;
                    let upstream = g.item() / b as f64;
                    let mut gz = Tensor::zeros(&[b, k]);
                    for r in 0..b {
                        for c in 0..k {
                            let mut d = probs[r * k + c];
                            if c == targets[r] {
                                d = (d - 1.0) * lambdas[r];
                            }
                            gz.data_mut()[r * k + c] = d * upstream;
                        }
                    }
                    acc(&mut grads, *logits, gz);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.hadamard(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.scale(x, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn margin_ce_with_unit_lambda_is_cross_entropy() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap());
        let l = tape.margin_cross_entropy(z, &[1], &[1.0]).unwrap();
        let expected = -((2.0f64).exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
    }
}
