//! Operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Scale(Var, F),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<F> },
    CausalSoftmax(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    Pick { a: Var, flat: Vec<usize> },
    Rows { a: Var, start: usize },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Computation record: every primitive applied during a forward pass.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "gather index {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (_, n) = x.dims2();
        if y.len() != n {
            return Err(Error::Shape(format!(
                "add_row {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(y.data()) {
                *o = *o + v;
            }
        }
        Ok(self.push(Op::AddRow(a, b), out))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = x.dims2();
        let (br, bc) = y.dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}{}",
                x.shape(),
                y.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![F::zero(); m * n];
        if trans_b {
            kernels::matmul_nt(x.data(), y.data(), &mut out, m, k, n);
        } else {
            kernels::matmul_nn(x.data(), y.data(), &mut out, m, k, n);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, trans_b }, value))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm over {cols} with gain {:?}, bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut out = vec![F::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, s) = kernels::layer_norm_row(
                xv.row(r),
                g.data(),
                b.data(),
                &mut out[r * cols..(r + 1) * cols],
            );
            rstd.push(s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
            value,
        ))
    }

    /// Row softmax of a square score matrix restricted to columns `j <= i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2();
        if rows != cols {
            return Err(Error::Shape(format!("causal_softmax on {:?}", x.shape())));
        }
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..rows {
            kernels::softmax_row(&x.row(i)[..=i], &mut out[i * cols..i * cols + i + 1]);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::CausalSoftmax(a), value))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = super::softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = super::log_softmax(self.value(a))?;
        Ok(self.push(Op::LogSoftmax(a), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Selects entries by flat index into a vector.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            out.push(*x.data().get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("pick index {i} out of range {}", x.len()))
            })?);
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            Op::Pick {
                a,
                flat: flat.to_vec(),
            },
            value,
        ))
    }

    /// Contiguous row range `[start, end)` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2();
        if start >= end || end > rows {
            return Err(Error::Shape(format!("rows {start}..{end} of {rows}")));
        }
        let value = Tensor::new(
            vec![end - start, cols],
            x.data()[start * cols..end * cols].to_vec(),
        )?;
        Ok(self.push(Op::Rows { a, start }, value))
    }

    /// Backward pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Tensor::scalar(F::one()))
    }

    /// Backward pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.len() != self.value(root).len() {
            return Err(Error::Shape(format!(
                "seed {:?} for node {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let leaves: Vec<Option<Tensor<F>>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match self.nodes[i].op {
                Op::Leaf => g,
                _ => None,
            })
            .collect();
        for g in leaves.iter().flatten() {
            g.ensure_finite("gradient")?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let (_, cols) = t.dims2();
                let mut d = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let (_, n) = g.dims2();
                let mut d = vec![F::zero(); n];
                for row in g.data().chunks(n) {
                    for (o, &v) in d.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                let shape = self.value(*b).shape().to_vec();
                accumulate(grads, *b, Tensor::new(shape, d).expect("bias shape"));
            }
            Op::MatMul { a, b, trans_b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = x.dims2();
                let (_, n) = g.dims2();
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); y.len()];
                if *trans_b {
                    // C = A Bᵀ, B is n×k: dA = dC B, dB = dCᵀ A
                    kernels::matmul_nn(g.data(), y.data(), &mut da, m, n, k);
                    kernels::matmul_tn(g.data(), x.data(), &mut db, m, n, k);
                } else {
                    // C = A B, B is k×n: dA = dC Bᵀ, dB = Aᵀ dC
                    kernels::matmul_nt(g.data(), y.data(), &mut da, m, n, k);
                    kernels::matmul_tn(x.data(), g.data(), &mut db, m, k, n);
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), da).expect("shape"));
                accumulate(grads, *b, Tensor::new(y.shape().to_vec(), db).expect("shape"));
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(y.data()).map(|(&u, &v)| u * v).collect();
                let db = g.data().iter().zip(x.data()).map(|(&u, &v)| u * v).collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), da).expect("shape"));
                accumulate(grads, *b, Tensor::new(y.shape().to_vec(), db).expect("shape"));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&u, &v)| kernels::gelu_grad(u) * v)
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.dims2();
                let n = F::from_usize(cols).unwrap();
                let mut dx = vec![F::zero(); rows * cols];
                let mut dg = vec![F::zero(); cols];
                let mut db = vec![F::zero(); cols];
                let mut xhat = vec![F::zero(); cols];
                let mut dxhat = vec![F::zero(); cols];
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.iter().copied().sum::<F>() / n;
                    let s = rstd[r];
                    let gr = g.row(r);
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * s;
                        dxhat[j] = gr[j] * gv.data()[j];
                        dg[j] = dg[j] + gr[j] * xhat[j];
                        db[j] = db[j] + gr[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<F>() / n;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        / n;
                    for j in 0..cols {
                        dx[r * cols + j] = s * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *gain, Tensor::new(gshape, dg).expect("shape"));
                accumulate(grads, *bias, Tensor::new(bshape, db).expect("shape"));
            }
            Op::CausalSoftmax(a) | Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2();
                let mut d = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = y.shape().to_vec();
                accumulate(grads, *a, Tensor::new(shape, d).expect("shape"));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2();
                let mut d = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..cols {
                        d[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                let shape = y.shape().to_vec();
                accumulate(grads, *a, Tensor::new(shape, d).expect("shape"));
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Pick { a, flat } => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (k, &i) in flat.iter().enumerate() {
                    d.data_mut()[i] = d.data()[i] + g.data()[k];
                }
                accumulate(grads, *a, d);
            }
            Op::Rows { a, start } => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                let (_, cols) = g.dims2();
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, d: Tensor<F>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when the leaf is disconnected.
    pub fn take_or_zero(&mut self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}
