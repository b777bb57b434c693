//! Reverse-mode autodiff over a recorded tape of primitive ops.
//!
//! Every tape value is a rank-2 tensor (vectors are 1xN, scalars 1x1).
//! Forward calls record one node per op; `backward` sweeps the tape in
//! reverse and accumulates exact gradients into a [`ParamStore`].

use crate::error::{Error, Result};
use crate::nn::store::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<String> },
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    L2NormRows(Var),
    SumAll(Var),
    MeanAll(Var),
    LogSumExpRows(Var),
    TakeDiag(Var),
    Exp(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tensor held by `v`.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Result<Var> {
        value.validate_finite()?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what}: tape values must be rank 2, got {:?}",
                t.dims()
            )));
        }
        Ok((t.dims()[0], t.dims()[1]))
    }

    /// Record a constant input (no gradient tracked).
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "tape constants must be rank 2, got {:?}",
                t.dims()
            )));
        }
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Convenience: 1xN constant row.
    pub fn constant_row(&mut self, data: Vec<S>) -> Result<Var> {
        self.constant(Tensor::row(data)?)
    }

    /// Lease a store parameter onto the tape. Trainable parameters become
    /// gradient leaves; frozen ones come in as constants, so their grads
    /// stay exactly zero through any backward pass.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let mut value = p.value.clone();
        if value.rank() == 1 {
            let n = value.len();
            value = value.reshaped(vec![1, n])?;
        }
        if value.rank() != 2 {
            return Err(Error::Shape(format!(
                "parameter {name:?} has rank {} (tape needs 1 or 2)",
                p.value.rank()
            )));
        }
        if p.trainable {
            self.push(
                value,
                Op::Leaf {
                    param: Some(name.to_string()),
                },
                true,
            )
        } else {
            self.push(value, Op::Leaf { param: None }, false)
        }
    }

    /// y = a b for (m,k) x (k,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.check_2d(a, "matmul lhs")?;
        let (kb, n) = self.check_2d(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {ka} vs {kb}"
            )));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let out = matmul_raw(va, vb, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.check_2d(a, "add lhs")?;
        let db = self.check_2d(b, "add rhs")?;
        if da != db {
            return Err(Error::Shape(format!("add dims differ: {da:?} vs {db:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(vec![da.0, da.1], data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// (m,n) + broadcast (1,n) row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "add_row lhs")?;
        let (rb, nb) = self.check_2d(b, "add_row rhs")?;
        if rb != 1 || nb != n {
            return Err(Error::Shape(format!(
                "add_row rhs must be 1x{n}, got {rb}x{nb}"
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] = data[r * n + c] + bv[c];
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AddRow(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.check_2d(a, "sub lhs")?;
        let db = self.check_2d(b, "sub rhs")?;
        if da != db {
            return Err(Error::Shape(format!("sub dims differ: {da:?} vs {db:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_parts(vec![da.0, da.1], data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.check_2d(a, "mul lhs")?;
        let db = self.check_2d(b, "mul rhs")?;
        if da != db {
            return Err(Error::Shape(format!("mul dims differ: {da:?} vs {db:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(vec![da.0, da.1], data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.check_2d(a, "scale")?;
        let k = S::from_f64(c);
        let data = self.value(a).data().iter().map(|&x| x * k).collect();
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    /// y = a * s with s a 1x1 value (e.g. a learned inverse temperature).
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "scale_var lhs")?;
        let ds = self.check_2d(s, "scale_var scalar")?;
        if ds != (1, 1) {
            return Err(Error::Shape(format!("scale_var scalar must be 1x1, got {ds:?}")));
        }
        let k = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|&x| x * k).collect();
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a) || self.needs(s);
        self.push(out, Op::ScaleVar(a, s), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "transpose")?;
        let v = self.value(a);
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = v.data()[r * n + c];
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        let needs = self.needs(a);
        self.push(out, Op::Transpose(a), needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "softmax")?;
        let v = self.value(a);
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            let row = v.row_slice(r);
            softmax_row(row, &mut data[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    /// Row-wise layer norm with affine (gamma, beta are 1xN).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.check_2d(x, "layer_norm input")?;
        if n < 2 {
            return Err(Error::Usage(format!(
                "layer_norm needs feature dim >= 2, got {n}"
            )));
        }
        if eps < 0.0 {
            return Err(Error::Usage(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let dg = self.check_2d(gamma, "layer_norm gamma")?;
        let db = self.check_2d(beta, "layer_norm beta")?;
        if dg != (1, n) || db != (1, n) {
            return Err(Error::Shape(format!(
                "layer_norm affine must be 1x{n}, got gamma {dg:?} beta {db:?}"
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            let row = xv.row_slice(r);
            let (mean, rstd) = row_moments(row, eps);
            for c in 0..n {
                let xhat = (row[c] - mean) * rstd;
                data[r * n + c] = gv[c] * xhat + bv[c];
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "gelu")?;
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a);
        self.push(out, Op::Gelu(a), needs)
    }

    /// Column means: (m,n) -> (1,n).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "mean_rows")?;
        let v = self.value(a);
        let inv = S::from_f64(1.0 / m as f64);
        let mut data = vec![S::zero(); n];
        for r in 0..m {
            for c in 0..n {
                data[c] = data[c] + v.data()[r * n + c];
            }
        }
        for d in data.iter_mut() {
            *d = *d * inv;
        }
        let out = Tensor::from_parts(vec![1, n], data);
        let needs = self.needs(a);
        self.push(out, Op::MeanRows(a), needs)
    }

    /// Column-wise max over rows: (m,n) -> (1,n). Ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "max_rows")?;
        let v = self.value(a);
        let mut data = vec![S::zero(); n];
        let mut argmax = vec![0usize; n];
        for c in 0..n {
            let mut best = v.data()[c];
            let mut best_r = 0;
            for r in 1..m {
                let x = v.data()[r * n + c];
                if x > best {
                    best = x;
                    best_r = r;
                }
            }
            data[c] = best;
            argmax[c] = best_r;
        }
        let out = Tensor::from_parts(vec![1, n], data);
        let needs = self.needs(a);
        self.push(out, Op::MaxRows { x: a, argmax }, needs)
    }

    /// Stack rows of the given values (all must share the column count).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let (_, n) = self.check_2d(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.check_2d(p, "concat_rows part")?;
            if pn != n {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {pn} vs {n}"
                )));
            }
            total += pm;
        }
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![total, n], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Concatenate along columns (all parts share the row count).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let (m, _) = self.check_2d(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.check_2d(p, "concat_cols part")?;
            if pm != m {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {pm} vs {m}"
                )));
            }
            total += pn;
        }
        let mut data = vec![S::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let pn = v.cols();
            for r in 0..m {
                let src = v.row_slice(r);
                data[r * total + off..r * total + off + pn].copy_from_slice(src);
            }
            off += pn;
        }
        let out = Tensor::from_parts(vec![m, total], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.check_2d(a, "slice_rows")?;
        if start + count > m || count == 0 {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {start}+{count}) out of {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..(start + count) * n].to_vec();
        let out = Tensor::from_parts(vec![count, n], data);
        let needs = self.needs(a);
        self.push(out, Op::SliceRows { x: a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.check_2d(a, "slice_cols")?;
        if start + count > n || count == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {start}+{count}) out of {n} cols"
            )));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(m * count);
        for r in 0..m {
            data.extend_from_slice(&v.row_slice(r)[start..start + count]);
        }
        let out = Tensor::from_parts(vec![m, count], data);
        let needs = self.needs(a);
        self.push(out, Op::SliceCols { x: a, start }, needs)
    }

    /// Row-wise L2 normalization. Errors on a (near-)zero row.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "l2_norm_rows")?;
        let v = self.value(a);
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            let row = v.row_slice(r);
            let norm = row.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
            if norm.to_f64() < 1e-12 {
                return Err(Error::Numeric(format!(
                    "l2_norm_rows: zero-norm row {r}"
                )));
            }
            for c in 0..n {
                data[r * n + c] = row[c] / norm;
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a);
        self.push(out, Op::L2NormRows(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_2d(a, "sum_all")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        let out = Tensor::from_parts(vec![1, 1], vec![s]);
        let needs = self.needs(a);
        self.push(out, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check_2d(a, "mean_all")?;
        let v = self.value(a);
        let inv = S::from_f64(1.0 / v.len() as f64);
        let s = v.data().iter().fold(S::zero(), |acc, &x| acc + x) * inv;
        let out = Tensor::from_parts(vec![1, 1], vec![s]);
        let needs = self.needs(a);
        self.push(out, Op::MeanAll(a), needs)
    }

    /// Row-wise log-sum-exp with max subtraction: (m,n) -> (m,1).
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.check_2d(a, "log_sum_exp_rows")?;
        let v = self.value(a);
        let mut data = vec![S::zero(); m];
        for r in 0..m {
            let row = v.row_slice(r);
            let max = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
            let sum = row
                .iter()
                .fold(S::zero(), |acc, &x| acc + (x - max).exp());
            data[r] = max + sum.ln();
        }
        let out = Tensor::from_parts(vec![m, 1], data);
        let needs = self.needs(a);
        self.push(out, Op::LogSumExpRows(a), needs)
    }

    /// Diagonal of a square matrix: (m,m) -> (m,1).
    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "take_diag")?;
        if m != n {
            return Err(Error::Shape(format!("take_diag needs square input, got {m}x{n}")));
        }
        let v = self.value(a);
        let data = (0..m).map(|i| v.at(i, i)).collect();
        let out = Tensor::from_parts(vec![m, 1], data);
        let needs = self.needs(a);
        self.push(out, Op::TakeDiag(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d(a, "exp")?;
        let data = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::from_parts(vec![m, n], data);
        let needs = self.needs(a);
        self.push(out, Op::Exp(a), needs)
    }

    /// Reverse sweep from a scalar loss; gradients of every trainable leaf
    /// are accumulated into `store`. Repeated calls accumulate until
    /// [`ParamStore::zero_grads`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: loss is not on this tape".into()));
        }
        let ld = self.nodes[loss.0].value.dims();
        if ld != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a 1x1 scalar loss, got {ld:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(vec![1, 1], vec![S::one()]));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backstep(idx, &gout, &mut grads)?;
            if let Op::Leaf { param: Some(name) } = &self.nodes[idx].op {
                // Rank-1 params were leased as 1xN rows; give the grad back
                // in the store's shape.
                let want = store.get(name)?.value.dims().to_vec();
                if want != gout.dims() {
                    let g = gout.clone().reshaped(want)?;
                    store.accumulate_grad(name, &g)?;
                } else {
                    store.accumulate_grad(name, &gout)?;
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(())
    }

    /// Propagate `gout` of node `idx` into its inputs.
    fn backstep(
        &self,
        idx: usize,
        gout: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.needs(*a) {
                    // dA = G B^T
                    let mut da = vec![S::zero(); m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let g = gout.data()[r * n + c];
                            if g != S::zero() {
                                for j in 0..k {
                                    da[r * k + j] = da[r * k + j] + g * vb.data()[j * n + c];
                                }
                            }
                        }
                    }
                    accumulate(grads, *a, vec![m, k], &da);
                }
                if self.needs(*b) {
                    // dB = A^T G
                    let mut db = vec![S::zero(); k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let a_val = va.data()[r * k + j];
                            if a_val != S::zero() {
                                for c in 0..n {
                                    db[j * n + c] = db[j * n + c] + a_val * gout.data()[r * n + c];
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, vec![k, n], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, gout.dims().to_vec(), gout.data());
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.dims().to_vec(), gout.data());
                }
                if self.needs(*b) {
                    let (m, n) = (gout.rows(), gout.cols());
                    let mut db = vec![S::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] = db[c] + gout.data()[r * n + c];
                        }
                    }
                    accumulate(grads, *b, vec![1, n], &db);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.dims().to_vec(), gout.data());
                }
                if self.needs(*b) {
                    let neg: Vec<S> = gout.data().iter().map(|&g| -g).collect();
                    accumulate(grads, *b, gout.dims().to_vec(), &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(grads, *a, gout.dims().to_vec(), &d);
                }
                if self.needs(*b) {
                    let d: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    accumulate(grads, *b, gout.dims().to_vec(), &d);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let k = S::from_f64(*c);
                    let d: Vec<S> = gout.data().iter().map(|&g| g * k).collect();
                    accumulate(grads, *a, gout.dims().to_vec(), &d);
                }
            }
            Op::ScaleVar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.needs(*a) {
                    let d: Vec<S> = gout.data().iter().map(|&g| g * sv).collect();
                    accumulate(grads, *a, gout.dims().to_vec(), &d);
                }
                if self.needs(*s) {
                    let ds = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .fold(S::zero(), |acc, (&g, &x)| acc + g * x);
                    accumulate(grads, *s, vec![1, 1], &[ds]);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (n, m) = (gout.rows(), gout.cols());
                    let mut d = vec![S::zero(); m * n];
                    for r in 0..n {
                        for c in 0..m {
                            d[c * n + r] = gout.data()[r * m + c];
                        }
                    }
                    accumulate(grads, *a, vec![m, n], &d);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut d = vec![S::zero(); m * n];
                    for r in 0..m {
                        let yr = y.row_slice(r);
                        let gr = &gout.data()[r * n..(r + 1) * n];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for c in 0..n {
                            d[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, *a, vec![m, n], &d);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (m, n) = (xv.rows(), xv.cols());
                let invn = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dgamma = vec![S::zero(); n];
                let mut dbeta = vec![S::zero(); n];
                for r in 0..m {
                    let row = xv.row_slice(r);
                    let (mean, rstd) = row_moments(row, *eps);
                    let gr = &gout.data()[r * n..(r + 1) * n];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv.data()[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[c] = dgamma[c] + gr[c] * xhat;
                        dbeta[c] = dbeta[c] + gr[c];
                    }
                    let mean_dxhat = sum_dxhat * invn;
                    let mean_dxhat_xhat = sum_dxhat_xhat * invn;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = gr[c] * gv.data()[c];
                        dx[r * n + c] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, vec![m, n], &dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, vec![1, n], &dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, vec![1, n], &dbeta);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let d: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    accumulate(grads, *a, gout.dims().to_vec(), &d);
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let (m, n) = (va.rows(), va.cols());
                    let inv = S::from_f64(1.0 / m as f64);
                    let mut d = vec![S::zero(); m * n];
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] = gout.data()[c] * inv;
                        }
                    }
                    accumulate(grads, *a, vec![m, n], &d);
                }
            }
            Op::MaxRows { x, argmax } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    let mut d = vec![S::zero(); m * n];
                    for c in 0..n {
                        d[argmax[c] * n + c] = gout.data()[c];
                    }
                    accumulate(grads, *x, vec![m, n], &d);
                }
            }
            Op::ConcatRows(parts) => {
                let n = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let pm = self.value(p).rows();
                    if self.needs(p) {
                        let d = &gout.data()[off * n..(off + pm) * n];
                        accumulate(grads, p, vec![pm, n], d);
                    }
                    off += pm;
                }
            }
            Op::ConcatCols(parts) => {
                let m = gout.rows();
                let total = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let pn = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = vec![S::zero(); m * pn];
                        for r in 0..m {
                            d[r * pn..(r + 1) * pn]
                                .copy_from_slice(&gout.data()[r * total + off..r * total + off + pn]);
                        }
                        accumulate(grads, p, vec![m, pn], &d);
                    }
                    off += pn;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    let count = gout.rows();
                    let mut d = vec![S::zero(); m * n];
                    d[start * n..(start + count) * n].copy_from_slice(gout.data());
                    accumulate(grads, *x, vec![m, n], &d);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let (m, n) = (vx.rows(), vx.cols());
                    let count = gout.cols();
                    let mut d = vec![S::zero(); m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + count]
                            .copy_from_slice(&gout.data()[r * count..(r + 1) * count]);
                    }
                    accumulate(grads, *x, vec![m, n], &d);
                }
            }
            Op::L2NormRows(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let (m, n) = (va.rows(), va.cols());
                    let mut d = vec![S::zero(); m * n];
                    for r in 0..m {
                        let row = va.row_slice(r);
                        let gr = &gout.data()[r * n..(r + 1) * n];
                        let norm = row.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
                        let dot = row
                            .iter()
                            .zip(gr)
                            .fold(S::zero(), |acc, (&x, &g)| acc + x * g);
                        let n3 = norm * norm * norm;
                        for c in 0..n {
                            d[r * n + c] = gr[c] / norm - row[c] * dot / n3;
                        }
                    }
                    accumulate(grads, *a, vec![m, n], &d);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let g = gout.data()[0];
                    let d = vec![g; va.len()];
                    accumulate(grads, *a, va.dims().to_vec(), &d);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let g = gout.data()[0] * S::from_f64(1.0 / va.len() as f64);
                    let d = vec![g; va.len()];
                    accumulate(grads, *a, va.dims().to_vec(), &d);
                }
            }
            Op::LogSumExpRows(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let (m, n) = (va.rows(), va.cols());
                    let mut d = vec![S::zero(); m * n];
                    let mut soft = vec![S::zero(); n];
                    for r in 0..m {
                        softmax_row(va.row_slice(r), &mut soft);
                        let g = gout.data()[r];
                        for c in 0..n {
                            d[r * n + c] = g * soft[c];
                        }
                    }
                    accumulate(grads, *a, vec![m, n], &d);
                }
            }
            Op::TakeDiag(a) => {
                if self.needs(*a) {
                    let m = self.value(*a).rows();
                    let mut d = vec![S::zero(); m * m];
                    for i in 0..m {
                        d[i * m + i] = gout.data()[i];
                    }
                    accumulate(grads, *a, vec![m, m], &d);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let d: Vec<S> = gout
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(grads, *a, gout.dims().to_vec(), &d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    dims: Vec<usize>,
    delta: &[S],
) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, &di) in g.data_mut().iter_mut().zip(delta) {
                *gi = *gi + di;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(dims, delta.to_vec()));
        }
    }
}

fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, m: usize, k: usize, n: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for r in 0..m {
        for j in 0..k {
            let av = ad[r * k + j];
            if av != S::zero() {
                let brow = &bd[j * n..(j + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for c in 0..n {
                    orow[c] = orow[c] + av * brow[c];
                }
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mean = row.iter().fold(S::zero(), |acc, &x| acc + x) / n;
    let var = row
        .iter()
        .fold(S::zero(), |acc, &x| acc + (x - mean) * (x - mean))
        / n;
    let rstd = (var + S::from_f64(eps)).sqrt().recip();
    (mean, rstd)
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let k = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let k = S::from_f64(0.7978845608028654);
    let c = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * k * (S::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
    }

    #[test]
    fn test_matmul_linear_example() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let w = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn test_matmul_shape_mismatch() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn test_softmax_reference_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        let got = tape.value(y).data();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (g, w) in got.iter().zip(want) {
            assert!(close(*g, w, 1e-7), "got {g}, want {w}");
        }
        let sum: f64 = got.iter().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn test_softmax_single_element() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![4.2]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn test_softmax_shift_invariance() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1.0, 2.0, 3.0]).unwrap();
        let xs = tape.constant_row(vec![1001.0, 1002.0, 1003.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        let ys = tape.softmax(xs).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn test_layer_norm_reference_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1.0, 2.0, 3.0]).unwrap();
        let g = tape.constant_row(vec![1.0, 1.0, 1.0]).unwrap();
        let b = tape.constant_row(vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let got = tape.value(y).data();
        let want = [-1.22474487, 0.0, 1.22474487];
        for (gv, w) in got.iter().zip(want) {
            assert!(close(*gv, w, 1e-7), "got {gv}, want {w}");
        }
    }

    #[test]
    fn test_layer_norm_affine() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1.0, 2.0, 3.0]).unwrap();
        let g = tape.constant_row(vec![2.0, 2.0, 2.0]).unwrap();
        let b = tape.constant_row(vec![1.0, 1.0, 1.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let got = tape.value(y).data();
        let want = [-1.44948975, 1.0, 3.44948975];
        for (gv, w) in got.iter().zip(want) {
            assert!(close(*gv, w, 1e-7), "got {gv}, want {w}");
        }
    }

    #[test]
    fn test_layer_norm_constant_row_small_eps_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1.0, 1.0, 1.0]).unwrap();
        let g = tape.constant_row(vec![1.0, 1.0, 1.0]).unwrap();
        let b = tape.constant_row(vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn test_layer_norm_exact_zero_eps_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        // [1,-1]: mean 0, variance 1, so the row is its own normalization.
        let x = tape.constant_row(vec![1.0, -1.0]).unwrap();
        let g = tape.constant_row(vec![1.0, 1.0]).unwrap();
        let b = tape.constant_row(vec![0.0, 0.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        // [0,2] with gamma=2, beta=1: xhat=[-1,1], y=[-1,3].
        let x = tape.constant_row(vec![0.0, 2.0]).unwrap();
        let g = tape.constant_row(vec![2.0, 2.0]).unwrap();
        let b = tape.constant_row(vec![1.0, 1.0]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 3.0]);
    }

    #[test]
    fn test_layer_norm_constant_row_zero_eps_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![5.0, 5.0, 5.0]).unwrap();
        let g = tape.constant_row(vec![1.0, 1.0, 1.0]).unwrap();
        let b = tape.constant_row(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn test_layer_norm_single_feature_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![5.0]).unwrap();
        let g = tape.constant_row(vec![1.0]).unwrap();
        let b = tape.constant_row(vec![0.0]).unwrap();
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn test_l2_norm_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = tape.l2_norm_rows(x).unwrap();
        let got = tape.value(y).data();
        assert!(close(got[0], 0.6, 1e-12));
        assert!(close(got[1], 0.8, 1e-12));
        assert!(close(got[2], 0.0, 1e-12));
        assert!(close(got[3], 1.0, 1e-12));
    }

    #[test]
    fn test_l2_norm_rows_zero_row_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 0.0]).unwrap())
            .unwrap();
        assert!(tape.l2_norm_rows(x).is_err());
    }

    #[test]
    fn test_max_rows_ties_lowest_index() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 2, vec![2.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let y = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        match &tape.nodes[y.0].op {
            Op::MaxRows { argmax, .. } => assert_eq!(argmax, &[0, 1]),
            _ => panic!("wrong op"),
        }
    }

    #[test]
    fn test_log_sum_exp_matches_naive() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.log_sum_exp_rows(x).unwrap();
        let naive0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let naive1 = ((-1f64).exp() + 0f64.exp() + 1f64.exp()).ln();
        let got = tape.value(y).data();
        assert!(close(got[0], naive0, 1e-12));
        assert!(close(got[1], naive1, 1e-12));
    }

    #[test]
    fn test_backward_sum_of_linear() {
        // loss = sum(x W) so dW = x^T 1, dx = 1 W^T.
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("w", Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap(), true)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        // dW = x^T [1,1] = [[1,1],[2,2]]
        assert_eq!(store.get("w").unwrap().grad.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn test_backward_off_path_param_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("used", Tensor::row(vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        store
            .add("unused", Tensor::row(vec![3.0, 4.0]).unwrap(), true)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let _skip = tape.param(&store, "unused").unwrap();
        let loss = tape.sum_all(u).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get("unused").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn test_backward_frozen_param_gets_no_grad() {
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("frozen", Tensor::row(vec![1.0, 2.0]).unwrap(), false)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let f = tape.param(&store, "frozen").unwrap();
        let loss = tape.sum_all(f).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("frozen").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn test_backward_accumulates_across_calls() {
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("w", Tensor::row(vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        for _ in 0..2 {
            let mut tape: Tape<f64> = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let loss = tape.sum_all(w).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.get("w").unwrap().grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn test_backward_requires_scalar_loss() {
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("w", Tensor::row(vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(tape.backward(w, &mut store).is_err());
    }

    #[test]
    fn test_shared_param_grads_sum_over_uses() {
        // loss = sum(w) + sum(2 w) so dw = 3 per element.
        let mut store: ParamStore<f64> = ParamStore::new(7);
        store
            .add("w", Tensor::row(vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let a = tape.sum_all(w).unwrap();
        let w2 = tape.scale(w, 2.0).unwrap();
        let b = tape.sum_all(w2).unwrap();
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[3.0, 3.0]);
    }

    /// Builds a network that exercises every differentiable op, returns loss.
    fn everything_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>) -> Var {
        let x = tape.param(store, "x").unwrap(); // 3x4
        let w = tape.param(store, "w").unwrap(); // 4x4
        let g = tape.param(store, "g").unwrap(); // 1x4
        let b = tape.param(store, "b").unwrap(); // 1x4
        let s = tape.param(store, "s").unwrap(); // 1x1

        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_row(h, b).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.layer_norm(h, g, b, 1e-5).unwrap();
        let ht = tape.transpose(h).unwrap();
        let sim = tape.matmul(h, ht).unwrap(); // 3x3
        let sim = tape.scale_var(sim, s).unwrap();
        let soft = tape.softmax(sim).unwrap();
        let lse = tape.log_sum_exp_rows(sim).unwrap(); // 3x1
        let diag = tape.take_diag(sim).unwrap(); // 3x1
        let gap = tape.sub(lse, diag).unwrap();
        let a = tape.mean_all(gap).unwrap();

        let pooled_mean = tape.mean_rows(h).unwrap();
        let pooled_max = tape.max_rows(h).unwrap();
        let both = tape.concat_rows(&[pooled_mean, pooled_max]).unwrap(); // 2x4
        let wide = tape.concat_cols(&[both, both]).unwrap(); // 2x8
        let sl = tape.slice_cols(wide, 2, 4).unwrap();
        let sl = tape.slice_rows(sl, 0, 2).unwrap();
        let nrm = tape.l2_norm_rows(sl).unwrap();
        let prod = tape.mul(nrm, nrm).unwrap();
        let e = tape.exp(soft).unwrap();
        let b2 = tape.sum_all(e).unwrap();
        let c = tape.sum_all(prod).unwrap();
        let ab = tape.add(a, b2).unwrap();
        let ab = tape.scale(ab, 0.5).unwrap();
        tape.add(ab, c).unwrap()
    }

    #[test]
    fn test_gradients_match_central_differences() {
        let mut store: ParamStore<f64> = ParamStore::new(11);
        let mut rng = SeededRng::new(SeededRng::derive(11, "fd-test"));
        let mk = |rng: &mut SeededRng, dims: Vec<usize>| {
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.uniform() * 2.0 - 1.0).collect();
            Tensor::new(dims, data).unwrap()
        };
        store.add("x", mk(&mut rng, vec![3, 4]), true).unwrap();
        store.add("w", mk(&mut rng, vec![4, 4]), true).unwrap();
        store
            .add("g", Tensor::new(vec![1, 4], vec![1.1, 0.9, 1.0, 1.2]).unwrap(), true)
            .unwrap();
        store.add("b", mk(&mut rng, vec![1, 4]), true).unwrap();
        store
            .add("s", Tensor::new(vec![1, 1], vec![0.7]).unwrap(), true)
            .unwrap();

        let mut tape: Tape<f64> = Tape::new();
        let loss = everything_loss(&mut tape, &store);
        tape.backward(loss, &mut store).unwrap();

        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let h = 1e-5;
        for name in &names {
            let len = store.get(name).unwrap().value.len();
            for i in 0..len {
                let orig = store.get(name).unwrap().value.data()[i];
                store.get_mut(name).unwrap().value.data_mut()[i] = orig + h;
                let mut tp: Tape<f64> = Tape::new();
                let lp = everything_loss(&mut tp, &store);
                let fp = tp.value(lp).data()[0];
                store.get_mut(name).unwrap().value.data_mut()[i] = orig - h;
                let mut tm: Tape<f64> = Tape::new();
                let lm = everything_loss(&mut tm, &store);
                let fm = tm.value(lm).data()[0];
                store.get_mut(name).unwrap().value.data_mut()[i] = orig;

                let fd = (fp - fm) / (2.0 * h);
                let an = store.get(name).unwrap().grad.data()[i];
                assert!(
                    rel_err(an, fd) <= 1e-4,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn test_gelu_values() {
        // Reference points for the tanh approximation.
        assert!(close(gelu_scalar(0.0f64), 0.0, 1e-12));
        assert!(close(gelu_scalar(1.0f64), 0.8411919906082768, 1e-9));
        assert!(close(gelu_scalar(-1.0f64), -0.15880801, 1e-6));
        // Reflection identity: gelu(x) - gelu(-x) == x.
        for x in [0.3f64, 1.7, 2.9] {
            assert!(close(gelu_scalar(x) - gelu_scalar(-x), x, 1e-9));
        }
    }

    #[test]
    fn test_nonfinite_output_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant_row(vec![1e308, 1e308]).unwrap();
        assert!(tape.add(x, x).is_err());
    }
}

