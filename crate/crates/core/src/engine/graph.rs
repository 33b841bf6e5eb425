//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so node inputs
//! always precede the node itself. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients for every node that depends on a
//! gradient-requiring leaf.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Maximum(Var, Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Diag(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread per training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m,n] + row[n]` broadcast over rows. `row` may be `[n]` or `[1,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let r = self.value(row);
        if r.numel() != n || r.rank() > 2 || (r.rank() == 2 && r.shape()[0] != 1) {
            return Err(Error::dim(format!(
                "row broadcast of {:?} onto [{m}x{n}]",
                r.shape()
            )));
        }
        let mut out = self.value(a).clone();
        let rd = r.data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&rd) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a[m,n] * col[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let c = self.value(col);
        if c.shape() != [m, 1] {
            return Err(Error::dim(format!(
                "column broadcast of {:?} onto [{m}x{n}]",
                c.shape()
            )));
        }
        let cd = c.data().to_vec();
        let mut out = self.value(a).clone();
        for (i, &ci) in cd.iter().enumerate() {
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o *= ci;
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f64::max)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Maximum(a, b), rg))
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = reduce(self.value(a), axis, |s| s.iter().sum())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = reduce(self.value(a), axis, |s| {
            s.iter().sum::<f64>() / s.len() as f64
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    /// Max over `axis`. Ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, extent, inner) = t.axis_split(axis)?;
        let shape = t.shape_without(axis);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = t.data()[o * extent * inner + i];
                for e in 1..extent {
                    let v = t.data()[(o * extent + e) * inner + i];
                    if v > bv {
                        bv = v;
                        best = e;
                    }
                }
                vals.push(bv);
                argmax.push(best);
            }
        }
        let out = Tensor::new(shape, vals)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Max {
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut norms = Vec::with_capacity(m);
        let mut out = t.clone();
        for i in 0..m {
            let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "row {i} has norm {norm:e}, cannot normalize"
                )));
            }
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2Normalize { input: a, norms }, rg))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, da) = self.value(a).dims2()?;
        let (_, db) = self.value(b).dims2()?;
        if da != db {
            return Err(Error::dim(format!("feature width {da} vs {db}")));
        }
        let an = self.l2_normalize(a)?;
        let bn = if a == b { an } else { self.l2_normalize(b)? };
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Row-wise softmax computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = t.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Per-row `-log softmax(logits)[target]`, returned as `[m]`.
    ///
    /// Entries flagged in `excluded` (row-major, `m*n`) are left out of the
    /// softmax denominator. A target may not be excluded.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.dims2()?;
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(ex) = excluded {
            if ex.len() != m * n {
                return Err(Error::dim("exclusion mask size"));
            }
        }
        let is_ex = |i: usize, j: usize| excluded.is_some_and(|ex| ex[i * n + j]);
        let mut probs = Tensor::zeros(&[m, n]);
        let mut losses = Vec::with_capacity(m);
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= n {
                return Err(Error::Index(format!("target {tgt} for {n} classes")));
            }
            if is_ex(i, tgt) {
                return Err(Error::Contract(format!("row {i} excludes its own target")));
            }
            let row = t.row(i);
            let mx = (0..n)
                .filter(|&j| !is_ex(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let prow = &mut probs.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                if !is_ex(i, j) {
                    prow[j] = (row[j] - mx).exp();
                    z += prow[j];
                }
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            losses.push(mx + z.ln() - row[tgt]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::vector(losses),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Main diagonal of a square matrix as `[n]`.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if m != n {
            return Err(Error::dim(format!("diag of non-square [{m}x{n}]")));
        }
        let out = Tensor::vector((0..n).map(|i| t.at(i, i)).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Diag(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("empty concat"))?;
        let (_, n) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::dim(format!("concat_rows width {pn} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("empty concat"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::dim(format!("concat_cols height {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("columns {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { input: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul_t(false, val(*b), true)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = val(*a).matmul_t(true, g, false)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let (m, n) = g.dims2()?;
                let mut col_sums = vec![0.0; n];
                for i in 0..m {
                    for (s, x) in col_sums.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                let shape = val(*row).shape().to_vec();
                self.accumulate(grads, *row, Tensor::new(shape, col_sums)?);
            }
            Op::MulCol(a, col) => {
                let (m, n) = g.dims2()?;
                let c = val(*col);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gc = vec![0.0; m];
                for i in 0..m {
                    let ci = c.data()[i];
                    for j in 0..n {
                        ga.data_mut()[i * n + j] *= ci;
                        gc[i] += g.at(i, j) * av.at(i, j);
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *col, Tensor::new(vec![m, 1], gc)?);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y)?),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)?),
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for k in 0..g.numel() {
                    if av.data()[k] >= bv.data()[k] {
                        gb.data_mut()[k] = 0.0;
                    } else {
                        ga.data_mut()[k] = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(a, axis) => self.accumulate(grads, *a, broadcast_back(g, val(*a), *axis, false)?),
            Op::Mean(a, axis) => self.accumulate(grads, *a, broadcast_back(g, val(*a), *axis, true)?),
            Op::Max {
                input,
                axis,
                argmax,
            } => {
                let src = val(*input);
                let (outer, extent, inner) = src.axis_split(*axis)?;
                let mut gi = Tensor::zeros(src.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        gi.data_mut()[(o * extent + argmax[k]) * inner + i] += g.data()[k];
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut gi = Tensor::zeros(&[m, n]);
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gi.data_mut()[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut gi = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gi.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, gi);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (_, n) = probs.dims2()?;
                let mut gi = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gi.data_mut()[i * n + t] -= 1.0;
                    let gr = g.data()[i];
                    for v in &mut gi.data_mut()[i * n..(i + 1) * n] {
                        *v *= gr;
                    }
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::Diag(a) => {
                let n = g.numel();
                let mut gi = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    gi.data_mut()[i * n + i] = g.data()[i];
                }
                self.accumulate(grads, *a, gi);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    let part = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    self.accumulate(grads, p, part);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                    }
                    start += w;
                    self.accumulate(grads, p, Tensor::new(vec![m, w], data)?);
                }
            }
            Op::SliceCols { input, start } => {
                let src = val(*input);
                let (m, n) = src.dims2()?;
                let (_, w) = g.dims2()?;
                let mut gi = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    gi.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.reshape(val(*a).shape().to_vec())?),
        }
        Ok(())
    }
}

fn reduce(t: &Tensor, axis: Option<usize>, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(f(t.data()))),
        Some(axis) => {
            let (outer, extent, inner) = t.axis_split(axis)?;
            let mut out = Vec::with_capacity(outer * inner);
            let mut buf = Vec::with_capacity(extent);
            for o in 0..outer {
                for i in 0..inner {
                    buf.clear();
                    buf.extend((0..extent).map(|e| t.data()[(o * extent + e) * inner + i]));
                    out.push(f(&buf));
                }
            }
            Tensor::new(t.shape_without(axis), out)
        }
    }
}

fn broadcast_back(g: &Tensor, src: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let scale = if mean { 1.0 / src.numel() as f64 } else { 1.0 };
            Ok(Tensor::full(src.shape(), g.item() * scale))
        }
        Some(axis) => {
            let (outer, extent, inner) = src.axis_split(axis)?;
            let scale = if mean { 1.0 / extent as f64 } else { 1.0 };
            let mut out = Tensor::zeros(src.shape());
            for o in 0..outer {
                for e in 0..extent {
                    for i in 0..inner {
                        out.data_mut()[(o * extent + e) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let b = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let a = g.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(m(&[&[0.0], &[5.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Tensor::vector(vec![0.0]));
        let e = g.exp(z);
        assert_eq!(g.value(e).data(), &[1.0]);

        let x = g.constant(Tensor::vector(vec![0.5, 1.5]));
        let e = g.exp(x);
        let l = g.log(e).unwrap();
        for (a, b) in g.value(l).data().iter().zip([0.5, 1.5]) {
            assert!((a - b).abs() < 1e-15);
        }

        let bad = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(bad), Err(Error::Domain(_))));
        let other = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add(bad, other).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(v, None).unwrap();
        assert_eq!(g.value(s).item(), 6.0);

        let a = g.constant(m(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let mn = g.mean(a, Some(0)).unwrap();
        assert_eq!(g.value(mn).data(), &[3.0, 5.0]);

        let b = g.constant(m(&[&[1.0, 9.0], &[4.0, 2.0]]));
        let mx = g.max(b, 1).unwrap();
        assert_eq!(g.value(mx).data(), &[9.0, 4.0]);

        assert!(g.sum(b, Some(2)).is_err());
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[2.0, 2.0, 1.0]]));
        let mx = g.max(x, 1).unwrap();
        let s = g.sum(mx, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[3.0, 4.0], &[1.0, 0.0], &[21.0, 28.0]]));
        let y = g.l2_normalize(x).unwrap();
        let y = g.value(y);
        assert!((y.at(0, 0) - 0.6).abs() < 1e-15 && (y.at(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.row(0), y.row(2));

        let z = g.constant(m(&[&[0.0, 0.0]]));
        assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 0.0]]));
        let b = g.constant(m(&[&[0.0, 1.0]]));
        let s = g.cosine_sim_matrix(a, b).unwrap();
        assert_eq!(g.value(s).item(), 0.0);

        let a2 = g.constant(m(&[&[2.0, 0.0]]));
        let s = g.cosine_sim_matrix(a2, a2).unwrap();
        assert_eq!(g.value(s).item(), 1.0);

        let c = g.constant(m(&[&[0.6, 0.8]]));
        let s = g.cosine_sim_matrix(a, c).unwrap();
        assert!((g.value(s).item() - 0.6).abs() < 1e-15);

        let z = g.constant(m(&[&[0.0, 0.0]]));
        assert!(g.cosine_sim_matrix(a, z).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0], &[1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);

        let a = g.constant(m(&[&[0.3, -1.2, 2.0]]));
        let b = g.add_scalar(a, 17.5);
        let ya = g.softmax_rows(a).unwrap();
        let yb = g.softmax_rows(b).unwrap();
        for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0]);

        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0]));
        let r = g.relu(x);
        let s = g.sum(r, None).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn topological_order_holds() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0]));
        let b = g.exp(a);
        let c = g.add(a, b).unwrap();
        assert!(a.index() < b.index() && b.index() < c.index());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient_of_its_shape() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::scalar(2.0));
        let s = g.sum(b, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).shape(), &[2, 3]);
        assert!(grads.get(a).is_none());
    }
}
