use std::borrow::Cow;

use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough(Var),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
}

/// Single-use reverse-mode tape. Parameter leaves borrow their values from
/// the [`ParamSet`] the graph was built over.
pub struct Graph<'a> {
    params: &'a ParamSet,
    nodes: Vec<Node<'a>>,
    detached: Detached,
}

/// Optional record/replay of stop-gradient values, used by gradient checking
/// to hold detached branches fixed while parameters are perturbed.
#[derive(Debug, Default)]
enum Detached {
    #[default]
    Off,
    Record(Vec<Vec<f64>>),
    Replay(Vec<Vec<f64>>, usize),
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, rest)) => (rest.iter().product(), last),
        None => (1, 1),
    }
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is m×k and `op(b)` is k×n.
/// `ta`/`tb` mean the stored operand is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked against the logical dimensions and the
    // strides above address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            detached: Detached::Off,
        }
    }

    pub(crate) fn recording(params: &'a ParamSet) -> Self {
        Self {
            detached: Detached::Record(Vec::new()),
            ..Self::new(params)
        }
    }

    pub(crate) fn replaying(params: &'a ParamSet, values: Vec<Vec<f64>>) -> Self {
        Self {
            detached: Detached::Replay(values, 0),
            ..Self::new(params)
        }
    }

    pub(crate) fn take_recorded(&mut self) -> Vec<Vec<f64>> {
        match std::mem::take(&mut self.detached) {
            Detached::Record(v) | Detached::Replay(v, _) => v,
            Detached::Off => Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op:?}",
                op = op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "input",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.push(data, shape, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_id(id))
    }

    pub fn param_id(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&t.data),
            shape: t.shape.clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2("matmul", a)?;
        let (k2, m) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            0.0,
        );
        self.push(out, vec![n, m], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(out, vec![c, r], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(out, self.shape(a).to_vec(), Op::Add(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        self.push(out, self.shape(a).to_vec(), Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(out, self.shape(a).to_vec(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(out, self.shape(a).to_vec(), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(out, self.shape(a).to_vec(), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(out, self.shape(a).to_vec(), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(out, self.shape(a).to_vec(), Op::Gelu(a))
    }

    /// Normalizes each row over its last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, self.shape(a).to_vec(), Op::Softmax(a))
    }

    /// Gathers rows of a `[V, m]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, m) = self.rank2("embedding", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Range(format!(
                "embedding index {bad} out of range for table of {v} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            out.extend_from_slice(&tv[i * m..(i + 1) * m]);
        }
        self.push(
            out,
            vec![indices.len(), m],
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.rank2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Range(format!(
                "target class {bad} out of range for {v} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let row = &lv[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![s / n], vec![1], Op::Mse(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.rank2("concat_rows", *first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.rank2("concat_rows", p)?;
            if c2 != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {c} vs {c2}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push(out, vec![rows, c], Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (r, _) = self.rank2("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.rank2("concat_cols", p)?;
            if r2 != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {r} vs {r2}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(out, vec![r, total], Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_rows", a)?;
        if start > end || end > r {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {end}) of {r} rows"),
            ));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        self.push(out, vec![end - start, c], Op::SliceRows(a, start))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rank2("slice_cols", a)?;
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {end}) of {c} columns"),
            ));
        }
        let v = self.value(a);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        self.push(out, vec![r, w], Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![s / n], vec![1], Op::Mean(a))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        self.push(out, shape, Op::Reshape(a))
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).to_vec();
        match &mut self.detached {
            Detached::Off => {}
            Detached::Record(vals) => vals.push(out.clone()),
            Detached::Replay(vals, cursor) => {
                match vals.get(*cursor) {
                    Some(v) if v.len() == out.len() => out.clone_from(v),
                    _ => {
                        return Err(Error::State(
                            "stop-gradient replay does not match the recorded graph".into(),
                        ))
                    }
                }
                *cursor += 1;
            }
        }
        self.push(out, self.shape(a).to_vec(), Op::StopGradient)
    }

    /// Forward value exactly `b`; the gradient of the output goes to `a`
    /// unchanged and nothing reaches `b`. Equivalent to `a + sg(b - a)`.
    pub fn straight_through(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("straight_through", a, b)?;
        let out = match &mut self.detached {
            Detached::Off => self.value(b).to_vec(),
            Detached::Record(vals) => {
                let d = self.nodes[b.0]
                    .value
                    .iter()
                    .zip(self.nodes[a.0].value.iter())
                    .map(|(q, c)| q - c)
                    .collect();
                vals.push(d);
                self.nodes[b.0].value.to_vec()
            }
            Detached::Replay(vals, cursor) => {
                let Some(d) = vals
                    .get(*cursor)
                    .filter(|d| d.len() == self.nodes[a.0].value.len())
                else {
                    return Err(Error::State(
                        "stop-gradient replay does not match the recorded graph".into(),
                    ));
                };
                *cursor += 1;
                self.nodes[a.0]
                    .value
                    .iter()
                    .zip(d)
                    .map(|(c, d)| c + d)
                    .collect()
            }
        };
        self.push(out, self.shape(a).to_vec(), Op::StraightThrough(a))
    }

    /// Valid 1-D convolution. `x: [c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (cin, len) = self.rank2("conv1d", x)?;
        let (cout, cin2, k) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight must be rank 3, got {s:?}"),
                ))
            }
        };
        if cin != cin2 || self.value(b).len() != cout || stride == 0 || k == 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        if len < k {
            return Err(Error::TooShort(format!(
                "conv1d input length {len} is shorter than kernel {k}"
            )));
        }
        let lout = (len - k) / stride + 1;
        let xv = self.value(x);
        let mut cols = vec![0.0; cin * k * lout];
        for ci in 0..cin {
            for j in 0..k {
                let dst = &mut cols[(ci * k + j) * lout..(ci * k + j + 1) * lout];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = xv[ci * len + t * stride + j];
                }
            }
        }
        let mut out = vec![0.0; cout * lout];
        let bv = self.value(b);
        for (co, row) in out.chunks_mut(lout).enumerate() {
            row.iter_mut().for_each(|v| *v = bv[co]);
        }
        gemm(
            cout,
            cin * k,
            lout,
            self.value(w),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        self.push(
            out,
            vec![cout, lout],
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            },
        )
    }

    /// Transposed 1-D convolution. `x: [c_in, len]`, `w: [c_in, c_out, k]`,
    /// `b: [c_out]`; output length `(len - 1) * stride + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (cin, len) = self.rank2("conv_transpose1d", x)?;
        let (cin2, cout, k) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::shape(
                    "conv_transpose1d",
                    format!("weight must be rank 3, got {s:?}"),
                ))
            }
        };
        if cin != cin2 || self.value(b).len() != cout || stride == 0 || k == 0 || len == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let lout = (len - 1) * stride + k;
        // patches[co*k + j, t] = sum_ci w[ci, co, j] * x[ci, t]
        let mut patches = vec![0.0; cout * k * len];
        gemm(
            cout * k,
            cin,
            len,
            self.value(w),
            true,
            self.value(x),
            false,
            &mut patches,
            0.0,
        );
        let bv = self.value(b);
        let mut out = vec![0.0; cout * lout];
        for co in 0..cout {
            let orow = &mut out[co * lout..(co + 1) * lout];
            orow.iter_mut().for_each(|v| *v = bv[co]);
            for j in 0..k {
                let prow = &patches[(co * k + j) * len..(co * k + j + 1) * len];
                for (t, p) in prow.iter().enumerate() {
                    orow[t * stride + j] += p;
                }
            }
        }
        self.push(
            out,
            vec![cout, lout],
            Op::ConvTranspose1d { x, w, b, stride },
        )
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_grads: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                match param_grads.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => param_grads.push((id, g)),
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (n, k) = rows_cols(self.shape(*a));
                let m = self.shape(*b)[1];
                let mut da = vec![0.0; n * k];
                gemm(n, m, k, g, false, self.value(*b), true, &mut da, 0.0);
                acc(grads, *a, &da);
                let mut db = vec![0.0; k * m];
                gemm(k, n, m, self.value(*a), true, g, false, &mut db, 0.0);
                acc(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        da[i2 * c + j] = g[j * r + i2];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g);
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(grads, *b, &db);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(d, &x)| d * gelu_grad(x))
                    .collect();
                acc(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = rows_cols(&node.shape);
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i2 in 0..r {
                    let gr = &g[i2 * c..(i2 + 1) * c];
                    let hr = &xhat[i2 * c..(i2 + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[i2 * c + j] = inv_std[i2] / cf * (cf * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *gamma, &dgamma);
                acc(grads, *beta, &dbeta);
            }
            Op::Softmax(a) => {
                let (_, c) = rows_cols(&node.shape);
                let y = &node.value;
                let mut da = vec![0.0; y.len()];
                for ((drow, yrow), grow) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Embedding { table, indices } => {
                let m = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..m {
                        dt[idx * m + j] += g[r * m + j];
                    }
                }
                acc(grads, *table, &dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] -= scale;
                    }
                }
                acc(grads, *logits, &dl);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len().max(1) as f64;
                let da: Vec<f64> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    let mut dp = vec![0.0; r * w];
                    for i2 in 0..r {
                        dp[i2 * w..(i2 + 1) * w]
                            .copy_from_slice(&g[i2 * total + off..i2 * total + off + w]);
                    }
                    acc(grads, *p, &dp);
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a)[1];
                let mut da = vec![0.0; self.value(*a).len()];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                acc(grads, *a, &da);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = rows_cols(self.shape(*a));
                let w = node.shape[1];
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    da[i2 * c + start..i2 * c + start + w]
                        .copy_from_slice(&g[i2 * w..(i2 + 1) * w]);
                }
                acc(grads, *a, &da);
            }
            Op::Reshape(a) | Op::StraightThrough(a) => acc(grads, *a, g),
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                acc(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0] / n.max(1) as f64; n];
                acc(grads, *a, &da);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let (cin, len) = rows_cols(self.shape(*x));
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let lout = node.shape[1];
                let mut dw = vec![0.0; cout * cin * k];
                gemm(cout, lout, cin * k, g, false, cols, true, &mut dw, 0.0);
                acc(grads, *w, &dw);
                let db: Vec<f64> = g.chunks(lout).map(|row| row.iter().sum()).collect();
                acc(grads, *b, &db);
                let mut dcols = vec![0.0; cin * k * lout];
                gemm(
                    cin * k,
                    cout,
                    lout,
                    self.value(*w),
                    true,
                    g,
                    false,
                    &mut dcols,
                    0.0,
                );
                let mut dx = vec![0.0; cin * len];
                for ci in 0..cin {
                    for j in 0..k {
                        let src = &dcols[(ci * k + j) * lout..(ci * k + j + 1) * lout];
                        for (t, d) in src.iter().enumerate() {
                            dx[ci * len + t * stride + j] += d;
                        }
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let (cin, len) = rows_cols(self.shape(*x));
                let (cout, k) = (self.shape(*w)[1], self.shape(*w)[2]);
                let lout = node.shape[1];
                let mut dpatch = vec![0.0; cout * k * len];
                for co in 0..cout {
                    for j in 0..k {
                        let dst = &mut dpatch[(co * k + j) * len..(co * k + j + 1) * len];
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = g[co * lout + t * stride + j];
                        }
                    }
                }
                let mut dw = vec![0.0; cin * cout * k];
                gemm(
                    cin,
                    len,
                    cout * k,
                    self.value(*x),
                    false,
                    &dpatch,
                    true,
                    &mut dw,
                    0.0,
                );
                acc(grads, *w, &dw);
                let mut dx = vec![0.0; cin * len];
                gemm(
                    cin,
                    cout * k,
                    len,
                    self.value(*w),
                    false,
                    &dpatch,
                    false,
                    &mut dx,
                    0.0,
                );
                acc(grads, *x, &dx);
                let db: Vec<f64> = g.chunks(lout).map(|row| row.iter().sum()).collect();
                acc(grads, *b, &db);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
    match &mut grads[v.0] {
        Some(gv) => gv.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Mse(..) => "mse",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::StopGradient => "stop_gradient",
        Op::Reshape(_) => "reshape",
        Op::StraightThrough(_) => "straight_through",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvTranspose1d { .. } => "conv_transpose1d",
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, `None` if no path exists.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// One entry per parameter referenced by the graph, zero-filled where no
    /// gradient reached it.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }
}
