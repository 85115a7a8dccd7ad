//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are only
//! ever appended, so the node list is already in topological order and the
//! backward sweep is a single reverse pass over it.

use super::params::{Gradients, ParamId, ParamStore};
use super::{matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, softmax, Tensor};
use crate::error::{GtpError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    RowNorms(Var),
    Sum(Var),
    Mean(Var),
    NegLogAt(Var, usize),
    NegLogRows(Var, Vec<usize>),
    Reshape(Var),
    RepeatRows(Var, usize),
    SoftmaxRows(Var),
    Combine(Var, Var),
    Gru(Box<GruSaved>),
}

#[derive(Debug)]
struct GruSaved {
    h: Var,
    x: Var,
    wx: Var,
    wh: Var,
    b: Var,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

/// Computation record for one forward pass over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(GtpError::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `a[m×n] + row[1×n]`, broadcasting the row over `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(GtpError::dim(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tr.shape()),
            ));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::matrix(ta.rows(), n, data)?;
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Softmax over every entry of `a`, preserving its shape.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(GtpError::contract("softmax of an empty tensor"));
        }
        if !ta.is_finite() {
            return Err(GtpError::NonFinite {
                context: "softmax input".into(),
            });
        }
        let out = Tensor::new(ta.shape().to_vec(), softmax(ta.data()))?;
        Ok(self.push(Op::Softmax(a), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(GtpError::dim(
                "concat_cols",
                format!("{:?} | {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (p, q) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.rows() * (p + q));
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let out = Tensor::matrix(ta.rows(), p + q, data)?;
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Euclidean norm of each row: `[m×n] -> [m×1]`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = (0..ta.rows())
            .map(|r| ta.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data).expect("column");
        self.push(Op::RowNorms(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(GtpError::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(ta.sum() / ta.len() as f64);
        Ok(self.push(Op::Mean(a), out))
    }

    /// `-ln(max(a[index], 1e-12))` as a scalar.
    pub fn neg_log_at(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        let Some(&p) = ta.data().get(index) else {
            return Err(GtpError::contract(format!(
                "index {index} out of range for {} entries",
                ta.len()
            )));
        };
        if p < LOG_CLAMP {
            log::warn!("probability {p:e} clamped to {LOG_CLAMP:e} before log");
        }
        let out = Tensor::scalar(-p.max(LOG_CLAMP).ln());
        Ok(self.push(Op::NegLogAt(a, index), out))
    }

    /// Mean over rows of `-ln(max(a[r, targets[r]], 1e-12))`.
    pub fn neg_log_rows(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if targets.len() != ta.rows() || targets.is_empty() {
            return Err(GtpError::contract(format!(
                "{} targets for {} rows",
                targets.len(),
                ta.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= ta.cols() {
                return Err(GtpError::contract(format!("target {t} out of range for {} columns", ta.cols())));
            }
            let p = ta.get(r, t);
            if p < LOG_CLAMP {
                log::warn!("probability {p:e} clamped to {LOG_CLAMP:e} before log");
            }
            total += -p.max(LOG_CLAMP).ln();
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(Op::NegLogRows(a, targets.to_vec()), out))
    }

    /// Same row-major data viewed as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = Tensor::matrix(rows, cols, self.value(a).data().to_vec())
            .map_err(|_| GtpError::dim("reshape", format!("{:?} to [{rows}, {cols}]", self.value(a).shape())))?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// `[m×d] -> [(m·n)×d]`, each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.len() * n);
        for r in 0..ta.rows() {
            for _ in 0..n {
                data.extend_from_slice(ta.row_slice(r));
            }
        }
        let out = Tensor::matrix(ta.rows() * n, ta.cols(), data).expect("repeat");
        self.push(Op::RepeatRows(a, n), out)
    }

    /// Softmax applied to each row independently.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(GtpError::contract("softmax of an empty row"));
        }
        if !ta.is_finite() {
            return Err(GtpError::NonFinite {
                context: "softmax input".into(),
            });
        }
        let mut data = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            data.extend(softmax(ta.row_slice(r)));
        }
        let out = Tensor::matrix(ta.rows(), ta.cols(), data)?;
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Per-row convex combination: `weights[m×n]`, `items[(m·n)×d]` ->
    /// `[m×d]` with row `b` equal to `Σ_i weights[b,i] · items[b·n+i]`.
    pub fn combine(&mut self, weights: Var, items: Var) -> Result<Var> {
        let (tw, te) = (self.value(weights), self.value(items));
        let (m, n, d) = (tw.rows(), tw.cols(), te.cols());
        if te.rows() != m * n {
            return Err(GtpError::dim("combine", format!("{:?} with {:?}", tw.shape(), te.shape())));
        }
        let mut data = vec![0.0; m * d];
        for b in 0..m {
            let out = &mut data[b * d..(b + 1) * d];
            for i in 0..n {
                let w = tw.get(b, i);
                for (o, e) in out.iter_mut().zip(te.row_slice(b * n + i)) {
                    *o += w * e;
                }
            }
        }
        let out = Tensor::matrix(m, d, data)?;
        Ok(self.push(Op::Combine(weights, items), out))
    }

    /// Fused GRU cell over `m` rows.
    ///
    /// Weight layout: `wx: [d_x × 3d_h]`, `wh: [d_h × 3d_h]`, `b: [1 × 3d_h]`,
    /// gate columns ordered update | reset | candidate.
    ///
    /// ```text
    /// z  = σ(x Wz + h Uz + bz)
    /// r  = σ(x Wr + h Ur + br)
    /// n  = tanh(x Wn + (r ⊙ h) Un + bn)
    /// h' = (1 - z) ⊙ h + z ⊙ n
    /// ```
    pub fn gru_cell(&mut self, h: Var, x: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let (th, tx) = (self.value(h), self.value(x));
        let (twx, twh, tb) = (self.value(wx), self.value(wh), self.value(b));
        let (m, d, dx) = (th.rows(), th.cols(), tx.cols());
        if tx.rows() != m
            || twx.rows() != dx
            || twx.cols() != 3 * d
            || twh.rows() != d
            || twh.cols() != 3 * d
            || tb.len() != 3 * d
        {
            return Err(GtpError::dim(
                "gru_cell",
                format!(
                    "h {:?}, x {:?}, wx {:?}, wh {:?}, b {:?}",
                    th.shape(),
                    tx.shape(),
                    twx.shape(),
                    twh.shape(),
                    tb.shape()
                ),
            ));
        }
        let d3 = 3 * d;
        let mut ax = vec![0.0; m * d3];
        matmul_into(tx.data(), twx.data(), &mut ax, m, dx, d3);
        // h · [Uz | Ur]
        let mut ah = vec![0.0; m * 2 * d];
        let (hd, whd) = (th.data(), twh.data());
        for i in 0..m {
            for p in 0..d {
                let hv = hd[i * d + p];
                if hv == 0.0 {
                    continue;
                }
                let w_row = &whd[p * d3..p * d3 + 2 * d];
                for (o, w) in ah[i * 2 * d..(i + 1) * 2 * d].iter_mut().zip(w_row) {
                    *o += hv * w;
                }
            }
        }
        let bd = tb.data();
        let mut z = vec![0.0; m * d];
        let mut r = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                z[i * d + j] = sigmoid(ax[i * d3 + j] + ah[i * 2 * d + j] + bd[j]);
                r[i * d + j] = sigmoid(ax[i * d3 + d + j] + ah[i * 2 * d + d + j] + bd[d + j]);
            }
        }
        let rh: Vec<f64> = r.iter().zip(hd).map(|(a, b)| a * b).collect();
        let mut an = vec![0.0; m * d];
        for i in 0..m {
            for p in 0..d {
                let v = rh[i * d + p];
                if v == 0.0 {
                    continue;
                }
                let w_row = &whd[p * d3 + 2 * d..(p + 1) * d3];
                for (o, w) in an[i * d..(i + 1) * d].iter_mut().zip(w_row) {
                    *o += v * w;
                }
            }
        }
        let mut n = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                let k = i * d + j;
                n[k] = (ax[i * d3 + 2 * d + j] + an[k] + bd[2 * d + j]).tanh();
                out[k] = (1.0 - z[k]) * hd[k] + z[k] * n[k];
            }
        }
        let out = Tensor::matrix(m, d, out)?;
        Ok(self.push(
            Op::Gru(Box::new(GruSaved {
                h,
                x,
                wx,
                wh,
                b,
                z,
                r,
                n,
                rh,
            })),
            out,
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning one gradient per stored parameter.
    ///
    /// Parameters the loss does not depend on receive zeros. The tape is not
    /// consumed, so the sweep can be replayed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GtpError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::zeros_for(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = out.get_mut(*id);
                    for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    matmul_nt_into(g.data(), tb.data(), self.slot(&mut grads, *a), m, n, k);
                    matmul_tn_into(ta.data(), g.data(), self.slot(&mut grads, *b), k, m, n);
                }
                Op::Add(a, b) => {
                    axpy(self.slot(&mut grads, *a), g.data(), 1.0);
                    axpy(self.slot(&mut grads, *b), g.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    axpy(self.slot(&mut grads, *a), g.data(), 1.0);
                    axpy(self.slot(&mut grads, *b), g.data(), -1.0);
                }
                Op::AddRow(a, row) => {
                    axpy(self.slot(&mut grads, *a), g.data(), 1.0);
                    let n = g.cols();
                    let dst = self.slot(&mut grads, *row);
                    for chunk in g.data().chunks(n) {
                        axpy(dst, chunk, 1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let dst = self.slot(&mut grads, *a);
                    for ((d, gv), bv) in dst.iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += gv * bv;
                    }
                    let dst = self.slot(&mut grads, *b);
                    for ((d, gv), av) in dst.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
                Op::Scale(a, f) => axpy(self.slot(&mut grads, *a), g.data(), *f),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    let dst = self.slot(&mut grads, *a);
                    for ((d, gv), yv) in dst.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let dst = self.slot(&mut grads, *a);
                    for ((d, gv), yv) in dst.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("value");
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let dst = self.slot(&mut grads, *a);
                    for ((d, gv), yv) in dst.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += yv * (gv - dot);
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    axpy(self.slot(&mut grads, *a), gt.data(), 1.0);
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    let rows = g.rows();
                    {
                        let dst = self.slot(&mut grads, *a);
                        for r in 0..rows {
                            axpy(&mut dst[r * p..(r + 1) * p], &g.row_slice(r)[..p], 1.0);
                        }
                    }
                    let dst = self.slot(&mut grads, *b);
                    for r in 0..rows {
                        axpy(&mut dst[r * q..(r + 1) * q], &g.row_slice(r)[p..], 1.0);
                    }
                }
                Op::RowNorms(a) => {
                    let ta = self.value(*a);
                    let y = node.value.as_ref().expect("value");
                    let n = ta.cols();
                    let dst = self.slot(&mut grads, *a);
                    for r in 0..ta.rows() {
                        let norm = y.data()[r];
                        // subgradient 0 at the kink
                        if norm == 0.0 {
                            continue;
                        }
                        let coef = g.data()[r] / norm;
                        for c in 0..n {
                            dst[r * n + c] += coef * ta.data()[r * n + c];
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    self.slot(&mut grads, *a).iter_mut().for_each(|d| *d += gv);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.data()[0] / n;
                    self.slot(&mut grads, *a).iter_mut().for_each(|d| *d += gv);
                }
                Op::NegLogAt(a, index) => {
                    let p = self.value(*a).data()[*index];
                    // clamped region is flat
                    if p >= LOG_CLAMP {
                        self.slot(&mut grads, *a)[*index] += -g.data()[0] / p;
                    }
                }
                Op::NegLogRows(a, targets) => {
                    let ta = self.value(*a);
                    let cols = ta.cols();
                    let scale = g.data()[0] / targets.len() as f64;
                    let probs: Vec<f64> = targets.iter().enumerate().map(|(r, &t)| ta.get(r, t)).collect();
                    let dst = self.slot(&mut grads, *a);
                    for (r, (&t, p)) in targets.iter().zip(probs).enumerate() {
                        if p >= LOG_CLAMP {
                            dst[r * cols + t] += -scale / p;
                        }
                    }
                }
                Op::Reshape(a) => axpy(self.slot(&mut grads, *a), g.data(), 1.0),
                Op::RepeatRows(a, n) => {
                    let d = g.cols();
                    let dst = self.slot(&mut grads, *a);
                    for (k, chunk) in g.data().chunks(d).enumerate() {
                        let r = k / n;
                        axpy(&mut dst[r * d..(r + 1) * d], chunk, 1.0);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let n = y.cols();
                    let dst = self.slot(&mut grads, *a);
                    for r in 0..y.rows() {
                        let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dst[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Combine(w, e) => {
                    let (tw, te) = (self.value(*w), self.value(*e));
                    let (m, n, d) = (tw.rows(), tw.cols(), te.cols());
                    {
                        let dst = self.slot(&mut grads, *w);
                        for b in 0..m {
                            let gb = g.row_slice(b);
                            for i in 0..n {
                                dst[b * n + i] +=
                                    gb.iter().zip(te.row_slice(b * n + i)).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let dst = self.slot(&mut grads, *e);
                    for b in 0..m {
                        let gb = g.row_slice(b);
                        for i in 0..n {
                            let wv = tw.get(b, i);
                            let row = b * n + i;
                            axpy(&mut dst[row * d..(row + 1) * d], gb, wv);
                        }
                    }
                }
                Op::Gru(saved) => self.gru_backward(saved, &g, &mut grads),
            }
        }

        if !out.all_finite() {
            return Err(GtpError::NonFinite {
                context: "backward pass".into(),
            });
        }
        Ok(out)
    }

    /// Mutable gradient buffer for `v`, allocated as zeros on first touch.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros_like(self.value(v)))
            .data_mut()
    }

    fn gru_backward(&self, s: &GruSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let th = self.value(s.h);
        let tx = self.value(s.x);
        let twx = self.value(s.wx);
        let twh = self.value(s.wh);
        let (m, d, dx) = (th.rows(), th.cols(), tx.cols());
        let d3 = 3 * d;
        let hd = th.data();
        let gd = g.data();

        let mut dh = vec![0.0; m * d];
        // pre-activation gradients, laid out [z | r | n] per row
        let mut dpre = vec![0.0; m * d3];
        for i in 0..m {
            for j in 0..d {
                let k = i * d + j;
                let go = gd[k];
                dh[k] += go * (1.0 - s.z[k]);
                let dz = go * (s.n[k] - hd[k]);
                let dn = go * s.z[k];
                dpre[i * d3 + j] = dz * s.z[k] * (1.0 - s.z[k]);
                dpre[i * d3 + 2 * d + j] = dn * (1.0 - s.n[k] * s.n[k]);
            }
        }
        // candidate path through r ⊙ h
        let whd = twh.data();
        let mut drh = vec![0.0; m * d];
        for i in 0..m {
            for p in 0..d {
                let w_row = &whd[p * d3 + 2 * d..(p + 1) * d3];
                let dn_row = &dpre[i * d3 + 2 * d..(i + 1) * d3];
                drh[i * d + p] = w_row.iter().zip(dn_row).map(|(a, b)| a * b).sum();
            }
        }
        for i in 0..m {
            for j in 0..d {
                let k = i * d + j;
                let dr = drh[k] * hd[k];
                dh[k] += drh[k] * s.r[k];
                dpre[i * d3 + d + j] = dr * s.r[k] * (1.0 - s.r[k]);
            }
        }
        // h · [Uz | Ur] path
        for i in 0..m {
            for p in 0..d {
                let w_row = &whd[p * d3..p * d3 + 2 * d];
                let dp_row = &dpre[i * d3..i * d3 + 2 * d];
                dh[i * d + p] += w_row.iter().zip(dp_row).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        {
            let dwh = self.slot(grads, s.wh);
            for i in 0..m {
                for p in 0..d {
                    let hv = hd[i * d + p];
                    let rv = s.rh[i * d + p];
                    let row = &mut dwh[p * d3..(p + 1) * d3];
                    for j in 0..2 * d {
                        row[j] += hv * dpre[i * d3 + j];
                    }
                    for j in 2 * d..d3 {
                        row[j] += rv * dpre[i * d3 + j];
                    }
                }
            }
        }
        matmul_tn_into(tx.data(), &dpre, self.slot(grads, s.wx), dx, m, d3);
        matmul_nt_into(&dpre, twx.data(), self.slot(grads, s.x), m, d3, dx);
        {
            let db = self.slot(grads, s.b);
            for chunk in dpre.chunks(d3) {
                axpy(db, chunk, 1.0);
            }
        }
        axpy(self.slot(grads, s.h), &dh, 1.0);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
