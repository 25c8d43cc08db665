//! Wengert tape: reverse-mode autodiff over [`Tensor`] values.
//!
//! Operations execute eagerly and record themselves on the tape in
//! topological order; [`Tape::backward`] replays the records in reverse and
//! accumulates gradients for every tensor on the path to the loss, including
//! intermediates. Edge attribution reads gradients of node *inputs*, so
//! intermediate gradients are first-class here, not an afterthought.
//!
//! Every operation checks its output for NaN/Inf before the value can be
//! consumed; a failed check aborts with the operation name.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// Index of a tensor on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    /// Leaf tensor (input, parameter, or constant).
    Leaf,
    /// Row gather: out[i] = table[indices[i]].
    EmbedRows { table: TensorId, indices: Vec<usize> },
    Add { a: TensorId, b: TensorId },
    /// Sum of several same-shape tensors (edge-sum assembly).
    AddN { parts: Vec<TensorId> },
    Sub { a: TensorId, b: TensorId },
    /// Elementwise product.
    Mul { a: TensorId, b: TensorId },
    /// Multiply by a compile-time constant scalar.
    Scale { a: TensorId, c: f64 },
    /// Broadcast add of a length-c vector over the rows of [r, c].
    AddRowVec { a: TensorId, v: TensorId },
    /// Broadcast multiply of a length-c vector over the rows of [r, c].
    MulRowVec { a: TensorId, v: TensorId },
    /// [m, k] x [k, n] -> [m, n].
    Matmul { a: TensorId, b: TensorId },
    /// a · bᵀ: [m, k] x [n, k] -> [m, n].
    MatmulNT { a: TensorId, b: TensorId },
    Softmax { a: TensorId, axis: usize },
    /// Row-causal softmax on [s, s]: row i normalizes over columns j <= i.
    CausalSoftmax { a: TensorId },
    /// Log-softmax along the last axis (rank 1 or 2).
    LogSoftmax { a: TensorId },
    /// Per-row parameter-free layer norm on [r, c].
    LayerNormRows { a: TensorId },
    Gelu { a: TensorId },
    Exp { a: TensorId },
    ClipElem { a: TensorId, lo: f64, hi: f64 },
    MinElem { a: TensorId, b: TensorId },
    /// Sum of all elements -> scalar.
    SumAll { a: TensorId },
    /// Extract row `idx` of [r, c] as a 1-D [c] tensor.
    Row { a: TensorId, idx: usize },
    /// Rows [start, start+len) of [r, c] as [len, c].
    SliceRows { a: TensorId, start: usize, len: usize },
    /// Negative log-likelihood sum over picked (row, col) entries -> scalar.
    NllSum { logp: TensorId, picks: Vec<(usize, usize)> },
    /// Gather picked (row, col) entries into a 1-D tensor.
    GatherElems { a: TensorId, picks: Vec<(usize, usize)> },
    /// KL(p || q) = sum p (ln p - log_q), p a fixed distribution -> scalar.
    KlDiv { p: Vec<f64>, log_q: TensorId },
}

struct Entry {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Records primitive operations and replays them in reverse for gradients.
///
/// A tape is confined to one logical thread; independent tapes share no
/// state. Replaying the same sequence of operations yields bit-identical
/// values and gradients.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The value of a tensor on this tape.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.entries[id.0].value
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 < self.entries.len() {
            Ok(())
        } else {
            Err(CoreError::NotOnTape)
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        let id = TensorId(self.entries.len());
        self.entries.push(Entry { op, value });
        id
    }

    fn push_checked(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<TensorId> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            CoreError::NonFinite { .. } => CoreError::NonFinite { op: name },
            other => other,
        })?;
        Ok(self.push(op, value))
    }

    /// Register a leaf tensor (input, parameter, or constant).
    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push(Op::Leaf, t)
    }

    // ---- shape helpers -------------------------------------------------

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(CoreError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") })
        }
    }

    // ---- operations ----------------------------------------------------

    /// Gather rows of `table` ([vocab, d]) by index.
    pub fn embed_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        self.check_id(table)?;
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(CoreError::TokenOutOfVocab { token: bad as u32, vocab_size: vocab });
        }
        let tdata = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tdata[i * d..(i + 1) * d]);
        }
        self.push_checked(
            Op::EmbedRows { table, indices: indices.to_vec() },
            vec![indices.len(), d],
            out,
            "embed_rows",
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Add { a, b }, shape, data, "add")
    }

    /// Sum of one or more same-shape tensors.
    pub fn add_n(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or(CoreError::Invalid {
            detail: "add_n needs at least one operand".into(),
        })?;
        self.check_id(first)?;
        for &p in &parts[1..] {
            self.check_id(p)?;
            self.same_shape(first, p, "add_n")?;
        }
        let mut data = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            for (o, x) in data.iter_mut().zip(self.value(p).data()) {
                *o += x;
            }
        }
        let shape = self.value(first).shape().to_vec();
        self.push_checked(Op::AddN { parts: parts.to_vec() }, shape, data, "add_n")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Sub { a, b }, shape, data, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Mul { a, b }, shape, data, "mul")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.check_id(a)?;
        if !c.is_finite() {
            return Err(CoreError::NonFinite { op: "scale" });
        }
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Scale { a, c }, shape, data, "scale")
    }

    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(v)?;
        let (r, c) = self.value(a).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("rows have {c} cols, vector is {:?}", self.value(v).shape()),
            });
        }
        let vd = self.value(v).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vd[j];
            }
        }
        self.push_checked(Op::AddRowVec { a, v }, vec![r, c], data, "add_row_vec")
    }

    pub fn mul_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(v)?;
        let (r, c) = self.value(a).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "mul_row_vec",
                detail: format!("rows have {c} cols, vector is {:?}", self.value(v).shape()),
            });
        }
        let vd = self.value(v).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= vd[j];
            }
        }
        self.push_checked(Op::MulRowVec { a, v }, vec![r, c], data, "mul_row_vec")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}x{k}] x [{k2}x{n}]"),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked(Op::Matmul { a, b }, vec![m, n], data, "matmul")
    }

    /// a · bᵀ for a: [m, k], b: [n, k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("[{m}x{k}] x [{n}x{k2}]ᵀ"),
            });
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_checked(Op::MatmulNT { a, b }, vec![m, n], data, "matmul_nt")
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_id(a)?;
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for_each_lane(&shape, axis, |lane| softmax_lane(&mut data, lane));
        self.push_checked(Op::Softmax { a, axis }, shape, data, "softmax")
    }

    /// Causal softmax on square attention scores: row i spans columns 0..=i.
    pub fn causal_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let (s, s2) = self.value(a).dims2()?;
        if s != s2 {
            return Err(CoreError::ShapeMismatch {
                op: "causal_softmax",
                detail: format!("expected square, got [{s}x{s2}]"),
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; s * s];
        for i in 0..s {
            let row = &src[i * s..i * s + i + 1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = libm::exp(x - m);
                data[i * s + j] = e;
                denom += e;
            }
            for j in 0..=i {
                data[i * s + j] /= denom;
            }
        }
        self.push_checked(Op::CausalSoftmax { a }, vec![s, s], data, "causal_softmax")
    }

    /// Log-softmax along the last axis of a rank-1 or rank-2 tensor.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let shape = self.value(a).shape().to_vec();
        let cols = *shape.last().ok_or(CoreError::ShapeMismatch {
            op: "log_softmax",
            detail: "rank-0 input".into(),
        })?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row.iter() {
                denom += libm::exp(x - m);
            }
            let lse = m + libm::log(denom);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push_checked(Op::LogSoftmax { a }, shape, data, "log_softmax")
    }

    /// Parameter-free layer norm applied per row of [r, c].
    pub fn layer_norm_rows(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mu, rstd) = row_norm_stats(row);
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * rstd;
            }
        }
        self.push_checked(Op::LayerNormRows { a }, vec![r, c], data, "layer_norm_rows")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let data = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Gelu { a }, shape, data, "gelu")
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let data = self.value(a).data().iter().map(|&x| libm::exp(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Exp { a }, shape, data, "exp")
    }

    pub fn clip_elem(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        self.check_id(a)?;
        if !(lo <= hi) {
            return Err(CoreError::Invalid { detail: format!("clip bounds {lo} > {hi}") });
        }
        let data = self.value(a).data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::ClipElem { a, lo, hi }, shape, data, "clip_elem")
    }

    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape(a, b, "min_elem")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| {
            if x <= y { x } else { y }
        });
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::MinElem { a, b }, shape, data, "min_elem")
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked(Op::SumAll { a }, Vec::new(), vec![s], "sum_all")
    }

    pub fn row(&mut self, a: TensorId, idx: usize) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.value(a).dims2()?;
        if idx >= r {
            return Err(CoreError::ShapeMismatch {
                op: "row",
                detail: format!("row {idx} of {r}"),
            });
        }
        let data = self.value(a).data()[idx * c..(idx + 1) * c].to_vec();
        self.push_checked(Op::Row { a, idx }, vec![c], data, "row")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.value(a).dims2()?;
        if start + len > r {
            return Err(CoreError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {r}", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push_checked(Op::SliceRows { a, start, len }, vec![len, c], data, "slice_rows")
    }

    /// Sum of negative log-likelihoods at picked (row, col) positions.
    pub fn nll_sum(&mut self, logp: TensorId, picks: &[(usize, usize)]) -> Result<TensorId> {
        self.check_id(logp)?;
        let (r, c) = self.value(logp).dims2()?;
        let mut s = 0.0;
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(CoreError::ShapeMismatch {
                    op: "nll_sum",
                    detail: format!("pick ({i},{j}) outside [{r}x{c}]"),
                });
            }
            s -= self.value(logp).data()[i * c + j];
        }
        self.push_checked(
            Op::NllSum { logp, picks: picks.to_vec() },
            Vec::new(),
            vec![s],
            "nll_sum",
        )
    }

    /// Gather picked (row, col) entries into a vector.
    pub fn gather_elems(&mut self, a: TensorId, picks: &[(usize, usize)]) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(picks.len());
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(CoreError::ShapeMismatch {
                    op: "gather_elems",
                    detail: format!("pick ({i},{j}) outside [{r}x{c}]"),
                });
            }
            data.push(self.value(a).data()[i * c + j]);
        }
        self.push_checked(
            Op::GatherElems { a, picks: picks.to_vec() },
            vec![picks.len()],
            data,
            "gather_elems",
        )
    }

    /// KL(p || q) with p a fixed distribution and `log_q` log-probabilities.
    ///
    /// p must be nonnegative and sum to 1 along its last axis; the result is
    /// the sum of per-lane divergences (a single lane for rank-1 inputs).
    pub fn kl_divergence(&mut self, p: &Tensor, log_q: TensorId) -> Result<TensorId> {
        self.check_id(log_q)?;
        if p.shape() != self.value(log_q).shape() {
            return Err(CoreError::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("{:?} vs {:?}", p.shape(), self.value(log_q).shape()),
            });
        }
        let cols = *p.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "kl_divergence",
                detail: "empty last axis".into(),
            });
        }
        for lane in p.data().chunks(cols) {
            let sum: f64 = lane.iter().sum();
            if lane.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-8 {
                return Err(CoreError::Invalid {
                    detail: format!("kl_divergence: p lane sums to {sum}, must be a distribution"),
                });
            }
        }
        let lq = self.value(log_q).data();
        let mut s = 0.0;
        for (i, &pi) in p.data().iter().enumerate() {
            if pi > 0.0 {
                s += pi * (libm::log(pi) - lq[i]);
            }
        }
        self.push_checked(
            Op::KlDiv { p: p.data().to_vec(), log_q },
            Vec::new(),
            vec![s],
            "kl_divergence",
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss; returns gradients for every tensor
    /// on a path to the loss. The gradient of the loss w.r.t. itself is 1.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        self.check_id(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(CoreError::LossNotScalar);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.entries.len()).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_one(idx, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(grads.len());
        for (i, buf) in grads.into_iter().enumerate() {
            match buf {
                Some(b) => {
                    if b.iter().any(|v| !v.is_finite()) {
                        return Err(CoreError::NonFinite { op: "backward" });
                    }
                    let shape = self.entries[i].value.shape().to_vec();
                    out.push(Some(Tensor::new(shape, b)?));
                }
                None => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_one(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[id.0];
            let buf = slot.get_or_insert_with(|| vec![0.0; self.entries[id.0].value.numel()]);
            f(buf);
        };
        match &self.entries[idx].op {
            Op::Leaf => {}
            Op::EmbedRows { table, indices } => {
                let d = self.value(*table).shape()[1];
                acc(grads, *table, &mut |buf| {
                    for (i, &row) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[row * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(grads, *a, &mut |buf| add_into(buf, g, 1.0));
                acc(grads, *b, &mut |buf| add_into(buf, g, 1.0));
            }
            Op::AddN { parts } => {
                for &p in parts {
                    acc(grads, p, &mut |buf| add_into(buf, g, 1.0));
                }
            }
            Op::Sub { a, b } => {
                acc(grads, *a, &mut |buf| add_into(buf, g, 1.0));
                acc(grads, *b, &mut |buf| add_into(buf, g, -1.0));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                acc(grads, *a, &mut |buf| add_into(buf, g, c));
            }
            Op::AddRowVec { a, v } => {
                let c = self.value(*v).numel();
                acc(grads, *a, &mut |buf| add_into(buf, g, 1.0));
                acc(grads, *v, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                });
            }
            Op::MulRowVec { a, v } => {
                let c = self.value(*v).numel();
                let (av, vv) = (self.value(*a).data(), self.value(*v).data());
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vv[i % c];
                    }
                });
                acc(grads, *v, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % c] += gi * av[i];
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // gA += g · bᵀ ; gB += aᵀ · g
                let ga = matmul_nt_raw(g, bv, m, n, k);
                let gb = matmul_tn_raw(av, g, m, k, n);
                acc(grads, *a, &mut |buf| add_into(buf, &ga, 1.0));
                acc(grads, *b, &mut |buf| add_into(buf, &gb, 1.0));
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // out = a · bᵀ: gA += g · b ; gB += gᵀ · a
                let ga = matmul_raw(g, bv, m, n, k);
                let gb = matmul_tn_raw(g, av, m, n, k);
                acc(grads, *a, &mut |buf| add_into(buf, &ga, 1.0));
                acc(grads, *b, &mut |buf| add_into(buf, &gb, 1.0));
            }
            Op::Softmax { a, axis } => {
                let shape = self.value(idx_id(idx)).shape().to_vec();
                let p = self.value(idx_id(idx)).data();
                let mut gx = vec![0.0; p.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&o| g[o] * p[o]).sum();
                    for &o in &lane {
                        gx[o] = p[o] * (g[o] - dot);
                    }
                });
                acc(grads, *a, &mut |buf| add_into(buf, &gx, 1.0));
            }
            Op::CausalSoftmax { a } => {
                let s = self.value(*a).shape()[0];
                let p = self.value(idx_id(idx)).data();
                let mut gx = vec![0.0; s * s];
                for i in 0..s {
                    let base = i * s;
                    let dot: f64 = (0..=i).map(|j| g[base + j] * p[base + j]).sum();
                    for j in 0..=i {
                        gx[base + j] = p[base + j] * (g[base + j] - dot);
                    }
                }
                acc(grads, *a, &mut |buf| add_into(buf, &gx, 1.0));
            }
            Op::LogSoftmax { a } => {
                let lp = self.value(idx_id(idx)).data();
                let cols = *self.value(*a).shape().last().unwrap();
                let mut gx = vec![0.0; lp.len()];
                for (r, grow) in g.chunks(cols).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..cols {
                        let o = r * cols + j;
                        gx[o] = grow[j] - libm::exp(lp[o]) * gsum;
                    }
                }
                acc(grads, *a, &mut |buf| add_into(buf, &gx, 1.0));
            }
            Op::LayerNormRows { a } => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let x = self.value(*a).data();
                let y = self.value(idx_id(idx)).data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let (_, rstd) = row_norm_stats(row);
                    let grow = &g[i * c..(i + 1) * c];
                    let yrow = &y[i * c..(i + 1) * c];
                    let gmean: f64 = grow.iter().sum::<f64>() / c as f64;
                    let gymean: f64 =
                        grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = rstd * (grow[j] - gmean - yrow[j] * gymean);
                    }
                }
                acc(grads, *a, &mut |buf| add_into(buf, &gx, 1.0));
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * gelu_bwd(x[i]);
                    }
                });
            }
            Op::Exp { a } => {
                let y = self.value(idx_id(idx)).data();
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
            Op::ClipElem { a, lo, hi } => {
                let x = self.value(*a).data();
                let (lo, hi) = (*lo, *hi);
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        if x[i] >= lo && x[i] <= hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::MinElem { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |buf| {
                    for i in 0..buf.len() {
                        if av[i] <= bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for i in 0..buf.len() {
                        if av[i] > bv[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gs = g[0];
                acc(grads, *a, &mut |buf| {
                    for v in buf.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::Row { a, idx: ridx } => {
                let c = self.value(*a).shape()[1];
                let start = ridx * c;
                acc(grads, *a, &mut |buf| {
                    for j in 0..c {
                        buf[start + j] += g[j];
                    }
                });
            }
            Op::SliceRows { a, start, len } => {
                let c = self.value(*a).shape()[1];
                let off = start * c;
                let n = len * c;
                acc(grads, *a, &mut |buf| {
                    for j in 0..n {
                        buf[off + j] += g[j];
                    }
                });
            }
            Op::NllSum { logp, picks } => {
                let c = self.value(*logp).shape()[1];
                let gs = g[0];
                acc(grads, *logp, &mut |buf| {
                    for &(i, j) in picks {
                        buf[i * c + j] -= gs;
                    }
                });
            }
            Op::GatherElems { a, picks } => {
                let c = self.value(*a).shape()[1];
                acc(grads, *a, &mut |buf| {
                    for (k, &(i, j)) in picks.iter().enumerate() {
                        buf[i * c + j] += g[k];
                    }
                });
            }
            Op::KlDiv { p, log_q } => {
                let gs = g[0];
                acc(grads, *log_q, &mut |buf| {
                    for (i, &pi) in p.iter().enumerate() {
                        buf[i] -= gs * pi;
                    }
                });
            }
        }
    }
}

fn idx_id(idx: usize) -> TensorId {
    TensorId(idx)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(buf: &mut [f64], src: &[f64], scale: f64) {
    for (o, &s) in buf.iter_mut().zip(src) {
        *o += s * scale;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a · bᵀ for a: [m, k], b: [n, k].
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// aᵀ · b for a: [m, k], b: [m, n] -> [k, n].
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Visit each 1-D lane along `axis`, passing element offsets.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            f((0..axis_len).map(|j| base + j * inner).collect());
        }
    }
}

fn softmax_lane(data: &mut [f64], lane: Vec<usize>) {
    let m = lane.iter().map(|&o| data[o]).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &o in &lane {
        data[o] = libm::exp(data[o] - m);
        denom += data[o];
    }
    for &o in &lane {
        data[o] /= denom;
    }
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mu: f64 = row.iter().sum::<f64>() / c;
    let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / c;
    (mu, 1.0 / libm::sqrt(var + LN_EPS))
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
