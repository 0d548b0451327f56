use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    /// Batched matrix product; leading extents broadcast.
    Matmul { a: Var, b: Var },
    /// Rank-2 transpose.
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    /// `[..., d] + [d]`, the bias-add broadcast.
    AddRow { x: Var, row: Var },
    /// `[r, c] + [r]`, broadcast along columns.
    AddCol { x: Var, col: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Abs { x: Var },
    /// Softmax over the last extent; masked entries already carry weight
    /// zero in the stored output, so backward needs no mask record.
    Softmax { x: Var },
    LogSoftmax { x: Var },
    /// Normalization over the last extent with learnable gain/bias.
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    /// `x: [t, c_in]`, `w: [c_out, c_in, k]`, `b: [c_out]`, zero padding.
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    /// Row lookup into `table: [v, d]`; gradient scatter-adds into rows.
    Embedding { table: Var, ids: Vec<usize> },
    /// Arbitrary row gather from a rank-2 input (repeats allowed).
    GatherRows { x: Var, idx: Vec<usize> },
    /// Same data, new extents.
    Reshape { x: Var },
    ConcatRows { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize, len: usize },
    SumAll { x: Var },
    /// `[..., d] -> [...]`; scalar result collapses to `[1]`.
    SumLastDim { x: Var },
    /// Inverted dropout with a frozen keep mask.
    Dropout { x: Var, keep: Vec<bool>, scale: T },
    /// Scale row `r` of a rank-2 input by `coef[r]` (constant coefficients).
    MulRows { x: Var, coef: Vec<T> },
    /// Negative log of the total probability of all monotonic surjective
    /// frame-to-unit paths through `log_a: [t, n]`. See `alignment`.
    ForwardSum { log_a: Var },
}

struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

/// Reverse-mode computation tape. One tape per forward pass; gradients live
/// on the tape and the whole record is dropped after the optimizer step.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node consistency")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape, vec![T::zero(); n], false)
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2, got {sa:?} x {sb:?}"
            )));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {sa:?} x {sb:?}"
            )));
        }
        let batch = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(|| {
            Error::Dimension(format!("matmul batch extents not broadcastable: {sa:?} x {sb:?}"))
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend([p, r]);

        let nbatch: usize = batch.iter().product::<usize>().max(1);
        let mut out = vec![T::zero(); nbatch * p * r];
        for bi in 0..nbatch {
            let ia = batch_offset(bi, &batch, &sa[..sa.len() - 2]) * p * q;
            let ib = batch_offset(bi, &batch, &sb[..sb.len() - 2]) * q * r;
            mm_acc(
                &self.value(a)[ia..ia + p * q],
                &self.value(b)[ib..ib + q * r],
                p,
                q,
                r,
                &mut out[bi * p * r..(bi + 1) * p * r],
            );
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, out_shape, out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Transpose { x }, vec![c, r], out, rg))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(op, shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Scale { x, c }, shape, out, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::AddScalar { x }, shape, out, rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Dimension("add_row on rank 0".into()))?;
        if self.shape(row) != [d] {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                sx,
                self.shape(row)
            )));
        }
        let rv = self.value(row).to_vec();
        let out: Vec<T> = self
            .value(x)
            .chunks(d)
            .flat_map(|ch| ch.iter().zip(&rv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(Op::AddRow { x, row }, sx, out, rg))
    }

    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(col) != [sx[0]] {
            return Err(Error::Dimension(format!(
                "add_col: {:?} + {:?}",
                sx,
                self.shape(col)
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let cv = self.value(col).to_vec();
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for v in &mut out[i * c..(i + 1) * c] {
                *v = *v + cv[i];
            }
        }
        let rg = self.needs_grad(&[x, col]);
        Ok(self.push(Op::AddCol { x, col }, sx, out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Relu { x }, shape, out, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::LeakyRelu { x, slope }, shape, out, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Abs { x }, shape, out, rg)
    }

    /// Softmax over the last extent, stabilized by max subtraction.
    /// `mask`, when given, marks entries (row-major over the full shape) that
    /// receive zero weight. Each slice must keep at least one unmasked entry.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("softmax on rank 0".into()))?;
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        if let Some(m) = mask {
            if m.len() != self.numel(x) {
                return Err(Error::Dimension(format!(
                    "softmax mask has {} entries for {} values",
                    m.len(),
                    self.numel(x)
                )));
            }
            if m.chunks(d).any(|row| row.iter().all(|&b| b)) {
                return Err(Error::Contract("softmax row fully masked".into()));
            }
        }
        let mut out = vec![T::zero(); self.numel(x)];
        for (ri, row) in self.value(x).chunks(d).enumerate() {
            let mrow = mask.map(|m| &m[ri * d..(ri + 1) * d]);
            let keep = |j: usize| mrow.map_or(true, |m| !m[j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    out[ri * d + j] = e;
                    z = z + e;
                }
            }
            for j in 0..d {
                out[ri * d + j] = out[ri * d + j] / z;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Softmax { x }, shape, out, rg))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("log_softmax on rank 0".into()))?;
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let mut out = vec![T::zero(); self.numel(x)];
        for (ri, row) in self.value(x).chunks(d).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&v| (v - mx).exp())
                .fold(T::zero(), |s, e| s + e)
                .ln()
                + mx;
            for (j, &v) in row.iter().enumerate() {
                out[ri * d + j] = v - lse;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::LogSoftmax { x }, shape, out, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on rank 0".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut out = vec![T::zero(); self.numel(x)];
        for (ri, row) in self.value(x).chunks(d).enumerate() {
            let (mu, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                out[ri * d + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, shape, out, rg))
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::Dimension(format!(
                "conv1d: x {sx:?} (want [t, c_in]), w {sw:?} (want [c_out, c_in, k])"
            )));
        }
        let (t, c_in) = (sx[0], sx[1]);
        let (c_out, c_in_w, k) = (sw[0], sw[1], sw[2]);
        if c_in != c_in_w || self.shape(b) != [c_out] {
            return Err(Error::Dimension(format!(
                "conv1d channels: x {sx:?}, w {sw:?}, b {:?}",
                self.shape(b)
            )));
        }
        if t + 2 * padding < k {
            return Err(Error::Dimension(format!(
                "conv1d: sequence {t} with padding {padding} shorter than kernel {k}"
            )));
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![T::zero(); t_out * c_out];
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = bv[co];
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - padding as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let xrow = &xv[ti as usize * c_in..(ti as usize + 1) * c_in];
                    for ci in 0..c_in {
                        acc = acc + wv[(co * c_in + ci) * k + kk] * xrow[ci];
                    }
                }
                out[to * c_out + co] = acc;
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            vec![t_out, c_out],
            out,
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Dimension(format!("embedding table {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of vocabulary {v}"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {sx:?}")));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("row index {bad} out of {r}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            vec![idx.len(), c],
            out,
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.numel(x) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Reshape { x }, shape, data, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!("concat_rows: {sa:?} with {sb:?}")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let shape = vec![sa[0] + sb[0], sa[1]];
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::ConcatRows { a, b }, shape, out, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("concat_cols: {sa:?} with {sb:?}")));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::ConcatCols { a, b }, vec![r, ca + cb], out, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) of {sx:?}",
                start + len
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], out, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs_grad(&[x]);
        self.push(Op::SumAll { x }, vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x);
        let s = self.sum_all(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("sum_lastdim on rank 0".into()))?;
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(d)
            .map(|row| row.iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::SumLastDim { x }, out_shape, out, rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn dropout(&mut self, x: Var, keep: &[bool], keep_prob: f64) -> Result<Var> {
        if keep.len() != self.numel(x) {
            return Err(Error::Dimension(format!(
                "dropout mask {} for {} values",
                keep.len(),
                self.numel(x)
            )));
        }
        let scale = T::of(1.0 / keep_prob);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::Dropout {
                x,
                keep: keep.to_vec(),
                scale,
            },
            shape,
            out,
            rg,
        ))
    }

    pub fn mul_rows(&mut self, x: Var, coef: &[T]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || coef.len() != sx[0] {
            return Err(Error::Dimension(format!(
                "mul_rows: {} coefficients for {sx:?}",
                coef.len()
            )));
        }
        let c = sx[1];
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .zip(coef)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::MulRows {
                x,
                coef: coef.to_vec(),
            },
            sx,
            out,
            rg,
        ))
    }

    /// See [`crate::alignment::forward_sum_loss`] for the contract.
    pub fn forward_sum(&mut self, log_a: Var) -> Result<Var> {
        let s = self.shape(log_a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("forward_sum on {s:?}")));
        }
        let (t, n) = (s[0], s[1]);
        if t < n {
            return Err(Error::Contract(format!(
                "forward_sum needs frames >= units, got {t} < {n}"
            )));
        }
        let alpha = forward_pass(self.value(log_a), t, n);
        let loss = -alpha[(t - 1) * n + (n - 1)];
        let rg = self.needs_grad(&[log_a]);
        Ok(self.push(Op::ForwardSum { log_a }, vec![1], vec![loss], rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every `requires_grad`
    /// ancestor are populated on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![T::zero(); self.nodes[v.0].data.len()]);
        }
        contrib(self.grads[v.0].as_mut().unwrap());
    }

    fn propagate(&mut self, i: usize, gout: &[T]) {
        // Clone the op descriptor; value buffers are borrowed per-arm.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => self.backward_matmul(i, a, b, gout),
            Op::Transpose { x } => {
                let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut gx = vec![T::zero(); r * c];
                for j in 0..c {
                    for k in 0..r {
                        gx[k * c + j] = gout[j * r + k];
                    }
                }
                self.accumulate(x, |g| add_into(g, &gx));
            }
            Op::Add { a, b } => {
                self.accumulate(a, |g| add_into(g, gout));
                self.accumulate(b, |g| add_into(g, gout));
            }
            Op::Sub { a, b } => {
                self.accumulate(a, |g| add_into(g, gout));
                self.accumulate(b, |g| sub_into(g, gout));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.accumulate(a, |g| {
                    for ((g, &go), &bvv) in g.iter_mut().zip(gout).zip(&bv) {
                        *g = *g + go * bvv;
                    }
                });
                self.accumulate(b, |g| {
                    for ((g, &go), &avv) in g.iter_mut().zip(gout).zip(&av) {
                        *g = *g + go * avv;
                    }
                });
            }
            Op::Scale { x, c } => self.accumulate(x, |g| {
                for (g, &go) in g.iter_mut().zip(gout) {
                    *g = *g + go * c;
                }
            }),
            Op::AddScalar { x, .. } => self.accumulate(x, |g| add_into(g, gout)),
            Op::AddRow { x, row } => {
                let d = *self.nodes[i].shape.last().unwrap();
                self.accumulate(x, |g| add_into(g, gout));
                self.accumulate(row, |g| {
                    for ch in gout.chunks(d) {
                        for (g, &go) in g.iter_mut().zip(ch) {
                            *g = *g + go;
                        }
                    }
                });
            }
            Op::AddCol { x, col } => {
                let c = self.nodes[i].shape[1];
                self.accumulate(x, |g| add_into(g, gout));
                self.accumulate(col, |g| {
                    for (gi, ch) in g.iter_mut().zip(gout.chunks(c)) {
                        *gi = *gi + ch.iter().fold(T::zero(), |s, &v| s + v);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].data.clone();
                self.accumulate(x, |g| {
                    for ((g, &go), &xvv) in g.iter_mut().zip(gout).zip(&xv) {
                        if xvv > T::zero() {
                            *g = *g + go;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[x.0].data.clone();
                self.accumulate(x, |g| {
                    for ((g, &go), &xvv) in g.iter_mut().zip(gout).zip(&xv) {
                        *g = *g + if xvv > T::zero() { go } else { go * slope };
                    }
                });
            }
            Op::Abs { x } => {
                let xv = self.nodes[x.0].data.clone();
                self.accumulate(x, |g| {
                    for ((g, &go), &xvv) in g.iter_mut().zip(gout).zip(&xv) {
                        let s = if xvv >= T::zero() { T::one() } else { -T::one() };
                        *g = *g + go * s;
                    }
                });
            }
            Op::Softmax { x } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let y = self.nodes[i].data.clone();
                let mut gx = vec![T::zero(); y.len()];
                for ((yrow, grow), gxrow) in
                    y.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d))
                {
                    let dot = yrow
                        .iter()
                        .zip(grow)
                        .fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for ((gx, &yv), &gv) in gxrow.iter_mut().zip(yrow).zip(grow) {
                        *gx = yv * (gv - dot);
                    }
                }
                self.accumulate(x, |g| add_into(g, &gx));
            }
            Op::LogSoftmax { x } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let y = self.nodes[i].data.clone();
                let mut gx = vec![T::zero(); y.len()];
                for ((yrow, grow), gxrow) in
                    y.chunks(d).zip(gout.chunks(d)).zip(gx.chunks_mut(d))
                {
                    let gsum = grow.iter().fold(T::zero(), |s, &v| s + v);
                    for ((gx, &yv), &gv) in gxrow.iter_mut().zip(yrow).zip(grow) {
                        *gx = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(x, |g| add_into(g, &gx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backward_layer_norm(i, x, gamma, beta, eps, gout)
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.backward_conv1d(i, x, w, b, stride, padding, gout),
            Op::Embedding { table, ids } => {
                let d = self.nodes[i].shape[1];
                self.accumulate(table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = &gout[r * d..(r + 1) * d];
                        for (g, &go) in g[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *g = *g + go;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[i].shape[1];
                self.accumulate(x, |g| {
                    for (r, &id) in idx.iter().enumerate() {
                        let grow = &gout[r * c..(r + 1) * c];
                        for (g, &go) in g[id * c..(id + 1) * c].iter_mut().zip(grow) {
                            *g = *g + go;
                        }
                    }
                });
            }
            Op::Reshape { x } => self.accumulate(x, |g| add_into(g, gout)),
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].data.len();
                self.accumulate(a, |g| add_into(g, &gout[..na]));
                self.accumulate(b, |g| add_into(g, &gout[na..]));
            }
            Op::ConcatCols { a, b } => {
                let (r, ctot) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let ca = self.nodes[a.0].shape[1];
                self.accumulate(a, |g| {
                    for i in 0..r {
                        for j in 0..ca {
                            g[i * ca + j] = g[i * ca + j] + gout[i * ctot + j];
                        }
                    }
                });
                let cb = ctot - ca;
                self.accumulate(b, |g| {
                    for i in 0..r {
                        for j in 0..cb {
                            g[i * cb + j] = g[i * cb + j] + gout[i * ctot + ca + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[x.0].shape[1];
                let r = self.nodes[i].shape[0];
                self.accumulate(x, |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] = g[i * c + start + j] + gout[i * len + j];
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let go = gout[0];
                self.accumulate(x, |g| {
                    for g in g.iter_mut() {
                        *g = *g + go;
                    }
                });
            }
            Op::SumLastDim { x } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                self.accumulate(x, |g| {
                    for (ch, &go) in g.chunks_mut(d).zip(gout) {
                        for g in ch {
                            *g = *g + go;
                        }
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                self.accumulate(x, |g| {
                    for ((g, &go), &k) in g.iter_mut().zip(gout).zip(&keep) {
                        if k {
                            *g = *g + go * scale;
                        }
                    }
                });
            }
            Op::MulRows { x, coef } => {
                let c = self.nodes[i].shape[1];
                self.accumulate(x, |g| {
                    for ((ch, goch), &k) in g.chunks_mut(c).zip(gout.chunks(c)).zip(&coef) {
                        for (g, &go) in ch.iter_mut().zip(goch) {
                            *g = *g + go * k;
                        }
                    }
                });
            }
            Op::ForwardSum { log_a } => {
                let s = self.nodes[log_a.0].shape.clone();
                let (t, n) = (s[0], s[1]);
                let la = self.nodes[log_a.0].data.clone();
                let alpha = forward_pass(&la, t, n);
                let beta = backward_pass(&la, t, n);
                let log_z = alpha[(t - 1) * n + (n - 1)];
                let go = gout[0];
                self.accumulate(log_a, |g| {
                    for ti in 0..t {
                        for j in 0..n {
                            let occ = alpha[ti * n + j] + beta[ti * n + j] - log_z;
                            if occ.is_finite() {
                                // d(-log Z)/d log_a[t, j] = -occupancy
                                g[ti * n + j] = g[ti * n + j] - go * occ.exp();
                            }
                        }
                    }
                });
            }
        }
    }

    fn backward_matmul(&mut self, i: usize, a: Var, b: Var, gout: &[T]) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let so = self.nodes[i].shape.clone();
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let batch = so[..so.len() - 2].to_vec();
        let nbatch: usize = batch.iter().product::<usize>().max(1);
        let av = self.nodes[a.0].data.clone();
        let bv = self.nodes[b.0].data.clone();

        self.accumulate(a, |g| {
            for bi in 0..nbatch {
                let ia = batch_offset(bi, &batch, &sa[..sa.len() - 2]) * p * q;
                let ib = batch_offset(bi, &batch, &sb[..sb.len() - 2]) * q * r;
                // dA += dC @ B^T
                mm_abt_acc(
                    &gout[bi * p * r..(bi + 1) * p * r],
                    &bv[ib..ib + q * r],
                    p,
                    r,
                    q,
                    &mut g[ia..ia + p * q],
                );
            }
        });
        self.accumulate(b, |g| {
            for bi in 0..nbatch {
                let ia = batch_offset(bi, &batch, &sa[..sa.len() - 2]) * p * q;
                let ib = batch_offset(bi, &batch, &sb[..sb.len() - 2]) * q * r;
                // dB += A^T @ dC
                mm_atb_acc(
                    &av[ia..ia + p * q],
                    &gout[bi * p * r..(bi + 1) * p * r],
                    p,
                    q,
                    r,
                    &mut g[ib..ib + q * r],
                );
            }
        });
    }

    fn backward_layer_norm(&mut self, i: usize, x: Var, gamma: Var, beta: Var, eps: T, gout: &[T]) {
        let d = *self.nodes[i].shape.last().unwrap();
        let xv = self.nodes[x.0].data.clone();
        let gv = self.nodes[gamma.0].data.clone();
        let rows = xv.len() / d;

        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (ri, row) in xv.chunks(d).enumerate() {
            let (mu, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            inv_std[ri] = inv;
            for j in 0..d {
                xhat[ri * d + j] = (row[j] - mu) * inv;
            }
        }

        self.accumulate(gamma, |g| {
            for ri in 0..rows {
                for j in 0..d {
                    g[j] = g[j] + gout[ri * d + j] * xhat[ri * d + j];
                }
            }
        });
        self.accumulate(beta, |g| {
            for ri in 0..rows {
                for j in 0..d {
                    g[j] = g[j] + gout[ri * d + j];
                }
            }
        });
        self.accumulate(x, |g| {
            let dn = T::of(d as f64);
            for ri in 0..rows {
                let grow = &gout[ri * d..(ri + 1) * d];
                let xrow = &xhat[ri * d..(ri + 1) * d];
                let mut sum_dy = T::zero();
                let mut sum_dy_x = T::zero();
                for j in 0..d {
                    let dy = grow[j] * gv[j];
                    sum_dy = sum_dy + dy;
                    sum_dy_x = sum_dy_x + dy * xrow[j];
                }
                for j in 0..d {
                    let dy = grow[j] * gv[j];
                    let t = dy - sum_dy / dn - xrow[j] * sum_dy_x / dn;
                    g[ri * d + j] = g[ri * d + j] + t * inv_std[ri];
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv1d(
        &mut self,
        i: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        gout: &[T],
    ) {
        let (t, c_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let (c_out, _, k) = (
            self.nodes[w.0].shape[0],
            self.nodes[w.0].shape[1],
            self.nodes[w.0].shape[2],
        );
        let t_out = self.nodes[i].shape[0];
        let xv = self.nodes[x.0].data.clone();
        let wv = self.nodes[w.0].data.clone();

        self.accumulate(b, |g| {
            for to in 0..t_out {
                for co in 0..c_out {
                    g[co] = g[co] + gout[to * c_out + co];
                }
            }
        });
        self.accumulate(w, |g| {
            for to in 0..t_out {
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - padding as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let xrow = &xv[ti as usize * c_in..(ti as usize + 1) * c_in];
                    for co in 0..c_out {
                        let go = gout[to * c_out + co];
                        for ci in 0..c_in {
                            let wi = (co * c_in + ci) * k + kk;
                            g[wi] = g[wi] + go * xrow[ci];
                        }
                    }
                }
            }
        });
        self.accumulate(x, |g| {
            for to in 0..t_out {
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - padding as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let grow = &mut g[ti as usize * c_in..(ti as usize + 1) * c_in];
                    for co in 0..c_out {
                        let go = gout[to * c_out + co];
                        for (ci, g) in grow.iter_mut().enumerate() {
                            *g = *g + go * wv[(co * c_in + ci) * k + kk];
                        }
                    }
                }
            }
        });
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

/// out += a @ b for row-major `a: [m, k]`, `b: [k, n]`.
fn mm_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out += a @ b^T for `a: [m, k]`, `b: [n, k]`, out `[m, n]`.
fn mm_abt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out += a^T @ b for `a: [m, k]`, `b: [m, n]`, out `[k, n]`.
fn mm_atb_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn mean_var<T: Real>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mu = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |s, &v| s + (v - mu) * (v - mu))
        / n;
    (mu, var)
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let len = a.len().max(b.len());
    let mut out = vec![1usize; len];
    for i in 0..len {
        let da = if i < len - a.len() { 1 } else { a[i - (len - a.len())] };
        let db = if i < len - b.len() { 1 } else { b[i - (len - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Flat batch index in the broadcast output -> flat batch index in an input
/// whose (right-aligned) batch shape is `dims`.
fn batch_offset(flat: usize, out_dims: &[usize], dims: &[usize]) -> usize {
    if dims.is_empty() {
        return 0;
    }
    let mut coords = vec![0usize; out_dims.len()];
    let mut rem = flat;
    for d in (0..out_dims.len()).rev() {
        coords[d] = rem % out_dims[d];
        rem /= out_dims[d];
    }
    let offset = out_dims.len() - dims.len();
    let mut idx = 0;
    for (d, &extent) in dims.iter().enumerate() {
        let c = if extent == 1 { 0 } else { coords[offset + d] };
        idx = idx * extent + c;
    }
    idx
}

fn add_into<T: Real>(g: &mut [T], src: &[T]) {
    for (g, &s) in g.iter_mut().zip(src) {
        *g = *g + s;
    }
}

fn sub_into<T: Real>(g: &mut [T], src: &[T]) {
    for (g, &s) in g.iter_mut().zip(src) {
        *g = *g - s;
    }
}

/// Log-domain forward recursion over monotonic surjective paths.
/// `alpha[t, j]` = log-sum of all partial paths covering frames `0..=t` and
/// ending in unit `j`. Unreachable states stay at -inf.
pub(crate) fn forward_pass<T: Real>(log_a: &[T], t: usize, n: usize) -> Vec<T> {
    let ninf = T::neg_infinity();
    let mut alpha = vec![ninf; t * n];
    alpha[0] = log_a[0];
    for ti in 1..t {
        for j in 0..n {
            let stay = alpha[(ti - 1) * n + j];
            let advance = if j > 0 { alpha[(ti - 1) * n + j - 1] } else { ninf };
            let m = log_add(stay, advance);
            if m.is_finite() {
                alpha[ti * n + j] = log_a[ti * n + j] + m;
            }
        }
    }
    alpha
}

/// Companion backward recursion: `beta[t, j]` = log-sum over path suffixes
/// from state `(t, j)` (exclusive of its own emission) to `(t-1, n-1)`.
pub(crate) fn backward_pass<T: Real>(log_a: &[T], t: usize, n: usize) -> Vec<T> {
    let ninf = T::neg_infinity();
    let mut beta = vec![ninf; t * n];
    beta[(t - 1) * n + (n - 1)] = T::zero();
    for ti in (0..t - 1).rev() {
        for j in 0..n {
            let stay = beta[(ti + 1) * n + j] + log_a[(ti + 1) * n + j];
            let advance = if j + 1 < n {
                beta[(ti + 1) * n + j + 1] + log_a[(ti + 1) * n + j + 1]
            } else {
                ninf
            };
            beta[ti * n + j] = log_add(stay, advance);
        }
    }
    beta
}

pub(crate) fn log_add<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (T::one() + (lo - hi).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(&t2(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t2(&[&[2.0, -1.0], &[0.5, 3.0]]));
        let eye = tape.leaf(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let z = tape.zeros(vec![2, 2]);
        let zc = tape.matmul(z, a).unwrap();
        assert!(tape.value(zc).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![2, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_batch_dims() {
        // a: [2, 2, 3], b: [3, 2] broadcast over the batch of 2
        let mut tape = Tape::new();
        let a = tape.leaf_data(
            vec![2, 2, 3],
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.],
            false,
        );
        let b = tape.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        assert_eq!(tape.value(c), &[1., 2., 3., 4., 5., 6., 9., 12.]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![3], vec![0.0f64, 0.0, 0.0], false);
        let y = tape.softmax_lastdim(x, None).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tape.leaf_data(vec![3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()], false);
        let y = tape.softmax_lastdim(x, None).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in tape.value(y).iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stabilized_against_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2], vec![1000.0f64, 0.0], false);
        let y = tape.softmax_lastdim(x, None).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|v| v.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-9 && v[1] < 1e-9);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2], vec![f64::NAN, 0.0], false);
        assert!(matches!(
            tape.softmax_lastdim(x, None),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_mask_zeroes_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![1, 3], vec![5.0f64, 1.0, 2.0], false);
        let y = tape.softmax_lastdim(x, Some(&[true, false, false])).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
        let full = tape.softmax_lastdim(x, Some(&[true, true, true]));
        assert!(matches!(full, Err(Error::Contract(_))));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![3], vec![1.0f64, -2.0, 0.5], true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_unrelated_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2], vec![1.0f64, 2.0], true);
        let y = tape.leaf_data(vec![2], vec![3.0f64, 4.0], true);
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(y).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![2], vec![1.0f64, 2.0], true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn conv1d_shapes_and_padding() {
        // t=1 input: only the center tap contributes under padding 1
        let mut tape = Tape::new();
        let x = tape.leaf_data(vec![1, 2], vec![1.0f64, 2.0], false);
        let w = tape.leaf_data(
            vec![1, 2, 3],
            vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
            false,
        );
        let b = tape.leaf_data(vec![1], vec![0.5], false);
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        // center taps: w[0,0,1]=20, w[0,1,1]=50
        assert_eq!(tape.value(y), &[0.5 + 20.0 * 1.0 + 50.0 * 2.0]);
    }

    #[test]
    fn gather_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let g = tape.gather_rows(x, &[2, 0, 0]).unwrap();
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
        let c = tape.concat_rows(x, g).unwrap();
        assert_eq!(tape.shape(c), &[6, 2]);
        let sc = tape.slice_cols(c, 1, 1).unwrap();
        assert_eq!(tape.value(sc), &[2.0, 4.0, 6.0, 6.0, 2.0, 2.0]);
    }
}
