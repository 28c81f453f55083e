//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in topological order, so the backward sweep is a single
//! reverse pass. A node carries a gradient buffer only if it is reachable
//! from a trainable leaf; frozen forward passes therefore pay no gradient
//! bookkeeping at all.

use super::kernels::{log_sum_exp, matmul_acc, softmax_row, transpose};
use super::scalar::{fs, Scalar};
use super::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Convolution lowering geometry for the im2col node.
#[derive(Clone, Debug)]
struct ConvGeom {
    batch: usize,
    chans: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// One non-forced step of sequential without-replacement sampling.
#[derive(Clone, Debug)]
pub(crate) struct ChoiceStep {
    pub chosen: u32,
    pub available: Vec<u32>,
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    TransposeLast { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    SoftmaxLast { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    Embed { table: NodeId, ids: Vec<u32> },
    CrossEntropyMasked { logits: NodeId, targets: Vec<u32>, mask: Vec<bool>, count: usize },
    StopGrad,
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    L1Loss { a: NodeId, b: NodeId },
    SumSqDiff { a: NodeId, b: NodeId },
    Reshape { a: NodeId },
    SplitHeads { a: NodeId, b: usize, s: usize, h: usize, dh: usize },
    MergeHeads { a: NodeId, b: usize, s: usize, h: usize, dh: usize },
    Im2Col { a: NodeId, geom: ConvGeom },
    RowsToChw { a: NodeId, b: usize, oh: usize, ow: usize, c: usize },
    Upsample2x { a: NodeId },
    SeqLogProb { scores: NodeId, steps: Vec<ChoiceStep> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input. Values may be anything finite.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        assert!(value.is_finite(), "non-finite constant rejected");
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; the backward pass accumulates a gradient here.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        assert!(value.is_finite(), "non-finite parameter rejected");
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn dims2(&self, id: NodeId, what: &str) -> (usize, usize) {
        let s = self.value(id).shape();
        assert!(s.len() == 2, "{what}: expected 2-d tensor, got shape {s:?}");
        (s[0], s[1])
    }

    fn dims3(&self, id: NodeId, what: &str) -> (usize, usize, usize) {
        let s = self.value(id).shape();
        assert!(s.len() == 3, "{what}: expected 3-d tensor, got shape {s:?}");
        (s[0], s[1], s[2])
    }

    fn dims4(&self, id: NodeId, what: &str) -> (usize, usize, usize, usize) {
        let s = self.value(id).shape();
        assert!(s.len() == 4, "{what}: expected 4-d tensor, got shape {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    // ── op builders ─────────────────────────────────────────────────

    /// 2-d matrix product [m,k] @ [k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a, "matmul lhs");
        let (k2, n) = self.dims2(b, "matmul rhs");
        assert_eq!(
            k,
            k2,
            "matmul: lhs shape {:?} incompatible with rhs shape {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.req(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b }, req)
    }

    /// Batched matrix product [B,m,k] @ [B,k,n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ba, m, k) = self.dims3(a, "bmm lhs");
        let (bb, k2, n) = self.dims3(b, "bmm rhs");
        assert!(
            ba == bb && k == k2,
            "bmm: lhs shape {:?} incompatible with rhs shape {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            matmul_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let req = self.req(&[a, b]);
        self.push(Tensor::new(vec![ba, m, n], out), Op::Bmm { a, b }, req)
    }

    /// Swaps the last two axes of a 2-d or 3-d tensor.
    pub fn transpose_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let (batch, m, n) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => panic!("transpose_last: expected 2-d or 3-d tensor, got shape {shape:?}"),
        };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            transpose(
                &self.value(a).data()[i * m * n..(i + 1) * m * n],
                m,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let new_shape = if shape.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
        let req = self.req(&[a]);
        self.push(Tensor::new(new_shape, out), Op::TransposeLast { a }, req)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, what: &str) -> Vec<T> {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape {:?} vs shape {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Vec::with_capacity(self.value(a).numel())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.elementwise(a, b, "add");
        out.extend(self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y));
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Add { a, b }, req)
    }

    /// Adds a vector [D] to every row of a [..., D] tensor.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = *self.value(a).shape().last().unwrap();
        assert_eq!(
            self.value(b).shape(),
            &[d],
            "add_row: bias shape {:?} does not match row width of {:?}",
            self.value(b).shape(),
            self.value(a).shape()
        );
        let bdat = self.value(b).data();
        let adat = self.value(a).data();
        let mut out = Vec::with_capacity(adat.len());
        for row in adat.chunks_exact(d) {
            for (&x, &y) in row.iter().zip(bdat) {
                out.push(x + y);
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a, b]);
        self.push(Tensor::new(shape, out), Op::AddRow { a, b }, req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.elementwise(a, b, "sub");
        out.extend(self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y));
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Sub { a, b }, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.elementwise(a, b, "mul");
        out.extend(self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y));
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Mul { a, b }, req)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, out), Op::Scale { a, c }, req)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, out), Op::Relu { a }, req)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, out), Op::Gelu { a }, req)
    }

    /// Softmax along the last axis; every output row sums to 1.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let d = *self.value(a).shape().last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_row(row);
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, out), Op::SoftmaxLast { a }, req)
    }

    /// Layer normalization over the last axis with affine parameters.
    ///
    /// Constant rows normalize to exactly zero before the affine transform
    /// (the epsilon sits inside the square root).
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let d = *self.value(a).shape().last().unwrap();
        assert_eq!(
            self.value(gamma).shape(),
            &[d],
            "layer_norm: gamma shape {:?} vs feature width {} of {:?}",
            self.value(gamma).shape(),
            d,
            self.value(a).shape()
        );
        assert_eq!(self.value(beta).shape(), &[d], "layer_norm: beta shape mismatch");
        let eps = fs::<T>(eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.value(a).data().chunks_exact(d) {
            let (mean, inv_std) = row_stats(row, eps);
            for (j, &x) in row.iter().enumerate() {
                out.push((x - mean) * inv_std * g[j] + b[j]);
            }
        }
        let shape = self.value(a).shape().to_vec();
        let req = self.req(&[a, gamma, beta]);
        self.push(Tensor::new(shape, out), Op::LayerNorm { a, gamma, beta, eps }, req)
    }

    /// Row gather: out[i] = table[ids[i]]. Backward scatter-adds into the table.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (vocab, d) = self.dims2(table, "embed table");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(
                (id as usize) < vocab,
                "embed: id {} out of range for table with {} rows",
                id,
                vocab
            );
            out.extend_from_slice(&self.value(table).data()[id as usize * d..(id as usize + 1) * d]);
        }
        let req = self.req(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            Op::Embed { table, ids: ids.to_vec() },
            req,
        )
    }

    /// Mean cross-entropy over unmasked rows of [N, C] logits.
    ///
    /// Masked-out rows contribute neither loss nor gradient; with zero rows
    /// selected the loss is exactly zero.
    pub fn cross_entropy_masked(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> NodeId {
        let (n, c) = self.dims2(logits, "cross_entropy logits");
        assert_eq!(targets.len(), n, "cross_entropy: {} targets for {} rows", targets.len(), n);
        assert_eq!(mask.len(), n, "cross_entropy: {} mask entries for {} rows", mask.len(), n);
        let data = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            assert!(t < c, "cross_entropy: target {} out of range for {} classes", t, c);
            let row = &data[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
            count += 1;
        }
        let denom = fs::<T>(count.max(1) as f64);
        let req = self.req(&[logits]);
        self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            req,
        )
    }

    /// Identity on values; blocks gradient flow entirely.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let req = self.req(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s: T = self.value(a).data().iter().copied().sum();
        let req = self.req(&[a]);
        self.push(Tensor::scalar(s / fs::<T>(n as f64)), Op::MeanAll { a }, req)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(a, b, "l1_loss");
        let n = self.value(a).numel();
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let req = self.req(&[a, b]);
        self.push(Tensor::scalar(s / fs::<T>(n as f64)), Op::L1Loss { a, b }, req)
    }

    /// Sum of squared differences over all elements.
    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise(a, b, "sum_sq_diff");
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let req = self.req(&[a, b]);
        self.push(Tensor::scalar(s), Op::SumSqDiff { a, b }, req)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.value(a).numel(),
            "reshape: {:?} -> {:?} changes element count",
            self.value(a).shape(),
            shape
        );
        let v = Tensor::new(shape, self.value(a).data().to_vec());
        let req = self.req(&[a]);
        self.push(v, Op::Reshape { a }, req)
    }

    /// [b*s, h*dh] -> [b*h, s, dh] for multi-head attention.
    pub fn split_heads(&mut self, a: NodeId, b: usize, s: usize, h: usize, dh: usize) -> NodeId {
        let (rows, width) = self.dims2(a, "split_heads");
        assert!(
            rows == b * s && width == h * dh,
            "split_heads: shape {:?} does not factor as b={b} s={s} h={h} dh={dh}",
            self.value(a).shape()
        );
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for si in 0..s {
                    let dst = (((bi * h + hi) * s) + si) * dh;
                    let from = (bi * s + si) * (h * dh) + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let req = self.req(&[a]);
        self.push(Tensor::new(vec![b * h, s, dh], out), Op::SplitHeads { a, b, s, h, dh }, req)
    }

    /// [b*h, s, dh] -> [b*s, h*dh]; inverse of `split_heads`.
    pub fn merge_heads(&mut self, a: NodeId, b: usize, s: usize, h: usize, dh: usize) -> NodeId {
        let (bh, s2, dh2) = self.dims3(a, "merge_heads");
        assert!(
            bh == b * h && s2 == s && dh2 == dh,
            "merge_heads: shape {:?} does not factor as b={b} s={s} h={h} dh={dh}",
            self.value(a).shape()
        );
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for si in 0..s {
                    let from = (((bi * h + hi) * s) + si) * dh;
                    let dst = (bi * s + si) * (h * dh) + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let req = self.req(&[a]);
        self.push(Tensor::new(vec![b * s, h * dh], out), Op::MergeHeads { a, b, s, h, dh }, req)
    }

    /// Lowers [b,c,h,w] to patch rows [b*oh*ow, c*kh*kw] with zero padding,
    /// so a convolution becomes a matmul against a [c*kh*kw, c_out] kernel.
    pub fn im2col(&mut self, a: NodeId, kh: usize, kw: usize, stride: usize, pad: usize) -> NodeId {
        let (batch, chans, height, width) = self.dims4(a, "im2col");
        assert!(height + 2 * pad >= kh && width + 2 * pad >= kw, "im2col: kernel larger than padded input");
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { batch, chans, height, width, kh, kw, stride, pad, out_h, out_w };
        let src = self.value(a).data();
        let cols = chans * kh * kw;
        let mut out = vec![T::zero(); batch * out_h * out_w * cols];
        im2col_map(&geom, |row, col, idx| out[row * cols + col] = src[idx]);
        let req = self.req(&[a]);
        self.push(
            Tensor::new(vec![batch * out_h * out_w, cols], out),
            Op::Im2Col { a, geom },
            req,
        )
    }

    /// Rearranges matmul output rows [b*oh*ow, c] into an image [b,c,oh,ow].
    pub fn rows_to_chw(&mut self, a: NodeId, b: usize, oh: usize, ow: usize) -> NodeId {
        let (rows, c) = self.dims2(a, "rows_to_chw");
        assert_eq!(rows, b * oh * ow, "rows_to_chw: {} rows vs b={b} oh={oh} ow={ow}", rows);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let row = ((bi * oh + y) * ow + x) * c;
                    for ci in 0..c {
                        out[((bi * c + ci) * oh + y) * ow + x] = src[row + ci];
                    }
                }
            }
        }
        let req = self.req(&[a]);
        self.push(Tensor::new(vec![b, c, oh, ow], out), Op::RowsToChw { a, b, oh, ow, c }, req)
    }

    /// Nearest-neighbour 2x spatial upsample of [b,c,h,w].
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let (b, c, h, w) = self.dims4(a, "upsample2x");
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for bc in 0..b * c {
            for y in 0..h {
                for x in 0..w {
                    let v = src[(bc * h + y) * w + x];
                    let base = bc * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[base + (2 * y + dy) * 2 * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        let req = self.req(&[a]);
        self.push(Tensor::new(vec![b, c, 2 * h, 2 * w], out), Op::Upsample2x { a }, req)
    }

    /// Log-probability of an ordered without-replacement selection under the
    /// softmax of `scores` (shape [L]). Forced steps (where every remaining
    /// candidate must be taken) are omitted by the caller and contribute zero.
    pub(crate) fn seq_log_prob(&mut self, scores: NodeId, steps: Vec<ChoiceStep>) -> NodeId {
        let s = self.value(scores);
        assert_eq!(s.shape().len(), 1, "seq_log_prob: scores must be 1-d, got {:?}", s.shape());
        let data = s.data();
        let mut total = T::zero();
        for step in &steps {
            let avail: Vec<T> = step.available.iter().map(|&i| data[i as usize]).collect();
            total += data[step.chosen as usize] - log_sum_exp(&avail);
        }
        let req = self.req(&[scores]);
        self.push(Tensor::scalar(total), Op::SeqLogProb { scores, steps }, req)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of trainable leaves are
    /// retained and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        assert!(
            self.nodes[loss.0].requires,
            "backward: no trainable leaf reaches the loss"
        );
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match self.nodes[i].grad.as_ref() {
                Some(_) => {
                    if matches!(self.nodes[i].op, Op::Leaf) {
                        continue;
                    }
                    self.nodes[i].grad.take().unwrap()
                }
                None => continue,
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            step_backward(before, node, &g);
        }
    }
}

/// Distributes the upstream gradient `g` of `node` into its inputs, which all
/// live in `before` (the tape is topologically ordered).
fn step_backward<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf | Op::StopGrad => {}

        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1])
            };
            let n = before[b.0].value.shape()[1];
            if before[a.0].requires {
                let mut bt = vec![T::zero(); k * n];
                transpose(before[b.0].value.data(), k, n, &mut bt);
                let mut da = vec![T::zero(); m * k];
                matmul_acc(g, &bt, m, n, k, &mut da);
                add_into(before, *a, &da);
            }
            if before[b.0].requires {
                let mut at = vec![T::zero(); m * k];
                transpose(before[a.0].value.data(), m, k, &mut at);
                let mut db = vec![T::zero(); k * n];
                matmul_acc(&at, g, k, m, n, &mut db);
                add_into(before, *b, &db);
            }
        }

        Op::Bmm { a, b } => {
            let (batch, m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1], s[2])
            };
            let n = before[b.0].value.shape()[2];
            if before[a.0].requires {
                let mut da = vec![T::zero(); batch * m * k];
                let mut bt = vec![T::zero(); k * n];
                for i in 0..batch {
                    transpose(&before[b.0].value.data()[i * k * n..(i + 1) * k * n], k, n, &mut bt);
                    matmul_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                add_into(before, *a, &da);
            }
            if before[b.0].requires {
                let mut db = vec![T::zero(); batch * k * n];
                let mut at = vec![T::zero(); m * k];
                for i in 0..batch {
                    transpose(&before[a.0].value.data()[i * m * k..(i + 1) * m * k], m, k, &mut at);
                    matmul_acc(
                        &at,
                        &g[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                add_into(before, *b, &db);
            }
        }

        Op::TransposeLast { a } => {
            let shape = node.value.shape();
            let (batch, m, n) = if shape.len() == 2 {
                (1, shape[0], shape[1])
            } else {
                (shape[0], shape[1], shape[2])
            };
            let mut da = vec![T::zero(); g.len()];
            for i in 0..batch {
                transpose(&g[i * m * n..(i + 1) * m * n], m, n, &mut da[i * m * n..(i + 1) * m * n]);
            }
            add_into(before, *a, &da);
        }

        Op::Add { a, b } => {
            add_into(before, *a, g);
            add_into(before, *b, g);
        }

        Op::AddRow { a, b } => {
            add_into(before, *a, g);
            if before[b.0].requires {
                let d = before[b.0].value.numel();
                let mut db = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                add_into(before, *b, &db);
            }
        }

        Op::Sub { a, b } => {
            add_into(before, *a, g);
            if before[b.0].requires {
                let db: Vec<T> = g.iter().map(|&v| -v).collect();
                add_into(before, *b, &db);
            }
        }

        Op::Mul { a, b } => {
            if before[a.0].requires {
                let da: Vec<T> =
                    g.iter().zip(before[b.0].value.data()).map(|(&gv, &bv)| gv * bv).collect();
                add_into(before, *a, &da);
            }
            if before[b.0].requires {
                let db: Vec<T> =
                    g.iter().zip(before[a.0].value.data()).map(|(&gv, &av)| gv * av).collect();
                add_into(before, *b, &db);
            }
        }

        Op::Scale { a, c } => {
            let da: Vec<T> = g.iter().map(|&v| v * *c).collect();
            add_into(before, *a, &da);
        }

        Op::Relu { a } => {
            let da: Vec<T> = g
                .iter()
                .zip(before[a.0].value.data())
                .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                .collect();
            add_into(before, *a, &da);
        }

        Op::Gelu { a } => {
            let da: Vec<T> =
                g.iter().zip(before[a.0].value.data()).map(|(&gv, &x)| gv * gelu_bwd(x)).collect();
            add_into(before, *a, &da);
        }

        Op::SoftmaxLast { a } => {
            let d = *node.value.shape().last().unwrap();
            let out = node.value.data();
            let mut da = vec![T::zero(); g.len()];
            for (r, (grow, orow)) in g.chunks_exact(d).zip(out.chunks_exact(d)).enumerate() {
                let dot: T = grow.iter().zip(orow).map(|(&gv, &ov)| gv * ov).sum();
                for j in 0..d {
                    da[r * d + j] = orow[j] * (grow[j] - dot);
                }
            }
            add_into(before, *a, &da);
        }

        Op::LayerNorm { a, gamma, beta, eps } => {
            let d = *node.value.shape().last().unwrap();
            let x = before[a.0].value.data();
            let gm = before[gamma.0].value.data();
            let rows = x.len() / d;
            let mut da = vec![T::zero(); x.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let dn = fs::<T>(d as f64);
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let (mean, inv_std) = row_stats(xr, *eps);
                let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..d {
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gm[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gm[j];
                    da[r * d + j] =
                        inv_std / dn * (dn * dxh - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            add_into(before, *a, &da);
            add_into(before, *gamma, &dgamma);
            add_into(before, *beta, &dbeta);
        }

        Op::Embed { table, ids } => {
            if before[table.0].requires {
                let d = node.value.shape()[1];
                let numel = before[table.0].value.numel();
                let grad = before[table.0].grad.get_or_insert_with(|| vec![T::zero(); numel]);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut grad[id as usize * d..(id as usize + 1) * d];
                    for (acc, &v) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *acc += v;
                    }
                }
            }
        }

        Op::CrossEntropyMasked { logits, targets, mask, count } => {
            if before[logits.0].requires {
                let shape = before[logits.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let data = before[logits.0].value.data();
                let scale = g[0] / fs::<T>((*count).max(1) as f64);
                let mut da = vec![T::zero(); n * c];
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    let row = &data[i * c..(i + 1) * c];
                    let mut sm = row.to_vec();
                    softmax_row(&mut sm);
                    for j in 0..c {
                        let indicator = if j == targets[i] as usize { T::one() } else { T::zero() };
                        da[i * c + j] = scale * (sm[j] - indicator);
                    }
                }
                add_into(before, *logits, &da);
            }
        }

        Op::SumAll { a } => {
            let da = vec![g[0]; before[a.0].value.numel()];
            add_into(before, *a, &da);
        }

        Op::MeanAll { a } => {
            let n = before[a.0].value.numel();
            let da = vec![g[0] / fs::<T>(n as f64); n];
            add_into(before, *a, &da);
        }

        Op::L1Loss { a, b } => {
            let n = before[a.0].value.numel();
            let scale = g[0] / fs::<T>(n as f64);
            let diff_sign = |x: T, y: T| {
                if x > y {
                    scale
                } else if x < y {
                    -scale
                } else {
                    T::zero()
                }
            };
            if before[a.0].requires {
                let da: Vec<T> = before[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(before[b.0].value.data())
                    .map(|(&x, &y)| diff_sign(x, y))
                    .collect();
                add_into(before, *a, &da);
            }
            if before[b.0].requires {
                let db: Vec<T> = before[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(before[b.0].value.data())
                    .map(|(&x, &y)| -diff_sign(x, y))
                    .collect();
                add_into(before, *b, &db);
            }
        }

        Op::SumSqDiff { a, b } => {
            let two = fs::<T>(2.0);
            if before[a.0].requires {
                let da: Vec<T> = before[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(before[b.0].value.data())
                    .map(|(&x, &y)| two * g[0] * (x - y))
                    .collect();
                add_into(before, *a, &da);
            }
            if before[b.0].requires {
                let db: Vec<T> = before[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(before[b.0].value.data())
                    .map(|(&x, &y)| -(two * g[0] * (x - y)))
                    .collect();
                add_into(before, *b, &db);
            }
        }

        Op::Reshape { a } => {
            add_into(before, *a, g);
        }

        Op::SplitHeads { a, b, s, h, dh } => {
            let mut da = vec![T::zero(); g.len()];
            for bi in 0..*b {
                for hi in 0..*h {
                    for si in 0..*s {
                        let from = (((bi * h + hi) * s) + si) * dh;
                        let dst = (bi * s + si) * (h * dh) + hi * dh;
                        da[dst..dst + dh].copy_from_slice(&g[from..from + dh]);
                    }
                }
            }
            add_into(before, *a, &da);
        }

        Op::MergeHeads { a, b, s, h, dh } => {
            let mut da = vec![T::zero(); g.len()];
            for bi in 0..*b {
                for hi in 0..*h {
                    for si in 0..*s {
                        let dst = (((bi * h + hi) * s) + si) * dh;
                        let from = (bi * s + si) * (h * dh) + hi * dh;
                        da[dst..dst + dh].copy_from_slice(&g[from..from + dh]);
                    }
                }
            }
            add_into(before, *a, &da);
        }

        Op::Im2Col { a, geom } => {
            let mut da = vec![T::zero(); before[a.0].value.numel()];
            let cols = geom.chans * geom.kh * geom.kw;
            im2col_map(geom, |row, col, idx| da[idx] += g[row * cols + col]);
            add_into(before, *a, &da);
        }

        Op::RowsToChw { a, b, oh, ow, c } => {
            let mut da = vec![T::zero(); g.len()];
            for bi in 0..*b {
                for y in 0..*oh {
                    for x in 0..*ow {
                        let row = ((bi * oh + y) * ow + x) * c;
                        for ci in 0..*c {
                            da[row + ci] = g[((bi * c + ci) * oh + y) * ow + x];
                        }
                    }
                }
            }
            add_into(before, *a, &da);
        }

        Op::Upsample2x { a } => {
            let shape = before[a.0].value.shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut da = vec![T::zero(); b * c * h * w];
            for bc in 0..b * c {
                let base = bc * 4 * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = T::zero();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += g[base + (2 * y + dy) * 2 * w + 2 * x + dx];
                            }
                        }
                        da[(bc * h + y) * w + x] = acc;
                    }
                }
            }
            add_into(before, *a, &da);
        }

        Op::SeqLogProb { scores, steps } => {
            if before[scores.0].requires {
                let data = before[scores.0].value.data();
                let mut da = vec![T::zero(); data.len()];
                for step in steps {
                    let mut avail: Vec<T> =
                        step.available.iter().map(|&i| data[i as usize]).collect();
                    softmax_row(&mut avail);
                    da[step.chosen as usize] += g[0];
                    for (&pos, &p) in step.available.iter().zip(&avail) {
                        da[pos as usize] -= g[0] * p;
                    }
                }
                add_into(before, *scores, &da);
            }
        }
    }
}

fn add_into<T: Scalar>(nodes: &mut [Node<T>], id: NodeId, src: &[T]) {
    let node = &mut nodes[id.0];
    if !node.requires {
        return;
    }
    let numel = node.value.numel();
    debug_assert_eq!(numel, src.len());
    let grad = node.grad.get_or_insert_with(|| vec![T::zero(); numel]);
    for (acc, &v) in grad.iter_mut().zip(src) {
        *acc += v;
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = fs::<T>(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = fs::<T>(0.7978845608028654); // sqrt(2/pi)
    let k = fs::<T>(0.044715);
    let half = fs::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = fs::<T>(0.7978845608028654);
    let k = fs::<T>(0.044715);
    let half = fs::<T>(0.5);
    let three = fs::<T>(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * d_inner
}

fn im2col_map<F: FnMut(usize, usize, usize)>(geom: &ConvGeom, mut visit: F) {
    let ConvGeom { batch, chans, height, width, kh, kw, stride, pad, out_h, out_w } = *geom;
    for b in 0..batch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = (b * out_h + oy) * out_w + ox;
                for ci in 0..chans {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let col = (ci * kh + ky) * kw + kx;
                            let idx = ((b * chans + ci) * height + iy as usize) * width + ix as usize;
                            visit(row, col, idx);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(vec![1, 4], &[0.0, 0.0, 0.0, 0.0]));
        let s = tape.softmax_last(x);
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(vec![1, 3], &[5.0, 5.0, 5.0]));
        let g = tape.param(Tensor::from_f64s(vec![3], &[1.0, 1.0, 1.0]));
        let b = tape.param(Tensor::from_f64s(vec![3], &[0.0, 0.0, 0.0]));
        let out = tape.layer_norm(x, g, b, 1e-5);
        for &v in tape.value(out).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(vec![2, 4]));
        let loss = tape.cross_entropy_masked(logits, &[1, 3], &[true, true]);
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::from_f64s(
            vec![2, 3],
            &[0.3, -0.2, 0.9, 100.0, -50.0, 3.0],
        ));
        let loss = tape.cross_entropy_masked(logits, &[2, 0], &[true, false]);
        tape.backward(loss);
        let g = tape.grad(logits).unwrap();
        for &v in &g[3..6] {
            assert_eq!(v, 0.0, "masked row must receive zero gradient");
        }
        assert!(g[..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stop_grad_blocks_flow() {
        // loss = (sg(x) - c)^2 has zero gradient in x.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(1.0));
        let sg = tape.stop_grad(x);
        let diff = tape.sub(sg, c);
        let loss = tape.mul(diff, diff);
        let loss = tape.sum_all(loss);
        // The graph reaching the loss has no trainable leaf; x never receives
        // a gradient, which is exactly the stop-gradient contract.
        assert!(!tape.nodes[loss.0].requires);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn stop_grad_identity_case() {
        // loss = (x - sg(x))^2 -> value 0, gradient 0.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sg = tape.stop_grad(x);
        let diff = tape.sub(x, sg);
        let sq = tape.mul(diff, diff);
        let loss = tape.sum_all(sq);
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap()[0], 0.0);
    }

    #[test]
    #[should_panic(expected = "incompatible")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_input_rejected() {
        let mut tape = Tape::<f64>::new();
        let _ = tape.constant(Tensor::new(vec![1], vec![f64::NAN]));
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let (b, s, h, dh) = (2, 3, 2, 4);
        let data: Vec<f64> = (0..b * s * h * dh).map(|v| v as f64).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![b * s, h * dh], data.clone()));
        let split = tape.split_heads(x, b, s, h, dh);
        let merged = tape.merge_heads(split, b, s, h, dh);
        assert_eq!(tape.value(merged).data(), data.as_slice());
    }

    #[test]
    fn upsample_then_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = tape.upsample2x(x);
        assert_eq!(tape.value(u).shape(), &[1, 1, 4, 4]);
        let d = tape.value(u).data();
        assert_eq!(&d[0..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&d[4..8], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&d[8..12], &[3.0, 3.0, 4.0, 4.0]);
    }
}
