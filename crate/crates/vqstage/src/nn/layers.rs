//! Named parameter storage and the layer building blocks used by the
//! tokenizer and the sequence model.
//!
//! Parameters live outside any tape in a [`ParamSet`]; a training step injects
//! them as trainable leaves, builds the graph, and reads gradients back out.

use std::collections::HashMap;

use rand::Rng;

use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Injects every parameter into the tape. With `trainable` false the
    /// graph runs gradient-free (frozen evaluation).
    pub fn inject(&self, tape: &mut Tape<T>, trainable: bool) -> TapeParams {
        let ids = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        TapeParams { ids }
    }

    /// Gradients for every parameter in declaration order; zeros where a
    /// parameter did not participate in the loss.
    pub fn collect_grads(&self, tape: &Tape<T>, injected: &TapeParams) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(&injected.ids)
            .map(|(t, &node)| {
                tape.grad(node).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect()
    }
}

/// Tape handles of injected parameters, indexable by [`ParamId`].
pub struct TapeParams {
    ids: Vec<NodeId>,
}

impl TapeParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }
}

// ── layers ──────────────────────────────────────────────────────────

/// Fully connected layer stored as [d_in, d_out] so batched rows multiply
/// straight through.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = if std == 0.0 {
            Tensor::zeros(vec![d_in, d_out])
        } else {
            Tensor::randn(vec![d_in, d_out], std, rng)
        };
        let w = ps.add(&format!("{name}.w"), w);
        let b = bias.then(|| ps.add(&format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &TapeParams, x: NodeId) -> NodeId {
        let y = tape.matmul(x, p.node(self.w));
        match self.b {
            Some(b) => tape.add_row(y, p.node(b)),
            None => y,
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), Tensor::full(vec![dim], T::one()));
        let beta = ps.add(&format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &TapeParams, x: NodeId) -> NodeId {
        tape.layer_norm(x, p.node(self.gamma), p.node(self.beta), 1e-5)
    }
}

pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let t = if std == 0.0 {
            Tensor::zeros(vec![vocab, dim])
        } else {
            Tensor::randn(vec![vocab, dim], std, rng)
        };
        let table = ps.add(name, t);
        Embedding { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &TapeParams, ids: &[u32]) -> NodeId {
        tape.embed(p.node(self.table), ids)
    }
}

/// 2-d convolution lowered through im2col. Weight layout [c_in*kh*kw, c_out].
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = ps.add(&format!("{name}.w"), Tensor::randn(vec![c_in * k * k, c_out], std, rng));
        let b = Some(ps.add(&format!("{name}.b"), Tensor::zeros(vec![c_out])));
        Conv2d { w, b, c_in, c_out, k, stride, pad }
    }

    /// x: [b, c_in, h, w] -> [b, c_out, oh, ow]
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &TapeParams, x: NodeId) -> NodeId {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "conv2d input must be [b,c,h,w], got {shape:?}");
        assert_eq!(shape[1], self.c_in, "conv2d: {} input channels, layer expects {}", shape[1], self.c_in);
        let b = shape[0];
        let oh = (shape[2] + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (shape[3] + 2 * self.pad - self.k) / self.stride + 1;
        let cols = tape.im2col(x, self.k, self.k, self.stride, self.pad);
        let mut rows = tape.matmul(cols, p.node(self.w));
        if let Some(bias) = self.b {
            rows = tape.add_row(rows, p.node(bias));
        }
        tape.rows_to_chw(rows, b, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::init(&mut ps, "l", 3, 5, 0.1, true, &mut rng);
        let mut tape = Tape::new();
        let p = ps.inject(&mut tape, true);
        let x = tape.constant(Tensor::zeros(vec![4, 3]));
        let y = lin.forward(&mut tape, &p, x);
        assert_eq!(tape.value(y).shape(), &[4, 5]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("p", Tensor::zeros(vec![1]));
        ps.add("p", Tensor::zeros(vec![1]));
    }

    #[test]
    fn conv_output_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::init(&mut ps, "c", 3, 8, 3, 2, 1, &mut rng);
        let mut tape = Tape::new();
        let p = ps.inject(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![2, 3, 32, 32]));
        let y = conv.forward(&mut tape, &p, x);
        assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn zero_image_biasless_conv_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f64>::new();
        let mut conv = Conv2d::init(&mut ps, "c", 1, 4, 3, 2, 1, &mut rng);
        conv.b = None;
        let mut tape = Tape::new();
        let p = ps.inject(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![1, 1, 8, 8]));
        let y = conv.forward(&mut tape, &p, x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
