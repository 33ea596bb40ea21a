//! Reverse-mode autodiff over dense tensors.
//!
//! Operations are recorded eagerly into a [`Graph`]; [`Graph::backward`]
//! replays them in reverse, accumulating gradients in deterministic node
//! order. Node ids are topological by construction (inputs always precede
//! consumers), so a single reverse sweep suffices.
//!
//! Two attention primitives get fused treatment:
//!
//! * [`Graph::attention`] materializes its per-head softmax maps on the tape
//!   (they are needed twice and, for token attention, they are small);
//! * [`Graph::flare_core`] instead recomputes its encode/decode softmax maps
//!   during the backward sweep, so no `O(heads * n * m)` buffer survives the
//!   forward pass. This is what keeps the low-rank routing path lean.

use crate::error::{Error, Result};
use crate::numcore::kernels::{
    gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn, sigmoid, softmax_rows_inplace,
    LAYER_NORM_EPS,
};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a recorded node. Ids are topological: inputs precede consumers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Stable identity of a trainable parameter inside a parameter store.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulTn { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddBias { a: NodeId, bias: NodeId },
    Softmax { a: NodeId },
    ColNormalize { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Sqrt { a: NodeId },
    SumAll { a: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Reshape { a: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    FlareCore { k: NodeId, v: NodeId, g: NodeId, heads: usize },
    SliceAggregate { s: NodeId, x: NodeId, heads: usize },
    SliceScatter { s: NodeId, t: NodeId, heads: usize },
    GateMix { a: NodeId, b: NodeId, s: NodeId },
}

enum Aux<T: Scalar> {
    None,
    LayerNorm { xhat: Tensor<T>, inv_std: Vec<T> },
    ColSums(Vec<T>),
    Probs(Tensor<T>),
    Latent(Tensor<T>),
}

struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    aux: Aux<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>, needs_grad: bool, aux: Aux<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false, Aux::None)
    }

    /// Trainable parameter leaf; its gradient is retrievable after backward.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> NodeId {
        let nid = self.push(Op::Leaf, value, true, Aux::None);
        self.params.push((id, nid));
        nid
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Parameter leaves in registration order.
    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2()
    }

    // ---- arithmetic ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, out, ng, Aux::None))
    }

    /// `aᵀ · b` with `a: [k x m]`, `b: [k x n]`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ka, m) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_tn leading extents differ: {ka}x{m} vs {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_tn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            ka,
            m,
            n,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulTn { a, b }, out, ng, Aux::None))
    }

    /// `a · bᵀ` with `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (n, kb) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_nt trailing extents differ: {m}x{ka} vs {n}x{kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNt { a, b }, out, ng, Aux::None))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, which: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Shape(format!(
                "{which} operands differ: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + bv;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, ng, Aux::None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o - bv;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, out, ng, Aux::None))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * bv;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, out, ng, Aux::None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = T::from_real(c);
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = *o * cs;
        }
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, out, ng, Aux::None)
    }

    /// Row-broadcast bias add: `a: [r x c]`, `bias: [c]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims2(a)?;
        if self.shape_of(bias) != [c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match row width {c}",
                self.shape_of(bias)
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        let bv = self.nodes[bias.0].value.data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias { a, bias }, out, ng, Aux::None))
    }

    // ---- nonlinearities -----------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape_of(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Shape("softmax on 0-d".into()))?;
        if !self.nodes[a.0].value.is_finite() {
            return Err(Error::Numeric("softmax on non-finite input".into()));
        }
        let mut out = self.nodes[a.0].value.clone();
        softmax_rows_inplace(out.data_mut(), n);
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax { a }, out, ng, Aux::None))
    }

    /// Divide each column of a 2-D tensor by its sum over rows.
    pub fn col_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        let src = self.nodes[a.0].value.data();
        let mut sums = vec![T::zero(); c];
        for i in 0..r {
            for (j, s) in sums.iter_mut().enumerate() {
                *s = *s + src[i * c + j];
            }
        }
        let mut out = self.nodes[a.0].value.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(&sums) {
                *v = *v / s;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::ColNormalize { a }, out, ng, Aux::ColSums(sums)))
    }

    /// Per-row layer normalization over the last axis with affine output.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x)?;
        if self.shape_of(gain) != [c] || self.shape_of(bias) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{c}], got {:?}/{:?}",
                self.shape_of(gain),
                self.shape_of(bias)
            )));
        }
        let eps = T::from_real(LAYER_NORM_EPS);
        let inv_c = T::from_real(1.0 / c as f64);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data().to_vec();
        let bv = self.nodes[bias.0].value.data().to_vec();
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut inv_std = vec![T::zero(); r];
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            let xh_row = &mut xhat.data_mut()[i * c..(i + 1) * c];
            for (j, &v) in row.iter().enumerate() {
                xh_row[j] = (v - mean) * istd;
            }
            let out_row = &mut out.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                out_row[j] = xhat.data()[i * c + j] * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias },
            out,
            ng,
            Aux::LayerNorm { xhat, inv_std },
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let ng = self.needs(a);
        self.push(Op::Gelu { a }, out, ng, Aux::None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let ng = self.needs(a);
        self.push(Op::Sigmoid { a }, out, ng, Aux::None)
    }

    /// Elementwise square root; inputs must be nonnegative.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = v.sqrt();
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Sqrt { a }, out, ng, Aux::None))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let ng = self.needs(a);
        self.push(Op::SumAll { a }, Tensor::scalar(acc), ng, Aux::None)
    }

    // ---- structural ----------------------------------------------------

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(a)?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of width {c}",
                start + len
            )));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols { a, start, len }, out, ng, Aux::None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let r = self.dims2(parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.dims2(p)?;
            if rp != r {
                return Err(Error::Shape("concat_cols row extents differ".into()));
            }
            total += cp;
        }
        let mut out = Tensor::zeros(&[r, total]);
        let mut offset = 0;
        for &p in parts {
            let (_, cp) = self.dims2(p)?;
            let src = self.nodes[p.0].value.data();
            for i in 0..r {
                out.data_mut()[i * total + offset..i * total + offset + cp]
                    .copy_from_slice(&src[i * cp..(i + 1) * cp]);
            }
            offset += cp;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            ng,
            Aux::None,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let c = self.dims2(parts[0])?.1;
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.dims2(p)?;
            if cp != c {
                return Err(Error::Shape("concat_rows column extents differ".into()));
            }
            total += rp;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::from_vec(&[total, c], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            ng,
            Aux::None,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape { a }, out, ng, Aux::None))
    }

    // ---- attention primitives -------------------------------------------

    /// Multi-head scaled dot-product attention with materialized softmax maps.
    ///
    /// `q: [nq x c]`, `k, v: [nk x c]`; channels are partitioned across
    /// `heads`; scale is `1/sqrt(c/heads)`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (nq, c) = self.dims2(q)?;
        let (nk, ck) = self.dims2(k)?;
        let (nv, cv) = self.dims2(v)?;
        if ck != c || cv != c || nv != nk {
            return Err(Error::Shape(format!(
                "attention extents q[{nq}x{c}] k[{nk}x{ck}] v[{nv}x{cv}]"
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let d = c / heads;
        let scale = T::from_real(1.0 / (d as f64).sqrt());
        let mut probs = Tensor::zeros(&[heads * nq, nk]);
        let mut out = Tensor::zeros(&[nq, c]);
        for h in 0..heads {
            let qh = col_block(self.nodes[q.0].value.data(), c, h * d, d, nq);
            let kh = col_block(self.nodes[k.0].value.data(), c, h * d, d, nk);
            let vh = col_block(self.nodes[v.0].value.data(), c, h * d, d, nk);
            let p = &mut probs.data_mut()[h * nq * nk..(h + 1) * nq * nk];
            matmul_nt(&qh, &kh, nq, d, nk, p);
            for s in p.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(p, nk);
            let mut oh = vec![T::zero(); nq * d];
            matmul_nn(p, &vh, nq, nk, d, &mut oh);
            add_col_block(out.data_mut(), c, h * d, d, nq, &oh, true);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::Attention { q, k, v, heads }, out, ng, Aux::Probs(probs)))
    }

    /// FLARE encode/decode routing through `m` latent queries.
    ///
    /// `k, v: [n x c]`, `g: [m x c]`. Encode: per head, latent rows attend
    /// over all `n` points (softmax over the point axis); decode: each point
    /// attends over the `m` latents. The per-head softmax maps are recomputed
    /// in backward instead of being stored, so the tape holds only
    /// `O((n + m) * c)` state for this op.
    pub fn flare_core(&mut self, k: NodeId, v: NodeId, g: NodeId, heads: usize) -> Result<NodeId> {
        let (n, c) = self.dims2(k)?;
        let (nv, cv) = self.dims2(v)?;
        let (m, cg) = self.dims2(g)?;
        if nv != n || cv != c || cg != c {
            return Err(Error::Shape(format!(
                "flare extents k[{n}x{c}] v[{nv}x{cv}] g[{m}x{cg}]"
            )));
        }
        if m < 1 {
            return Err(Error::Config("flare needs at least one latent token".into()));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let d = c / heads;
        let scale = T::from_real(1.0 / (d as f64).sqrt());
        let mut latent = Tensor::zeros(&[m, c]);
        let mut out = Tensor::zeros(&[n, c]);
        for h in 0..heads {
            let kh = col_block(self.nodes[k.0].value.data(), c, h * d, d, n);
            let vh = col_block(self.nodes[v.0].value.data(), c, h * d, d, n);
            let gh = col_block(self.nodes[g.0].value.data(), c, h * d, d, m);
            // encode: latents gather from points
            let mut enc = vec![T::zero(); m * n];
            matmul_nt(&gh, &kh, m, d, n, &mut enc);
            for s in enc.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(&mut enc, n);
            let mut zh = vec![T::zero(); m * d];
            matmul_nn(&enc, &vh, m, n, d, &mut zh);
            add_col_block(latent.data_mut(), c, h * d, d, m, &zh, true);
            drop(enc);
            // decode: points gather from latents
            let mut dec = vec![T::zero(); n * m];
            matmul_nt(&kh, &gh, n, d, m, &mut dec);
            for s in dec.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(&mut dec, m);
            let mut yh = vec![T::zero(); n * d];
            matmul_nn(&dec, &zh, n, m, d, &mut yh);
            add_col_block(out.data_mut(), c, h * d, d, n, &yh, true);
        }
        let ng = self.needs(k) || self.needs(v) || self.needs(g);
        Ok(self.push(
            Op::FlareCore { k, v, g, heads },
            out,
            ng,
            Aux::Latent(latent),
        ))
    }

    /// Per-head weighted aggregation of point features into slice tokens:
    /// `t[mm, h*d + dd] = sum_n s[n, h*m + mm] * x[n, h*d + dd]`.
    pub fn slice_aggregate(&mut self, s: NodeId, x: NodeId, heads: usize) -> Result<NodeId> {
        let (n, hm) = self.dims2(s)?;
        let (nx, c) = self.dims2(x)?;
        if nx != n || hm % heads != 0 || c % heads != 0 {
            return Err(Error::Shape(format!(
                "slice_aggregate extents s[{n}x{hm}] x[{nx}x{c}] heads {heads}"
            )));
        }
        let m = hm / heads;
        let d = c / heads;
        let mut out = Tensor::zeros(&[m, c]);
        for h in 0..heads {
            let sh = col_block(self.nodes[s.0].value.data(), hm, h * m, m, n);
            let xh = col_block(self.nodes[x.0].value.data(), c, h * d, d, n);
            let mut th = vec![T::zero(); m * d];
            matmul_tn(&sh, &xh, n, m, d, &mut th);
            add_col_block(out.data_mut(), c, h * d, d, m, &th, true);
        }
        let ng = self.needs(s) || self.needs(x);
        Ok(self.push(Op::SliceAggregate { s, x, heads }, out, ng, Aux::None))
    }

    /// Per-head scatter of slice tokens back to points:
    /// `y[n, h*d + dd] = sum_mm s[n, h*m + mm] * t[mm, h*d + dd]`.
    pub fn slice_scatter(&mut self, s: NodeId, t: NodeId, heads: usize) -> Result<NodeId> {
        let (n, hm) = self.dims2(s)?;
        let (m, c) = self.dims2(t)?;
        if hm % heads != 0 || c % heads != 0 || hm / heads != m {
            return Err(Error::Shape(format!(
                "slice_scatter extents s[{n}x{hm}] t[{m}x{c}] heads {heads}"
            )));
        }
        let d = c / heads;
        let mut out = Tensor::zeros(&[n, c]);
        for h in 0..heads {
            let sh = col_block(self.nodes[s.0].value.data(), hm, h * m, m, n);
            let th = col_block(self.nodes[t.0].value.data(), c, h * d, d, m);
            let mut yh = vec![T::zero(); n * d];
            matmul_nn(&sh, &th, n, m, d, &mut yh);
            add_col_block(out.data_mut(), c, h * d, d, n, &yh, true);
        }
        let ng = self.needs(s) || self.needs(t);
        Ok(self.push(Op::SliceScatter { s, t, heads }, out, ng, Aux::None))
    }

    /// Convex gate between two branches: `y = (1 - s) * a + s * b` with `s` a
    /// scalar node (typically a sigmoid output).
    pub fn gate_mix(&mut self, a: NodeId, b: NodeId, s: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "gate_mix")?;
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Shape("gate must be scalar".into()));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let one_minus = T::one() - sv;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = one_minus * *o + sv * bv;
        }
        let ng = self.needs(a) || self.needs(b) || self.needs(s);
        Ok(self.push(Op::GateMix { a, b, s }, out, ng, Aux::None))
    }

    // ---- backward -------------------------------------------------------

    fn add_grad(&mut self, id: NodeId, contribution: Tensor<T>) {
        debug_assert_eq!(self.nodes[id.0].value.shape(), contribution.shape());
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gv = *gv + *cv;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that needs them, in deterministic order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape_of(loss)
            )));
        }
        self.add_grad(loss, Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let gout = self.nodes[i].grad.take().expect("checked above");
            self.step_backward(NodeId(i), &op, &gout);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn step_backward(&mut self, node: NodeId, op: &Op, gout: &Tensor<T>) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(a).expect("recorded 2-D");
                let n = self.dims2(b).expect("recorded 2-D").1;
                if self.needs(a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_nt(
                        gout.data(),
                        self.nodes[b.0].value.data(),
                        m,
                        n,
                        k,
                        da.data_mut(),
                    );
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    matmul_tn(
                        self.nodes[a.0].value.data(),
                        gout.data(),
                        m,
                        k,
                        n,
                        db.data_mut(),
                    );
                    self.add_grad(b, db);
                }
            }
            Op::MatMulTn { a, b } => {
                // y = aᵀ b, a: [k x m], b: [k x n]
                let (k, m) = self.dims2(a).expect("recorded 2-D");
                let n = self.dims2(b).expect("recorded 2-D").1;
                if self.needs(a) {
                    // da = b · gᵀ : [k x m]
                    let mut da = Tensor::zeros(&[k, m]);
                    matmul_nt(
                        self.nodes[b.0].value.data(),
                        gout.data(),
                        k,
                        n,
                        m,
                        da.data_mut(),
                    );
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    // db = a · g : [k x n]
                    let mut db = Tensor::zeros(&[k, n]);
                    matmul_nn(
                        self.nodes[a.0].value.data(),
                        gout.data(),
                        k,
                        m,
                        n,
                        db.data_mut(),
                    );
                    self.add_grad(b, db);
                }
            }
            Op::MatMulNt { a, b } => {
                // y = a bᵀ, a: [m x k], b: [n x k]
                let (m, k) = self.dims2(a).expect("recorded 2-D");
                let n = self.dims2(b).expect("recorded 2-D").0;
                if self.needs(a) {
                    // da = g · b : [m x k]
                    let mut da = Tensor::zeros(&[m, k]);
                    matmul_nn(
                        gout.data(),
                        self.nodes[b.0].value.data(),
                        m,
                        n,
                        k,
                        da.data_mut(),
                    );
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    // db = gᵀ · a : [n x k]
                    let mut db = Tensor::zeros(&[n, k]);
                    matmul_tn(
                        gout.data(),
                        self.nodes[a.0].value.data(),
                        m,
                        n,
                        k,
                        db.data_mut(),
                    );
                    self.add_grad(b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, gout.clone());
                }
                if self.needs(b) {
                    self.add_grad(b, gout.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, gout.clone());
                }
                if self.needs(b) {
                    let mut neg = gout.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    self.add_grad(b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let mut da = gout.clone();
                    for (g, &bv) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *g = *g * bv;
                    }
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = gout.clone();
                    for (g, &av) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *g = *g * av;
                    }
                    self.add_grad(b, db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(a) {
                    let cs = T::from_real(c);
                    let mut da = gout.clone();
                    for v in da.data_mut() {
                        *v = *v * cs;
                    }
                    self.add_grad(a, da);
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(a) {
                    self.add_grad(a, gout.clone());
                }
                if self.needs(bias) {
                    let c = self.dims2(a).expect("recorded 2-D").1;
                    let mut db = Tensor::zeros(&[c]);
                    for row in gout.data().chunks(c) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.add_grad(bias, db);
                }
            }
            Op::Softmax { a } => {
                if self.needs(a) {
                    let shape = self.shape_of(node).to_vec();
                    let n = *shape.last().expect("non-empty");
                    let mut da = gout.clone();
                    softmax_rows_vjp(da.data_mut(), self.nodes[node.0].value.data(), n);
                    self.add_grad(a, da);
                }
            }
            Op::ColNormalize { a } => {
                if self.needs(a) {
                    let (r, c) = self.dims2(node).expect("recorded 2-D");
                    let sums = match &self.nodes[node.0].aux {
                        Aux::ColSums(s) => s.clone(),
                        _ => unreachable!("col_normalize stores sums"),
                    };
                    let y = self.nodes[node.0].value.data();
                    let g = gout.data();
                    // per column: da_ij = (g_ij - sum_k g_kj y_kj) / s_j
                    let mut coldot = vec![T::zero(); c];
                    for i in 0..r {
                        for (j, cd) in coldot.iter_mut().enumerate() {
                            *cd = *cd + g[i * c + j] * y[i * c + j];
                        }
                    }
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..c {
                            da.data_mut()[i * c + j] = (g[i * c + j] - coldot[j]) / sums[j];
                        }
                    }
                    self.add_grad(a, da);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.dims2(node).expect("recorded 2-D");
                let (xhat, inv_std) = match &self.nodes[node.0].aux {
                    Aux::LayerNorm { xhat, inv_std } => (xhat.clone(), inv_std.clone()),
                    _ => unreachable!("layer_norm stores xhat"),
                };
                let g = gout.data();
                if self.needs(gain) {
                    let mut dg = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] = dg.data_mut()[j] + g[i * c + j] * xhat.data()[i * c + j];
                        }
                    }
                    self.add_grad(gain, dg);
                }
                if self.needs(bias) {
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            db.data_mut()[j] = db.data_mut()[j] + g[i * c + j];
                        }
                    }
                    self.add_grad(bias, db);
                }
                if self.needs(x) {
                    let gv = self.nodes[gain.0].value.data().to_vec();
                    let inv_c = T::from_real(1.0 / c as f64);
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let mut mean_h = T::zero();
                        let mut mean_hx = T::zero();
                        for j in 0..c {
                            let h = g[i * c + j] * gv[j];
                            mean_h = mean_h + h;
                            mean_hx = mean_hx + h * xhat.data()[i * c + j];
                        }
                        mean_h = mean_h * inv_c;
                        mean_hx = mean_hx * inv_c;
                        for j in 0..c {
                            let h = g[i * c + j] * gv[j];
                            dx.data_mut()[i * c + j] =
                                inv_std[i] * (h - mean_h - xhat.data()[i * c + j] * mean_hx);
                        }
                    }
                    self.add_grad(x, dx);
                }
            }
            Op::Gelu { a } => {
                if self.needs(a) {
                    let mut da = gout.clone();
                    for (g, &xv) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *g = *g * gelu_grad(xv);
                    }
                    self.add_grad(a, da);
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(a) {
                    let mut da = gout.clone();
                    for (g, &yv) in da.data_mut().iter_mut().zip(self.nodes[node.0].value.data()) {
                        *g = *g * yv * (T::one() - yv);
                    }
                    self.add_grad(a, da);
                }
            }
            Op::Sqrt { a } => {
                if self.needs(a) {
                    let two = T::from_real(2.0);
                    let mut da = gout.clone();
                    for (g, &yv) in da.data_mut().iter_mut().zip(self.nodes[node.0].value.data()) {
                        *g = if yv == T::zero() {
                            T::zero()
                        } else {
                            *g / (two * yv)
                        };
                    }
                    self.add_grad(a, da);
                }
            }
            Op::SumAll { a } => {
                if self.needs(a) {
                    let g = gout.data()[0];
                    let da = Tensor::full(self.shape_of(a), g);
                    self.add_grad(a, da);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.needs(a) {
                    let (r, c) = self.dims2(a).expect("recorded 2-D");
                    let mut da = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        da.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout.data()[i * len..(i + 1) * len]);
                    }
                    self.add_grad(a, da);
                }
            }
            Op::ConcatCols { ref parts } => {
                let total = self.dims2(node).expect("recorded 2-D").1;
                let r = self.dims2(node).expect("recorded 2-D").0;
                let mut offset = 0;
                for &p in parts {
                    let cp = self.dims2(p).expect("recorded 2-D").1;
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(&[r, cp]);
                        for i in 0..r {
                            dp.data_mut()[i * cp..(i + 1) * cp].copy_from_slice(
                                &gout.data()[i * total + offset..i * total + offset + cp],
                            );
                        }
                        self.add_grad(p, dp);
                    }
                    offset += cp;
                }
            }
            Op::ConcatRows { ref parts } => {
                let c = self.dims2(node).expect("recorded 2-D").1;
                let mut offset = 0;
                for &p in parts {
                    let rp = self.dims2(p).expect("recorded 2-D").0;
                    if self.needs(p) {
                        let dp = Tensor::from_vec(
                            &[rp, c],
                            gout.data()[offset * c..(offset + rp) * c].to_vec(),
                        )
                        .expect("slice sized");
                        self.add_grad(p, dp);
                    }
                    offset += rp;
                }
            }
            Op::Reshape { a } => {
                if self.needs(a) {
                    let da = gout.reshaped(self.shape_of(a)).expect("same numel");
                    self.add_grad(a, da);
                }
            }
            Op::Attention { q, k, v, heads } => {
                self.attention_backward(node, q, k, v, heads, gout);
            }
            Op::FlareCore { k, v, g, heads } => {
                self.flare_backward(node, k, v, g, heads, gout);
            }
            Op::SliceAggregate { s, x, heads } => {
                let (n, hm) = self.dims2(s).expect("recorded 2-D");
                let c = self.dims2(x).expect("recorded 2-D").1;
                let m = hm / heads;
                let d = c / heads;
                let mut ds = Tensor::zeros(&[n, hm]);
                let mut dx = Tensor::zeros(&[n, c]);
                for h in 0..heads {
                    let sh = col_block(self.nodes[s.0].value.data(), hm, h * m, m, n);
                    let xh = col_block(self.nodes[x.0].value.data(), c, h * d, d, n);
                    let gth = col_block(gout.data(), c, h * d, d, m);
                    if self.needs(s) {
                        let mut dsh = vec![T::zero(); n * m];
                        matmul_nt(&xh, &gth, n, d, m, &mut dsh);
                        add_col_block(ds.data_mut(), hm, h * m, m, n, &dsh, true);
                    }
                    if self.needs(x) {
                        let mut dxh = vec![T::zero(); n * d];
                        matmul_nn(&sh, &gth, n, m, d, &mut dxh);
                        add_col_block(dx.data_mut(), c, h * d, d, n, &dxh, true);
                    }
                }
                if self.needs(s) {
                    self.add_grad(s, ds);
                }
                if self.needs(x) {
                    self.add_grad(x, dx);
                }
            }
            Op::SliceScatter { s, t, heads } => {
                let (n, hm) = self.dims2(s).expect("recorded 2-D");
                let (m, c) = self.dims2(t).expect("recorded 2-D");
                let d = c / heads;
                let mut ds = Tensor::zeros(&[n, hm]);
                let mut dt = Tensor::zeros(&[m, c]);
                for h in 0..heads {
                    let sh = col_block(self.nodes[s.0].value.data(), hm, h * m, m, n);
                    let th = col_block(self.nodes[t.0].value.data(), c, h * d, d, m);
                    let gyh = col_block(gout.data(), c, h * d, d, n);
                    if self.needs(s) {
                        let mut dsh = vec![T::zero(); n * m];
                        matmul_nt(&gyh, &th, n, d, m, &mut dsh);
                        add_col_block(ds.data_mut(), hm, h * m, m, n, &dsh, true);
                    }
                    if self.needs(t) {
                        let mut dth = vec![T::zero(); m * d];
                        matmul_tn(&sh, &gyh, n, m, d, &mut dth);
                        add_col_block(dt.data_mut(), c, h * d, d, m, &dth, true);
                    }
                }
                if self.needs(s) {
                    self.add_grad(s, ds);
                }
                if self.needs(t) {
                    self.add_grad(t, dt);
                }
            }
            Op::GateMix { a, b, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.needs(a) {
                    let one_minus = T::one() - sv;
                    let mut da = gout.clone();
                    for v in da.data_mut() {
                        *v = *v * one_minus;
                    }
                    self.add_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = gout.clone();
                    for v in db.data_mut() {
                        *v = *v * sv;
                    }
                    self.add_grad(b, db);
                }
                if self.needs(s) {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut acc = T::zero();
                    for ((&g, &a_), &b_) in gout.data().iter().zip(av).zip(bv) {
                        acc = acc + g * (b_ - a_);
                    }
                    self.add_grad(s, Tensor::scalar(acc));
                }
            }
        }
    }

    fn attention_backward(
        &mut self,
        node: NodeId,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        gout: &Tensor<T>,
    ) {
        let (nq, c) = self.dims2(q).expect("recorded 2-D");
        let nk = self.dims2(k).expect("recorded 2-D").0;
        let d = c / heads;
        let scale = T::from_real(1.0 / (d as f64).sqrt());
        let probs = match &self.nodes[node.0].aux {
            Aux::Probs(p) => p.clone(),
            _ => unreachable!("attention stores probs"),
        };
        let mut dq = Tensor::zeros(&[nq, c]);
        let mut dk = Tensor::zeros(&[nk, c]);
        let mut dv = Tensor::zeros(&[nk, c]);
        for h in 0..heads {
            let qh = col_block(self.nodes[q.0].value.data(), c, h * d, d, nq);
            let kh = col_block(self.nodes[k.0].value.data(), c, h * d, d, nk);
            let vh = col_block(self.nodes[v.0].value.data(), c, h * d, d, nk);
            let goh = col_block(gout.data(), c, h * d, d, nq);
            let p = &probs.data()[h * nq * nk..(h + 1) * nq * nk];
            // dv_h += pᵀ · go_h
            if self.needs(v) {
                let mut dvh = vec![T::zero(); nk * d];
                matmul_tn(p, &goh, nq, nk, d, &mut dvh);
                add_col_block(dv.data_mut(), c, h * d, d, nk, &dvh, true);
            }
            if self.needs(q) || self.needs(k) {
                // dp = go_h · v_hᵀ, then softmax VJP and scale
                let mut dp = vec![T::zero(); nq * nk];
                matmul_nt(&goh, &vh, nq, d, nk, &mut dp);
                softmax_rows_vjp(&mut dp, p, nk);
                for s in dp.iter_mut() {
                    *s = *s * scale;
                }
                if self.needs(q) {
                    let mut dqh = vec![T::zero(); nq * d];
                    matmul_nn(&dp, &kh, nq, nk, d, &mut dqh);
                    add_col_block(dq.data_mut(), c, h * d, d, nq, &dqh, true);
                }
                if self.needs(k) {
                    let mut dkh = vec![T::zero(); nk * d];
                    matmul_tn(&dp, &qh, nq, nk, d, &mut dkh);
                    add_col_block(dk.data_mut(), c, h * d, d, nk, &dkh, true);
                }
            }
        }
        if self.needs(q) {
            self.add_grad(q, dq);
        }
        if self.needs(k) {
            self.add_grad(k, dk);
        }
        if self.needs(v) {
            self.add_grad(v, dv);
        }
    }

    fn flare_backward(
        &mut self,
        node: NodeId,
        k: NodeId,
        v: NodeId,
        g: NodeId,
        heads: usize,
        gout: &Tensor<T>,
    ) {
        let (n, c) = self.dims2(k).expect("recorded 2-D");
        let m = self.dims2(g).expect("recorded 2-D").0;
        let d = c / heads;
        let scale = T::from_real(1.0 / (d as f64).sqrt());
        let latent = match &self.nodes[node.0].aux {
            Aux::Latent(z) => z.clone(),
            _ => unreachable!("flare stores latents"),
        };
        let mut dkt = Tensor::zeros(&[n, c]);
        let mut dvt = Tensor::zeros(&[n, c]);
        let mut dgt = Tensor::zeros(&[m, c]);
        for h in 0..heads {
            let kh = col_block(self.nodes[k.0].value.data(), c, h * d, d, n);
            let vh = col_block(self.nodes[v.0].value.data(), c, h * d, d, n);
            let gh = col_block(self.nodes[g.0].value.data(), c, h * d, d, m);
            let zh = col_block(latent.data(), c, h * d, d, m);
            let gyh = col_block(gout.data(), c, h * d, d, n);

            // Recompute decode map: softmax over latents per point.
            let mut dec = vec![T::zero(); n * m];
            matmul_nt(&kh, &gh, n, d, m, &mut dec);
            for s in dec.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(&mut dec, m);

            // dz_h = decᵀ · gy_h
            let mut dzh = vec![T::zero(); m * d];
            matmul_tn(&dec, &gyh, n, m, d, &mut dzh);

            // decode softmax VJP
            let mut ddec = vec![T::zero(); n * m];
            matmul_nt(&gyh, &zh, n, d, m, &mut ddec);
            softmax_rows_vjp(&mut ddec, &dec, m);
            for s in ddec.iter_mut() {
                *s = *s * scale;
            }
            drop(dec);
            if self.needs(k) {
                let mut dkh = vec![T::zero(); n * d];
                matmul_nn(&ddec, &gh, n, m, d, &mut dkh);
                add_col_block(dkt.data_mut(), c, h * d, d, n, &dkh, true);
            }
            if self.needs(g) {
                let mut dgh = vec![T::zero(); m * d];
                matmul_tn(&ddec, &kh, n, m, d, &mut dgh);
                add_col_block(dgt.data_mut(), c, h * d, d, m, &dgh, true);
            }
            drop(ddec);

            // Recompute encode map: softmax over points per latent.
            let mut enc = vec![T::zero(); m * n];
            matmul_nt(&gh, &kh, m, d, n, &mut enc);
            for s in enc.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(&mut enc, n);
            if self.needs(v) {
                let mut dvh = vec![T::zero(); n * d];
                matmul_tn(&enc, &dzh, m, n, d, &mut dvh);
                add_col_block(dvt.data_mut(), c, h * d, d, n, &dvh, true);
            }
            // encode softmax VJP
            let mut denc = vec![T::zero(); m * n];
            matmul_nt(&dzh, &vh, m, d, n, &mut denc);
            softmax_rows_vjp(&mut denc, &enc, n);
            for s in denc.iter_mut() {
                *s = *s * scale;
            }
            drop(enc);
            if self.needs(g) {
                let mut dgh = vec![T::zero(); m * d];
                matmul_nn(&denc, &kh, m, n, d, &mut dgh);
                add_col_block(dgt.data_mut(), c, h * d, d, m, &dgh, true);
            }
            if self.needs(k) {
                let mut dkh = vec![T::zero(); n * d];
                matmul_tn(&denc, &gh, m, n, d, &mut dkh);
                add_col_block(dkt.data_mut(), c, h * d, d, n, &dkh, true);
            }
        }
        if self.needs(k) {
            self.add_grad(k, dkt);
        }
        if self.needs(v) {
            self.add_grad(v, dvt);
        }
        if self.needs(g) {
            self.add_grad(g, dgt);
        }
    }
}

/// Copy a `[rows x width]` column block starting at `start` out of a
/// row-major `[rows x cols]` matrix.
fn col_block<T: Scalar>(src: &[T], cols: usize, start: usize, width: usize, rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&src[i * cols + start..i * cols + start + width]);
    }
    out
}

/// Write (or accumulate) a column block back into a row-major matrix.
fn add_col_block<T: Scalar>(
    dst: &mut [T],
    cols: usize,
    start: usize,
    width: usize,
    rows: usize,
    block: &[T],
    accumulate: bool,
) {
    for i in 0..rows {
        let d = &mut dst[i * cols + start..i * cols + start + width];
        let s = &block[i * width..(i + 1) * width];
        if accumulate {
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv = *dv + sv;
            }
        } else {
            d.copy_from_slice(s);
        }
    }
}

/// In-place softmax vector-Jacobian product over contiguous rows:
/// `dy_i <- y_i * (dy_i - sum_j dy_j y_j)`.
fn softmax_rows_vjp<T: Scalar>(dy: &mut [T], y: &[T], n: usize) {
    debug_assert_eq!(dy.len(), y.len());
    for (dy_row, y_row) in dy.chunks_mut(n).zip(y.chunks(n)) {
        let mut dot = T::zero();
        for (&d, &yv) in dy_row.iter().zip(y_row.iter()) {
            dot = dot + d * yv;
        }
        for (d, &yv) in dy_row.iter_mut().zip(y_row.iter()) {
            *d = yv * (*d - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_hand_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_of_sum_of_product_is_broadcast_input() {
        // loss = sum(W · x) => dW[i][j] = x[j]
        let mut g = Graph::<f64>::new();
        let w = g.param(
            ParamId(0),
            Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap(),
        );
        let x = g.leaf(Tensor::from_vec(&[3, 1], vec![2.0, -1.0, 4.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        assert_eq!(gw.data(), &[2.0, -1.0, 4.0, 2.0, -1.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let used = g.param(ParamId(0), Tensor::scalar(2.0));
        let unused = g.param(ParamId(1), Tensor::scalar(5.0));
        let loss = g.mul(used, used).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(used).is_some());
        assert!(g.grad(unused).is_none());
        let _ = unused;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.param(ParamId(0), Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn gate_mix_at_half_is_average() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[1, 2], vec![2.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(&[1, 2], vec![6.0, 0.0]).unwrap());
        let s = g.leaf(Tensor::scalar(0.5));
        let y = g.gate_mix(a, b, s).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 2.0]);
    }
}
