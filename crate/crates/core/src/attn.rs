//! The three attention mechanisms: physics attention over learnable slices,
//! FLARE low-rank latent routing, and the gated self/cross block that
//! combines either self-attention flavor with context cross-attention.
//!
//! Slice weights are kept per head (each head learns its own soft partition
//! of the points), matching the reference physics-attention layout. The
//! slice tensor is `[n x heads*m]` with head-blocked columns; every column
//! is normalized to sum to one over the points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, NodeId, ParamId};
use crate::numcore::nn::{LayerNormParams, Linear, Mlp, ParamStore};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Tolerance on slice-weight column sums (debug-mode invariant).
pub const SLICE_COLSUM_TOL: f64 = 1e-5;

/// Transolver-style physics attention.
///
/// Points are softly assigned to `m` learnable slices per head, slice tokens
/// attend among themselves, and the updated tokens are scattered back. No
/// buffer of size `n x n` is ever allocated.
pub struct PhysicsAttention {
    pub slice_proj: Linear, // c -> heads*m slice logits
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub tokens: usize,
}

impl PhysicsAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tokens < 1 {
            return Err(Error::Config("physics attention needs at least one slice".into()));
        }
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(PhysicsAttention {
            slice_proj: Linear::new(store, &format!("{name}.slice"), channels, heads * tokens, rng),
            wq: Linear::new(store, &format!("{name}.wq"), channels, channels, rng),
            wk: Linear::new(store, &format!("{name}.wk"), channels, channels, rng),
            wv: Linear::new(store, &format!("{name}.wv"), channels, channels, rng),
            wo: Linear::new(store, &format!("{name}.wo"), channels, channels, rng),
            heads,
            tokens,
        })
    }

    /// Slice weights for input `x`: softmax over each head's slice logits per
    /// point, then column normalization over points.
    pub fn slice_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (n, _) = g.value(x).dims2()?;
        let logits = self.slice_proj.apply(g, store, x)?;
        let grouped = g.reshape(logits, &[n * self.heads, self.tokens])?;
        let soft = g.softmax(grouped)?;
        let back = g.reshape(soft, &[n, self.heads * self.tokens])?;
        let s = g.col_normalize(back)?;
        #[cfg(debug_assertions)]
        check_slice_weights(g.value(s));
        Ok(s)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let s = self.slice_weights(g, store, x)?;
        let t = g.slice_aggregate(s, x, self.heads)?;
        let q = self.wq.apply(g, store, t)?;
        let k = self.wk.apply(g, store, t)?;
        let v = self.wv.apply(g, store, t)?;
        let t_hat = g.attention(q, k, v, self.heads)?;
        let y = g.slice_scatter(s, t_hat, self.heads)?;
        self.wo.apply(g, store, y)
    }
}

#[cfg(debug_assertions)]
fn check_slice_weights<T: Scalar>(s: &Tensor<T>) {
    let (n, cols) = s.dims2().expect("slice weights are 2-D");
    for j in 0..cols {
        let mut sum = 0.0f64;
        for i in 0..n {
            let v = s.at2(i, j).to_real();
            debug_assert!(v >= 0.0, "slice weight below zero: {v}");
            sum += v;
        }
        debug_assert!(
            (sum - 1.0).abs() <= SLICE_COLSUM_TOL,
            "slice column {j} sums to {sum}"
        );
    }
}

/// FLARE: encode the points into `m` latent tokens through learnable global
/// queries, then decode back to point resolution. The implied `n x n` mixing
/// operator has rank at most `m`.
pub struct FlareAttention {
    pub queries: ParamId, // [m x c] learnable global queries
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub tokens: usize,
}

impl FlareAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tokens < 1 {
            return Err(Error::Config("flare needs at least one latent query".into()));
        }
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        // unit normal scaled by 1/sqrt(c)
        let mut q = Tensor::rand_normal(&[tokens, channels], rng);
        let scale = T::from_real(1.0 / (channels as f64).sqrt());
        for v in q.data_mut() {
            *v = *v * scale;
        }
        Ok(FlareAttention {
            queries: store.register(format!("{name}.queries"), q),
            wk: Linear::new(store, &format!("{name}.wk"), channels, channels, rng),
            wv: Linear::new(store, &format!("{name}.wv"), channels, channels, rng),
            wo: Linear::new(store, &format!("{name}.wo"), channels, channels, rng),
            heads,
            tokens,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let k = self.wk.apply(g, store, x)?;
        let v = self.wv.apply(g, store, x)?;
        let q = store.inject(g, self.queries);
        let y = g.flare_core(k, v, q, self.heads)?;
        self.wo.apply(g, store, y)
    }
}

/// Point features query a bank of context tokens.
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(CrossAttention {
            wq: Linear::new(store, &format!("{name}.wq"), channels, channels, rng),
            wk: Linear::new(store, &format!("{name}.wk"), channels, channels, rng),
            wv: Linear::new(store, &format!("{name}.wv"), channels, channels, rng),
            wo: Linear::new(store, &format!("{name}.wo"), channels, channels, rng),
            heads,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        let (cc, _) = g.value(context).dims2()?;
        if cc == 0 {
            return Err(Error::Config("empty context bank".into()));
        }
        let q = self.wq.apply(g, store, x)?;
        let k = self.wk.apply(g, store, context)?;
        let v = self.wv.apply(g, store, context)?;
        let y = g.attention(q, k, v, self.heads)?;
        self.wo.apply(g, store, y)
    }
}

/// Which self-attention flavor a block routes through.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SelfAttnKind {
    Physics,
    Flare,
}

pub enum SelfAttention {
    Physics(PhysicsAttention),
    Flare(FlareAttention),
}

impl SelfAttention {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            SelfAttention::Physics(p) => p.forward(g, store, x),
            SelfAttention::Flare(f) => f.forward(g, store, x),
        }
    }
}

/// Transformer block: pre-norm, gated self/cross attention, residual,
/// pre-norm, feed-forward (hidden = 2x channels), residual.
///
/// With a context bank present the attention output is the adaptive mixture
/// `(1 - sigmoid(alpha)) * cross + sigmoid(alpha) * self` with `alpha`
/// learnable and initialized to zero. Without context (plain Transolver) the
/// block is self-attention only.
pub struct GaleBlock {
    pub ln1: LayerNormParams,
    pub self_attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub gate: Option<ParamId>,
    pub ln2: LayerNormParams,
    pub ffn: Mlp,
}

impl GaleBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: SelfAttnKind,
        with_context: bool,
        channels: usize,
        heads: usize,
        tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let ln1 = LayerNormParams::new(store, &format!("{name}.ln1"), channels);
        let self_attn = match kind {
            SelfAttnKind::Physics => SelfAttention::Physics(PhysicsAttention::new(
                store,
                &format!("{name}.self"),
                channels,
                heads,
                tokens,
                rng,
            )?),
            SelfAttnKind::Flare => SelfAttention::Flare(FlareAttention::new(
                store,
                &format!("{name}.self"),
                channels,
                heads,
                tokens,
                rng,
            )?),
        };
        let (cross, gate) = if with_context {
            let cross = CrossAttention::new(store, &format!("{name}.cross"), channels, heads, rng)?;
            let gate = store.register(format!("{name}.gate"), Tensor::zeros(&[1]));
            (Some(cross), Some(gate))
        } else {
            (None, None)
        };
        let ln2 = LayerNormParams::new(store, &format!("{name}.ln2"), channels);
        let ffn = Mlp::new(
            store,
            &format!("{name}.ffn"),
            &[channels, 2 * channels, channels],
            rng,
        );
        Ok(GaleBlock {
            ln1,
            self_attn,
            cross,
            gate,
            ln2,
            ffn,
        })
    }

    /// Pre-residual attention output: the gated self/cross mixture (or the
    /// bare self branch when the block has no context).
    pub fn attention_mix<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_normed: NodeId,
        context: Option<NodeId>,
    ) -> Result<NodeId> {
        let self_y = self.self_attn.forward(g, store, x_normed)?;
        match (&self.cross, self.gate, context) {
            (Some(cross), Some(gate), Some(ctx)) => {
                let cross_y = cross.forward(g, store, x_normed, ctx)?;
                let alpha = store.inject(g, gate);
                let sig = g.sigmoid(alpha);
                g.gate_mix(cross_y, self_y, sig)
            }
            (None, None, None) => Ok(self_y),
            _ => Err(Error::Config(
                "context presence must match block construction".into(),
            )),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        context: Option<NodeId>,
    ) -> Result<NodeId> {
        let h = self.ln1.apply(g, store, x)?;
        let mixed = self.attention_mix(g, store, h, context)?;
        let x1 = g.add(x, mixed)?;
        let h2 = self.ln2.apply(g, store, x1)?;
        let f = self.ffn.apply(g, store, h2)?;
        g.add(x1, f)
    }
}

/// Deterministic rng for a named component.
pub fn component_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(salt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn equal_logits_give_uniform_columns_and_mean_tokens() {
        let mut rng = rng();
        let mut store = ParamStore::<f64>::new();
        let pa = PhysicsAttention::new(&mut store, "pa", 4, 2, 3, &mut rng).unwrap();
        // zero slice projector => equal logits => every column 1/n
        for v in store.get_mut(pa.slice_proj.w).data_mut() {
            *v = 0.0;
        }
        let n = 5;
        let mut g = Graph::new();
        let mut xr = rng;
        let x = g.leaf(Tensor::rand_uniform(&[n, 4], -1.0, 1.0, &mut xr));
        let s = pa.slice_weights(&mut g, &store, x).unwrap();
        for col in 0..6 {
            for row in 0..n {
                assert!((g.value(s).at2(row, col) - 1.0 / n as f64).abs() < 1e-12);
            }
        }
        let t = g.slice_aggregate(s, x, 2).unwrap();
        // token rows equal the per-head mean of x
        for m in 0..3 {
            for c in 0..4 {
                let mean: f64 = (0..n).map(|i| g.value(x).at2(i, c)).sum::<f64>() / n as f64;
                assert!((g.value(t).at2(m, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flare_single_latent_collapses_outputs() {
        let mut rng = rng();
        let mut store = ParamStore::<f64>::new();
        let fl = FlareAttention::new(&mut store, "fl", 4, 2, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut rng));
        let y = fl.forward(&mut g, &store, x).unwrap();
        let yv = g.value(y);
        for i in 1..6 {
            for c in 0..4 {
                assert!(
                    (yv.at2(i, c) - yv.at2(0, c)).abs() < 1e-12,
                    "row {i} differs from row 0"
                );
            }
        }
    }

    #[test]
    fn single_context_token_broadcasts_its_value() {
        let mut rng = rng();
        let mut store = ParamStore::<f64>::new();
        let ca = CrossAttention::new(&mut store, "ca", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng));
        let ctx = g.leaf(Tensor::rand_uniform(&[1, 4], -1.0, 1.0, &mut rng));
        let y = ca.forward(&mut g, &store, x, ctx).unwrap();
        let yv = g.value(y);
        for i in 1..5 {
            for c in 0..4 {
                assert!((yv.at2(i, c) - yv.at2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_saturation_selects_single_branch() {
        let mut rng = rng();
        let mut store = ParamStore::<f64>::new();
        let block = GaleBlock::new(
            &mut store,
            "b",
            SelfAttnKind::Flare,
            true,
            4,
            2,
            2,
            &mut rng,
        )
        .unwrap();
        let xt = Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let ctxt = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);

        let run_mix = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone());
            let ctx = g.leaf(ctxt.clone());
            let y = block.attention_mix(&mut g, store, x, Some(ctx)).unwrap();
            g.value(y).clone()
        };
        let self_only = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone());
            let y = match &block.self_attn {
                SelfAttention::Flare(f) => f.forward(&mut g, store, x).unwrap(),
                _ => unreachable!(),
            };
            g.value(y).clone()
        };
        // alpha -> +inf: sigmoid saturates to 1, mixture equals self branch
        store.get_mut(block.gate.unwrap()).data_mut()[0] = 1e3;
        let mixed = run_mix(&store);
        let selfy = self_only(&store);
        assert!(mixed.max_abs_diff(&selfy) < 1e-12);
        // alpha -> -inf: cross branch alone
        store.get_mut(block.gate.unwrap()).data_mut()[0] = -1e3;
        let mixed = run_mix(&store);
        let crossy = {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone());
            let ctx = g.leaf(ctxt.clone());
            let y = block
                .cross
                .as_ref()
                .unwrap()
                .forward(&mut g, &store, x, ctx)
                .unwrap();
            g.value(y).clone()
        };
        assert!(mixed.max_abs_diff(&crossy) < 1e-12);
    }

    #[test]
    fn fresh_gate_is_exactly_half() {
        let mut rng = rng();
        let mut store = ParamStore::<f64>::new();
        let block =
            GaleBlock::new(&mut store, "b", SelfAttnKind::Physics, true, 4, 2, 2, &mut rng)
                .unwrap();
        assert_eq!(store.get(block.gate.unwrap()).data()[0], 0.0);
    }
}
