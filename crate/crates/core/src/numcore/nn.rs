//! Parameter storage and the basic learned layers (linear, MLP, layer norm).

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::graph::{Graph, NodeId, ParamId};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Named registry of trainable tensors. Ids are registration order, which
/// fixes the optimizer's iteration order and makes runs reproducible.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Inject a parameter into a graph as a trainable leaf.
    pub fn inject(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.param(id, self.values[id.0].clone())
    }

    /// Elementwise cast of every parameter into a new store (same names/ids).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast::<U>()).collect(),
        }
    }
}

/// Uniform Xavier-style init: `U(-sqrt(6/(fan_in+fan_out)), +...)`.
pub fn xavier_uniform<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::rand_uniform(&[rows, cols], T::from_real(-limit), T::from_real(limit), rng)
}

/// Affine layer `y = x W + b` with `W: [in x out]`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.register(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = store.inject(g, self.w);
        let b = store.inject(g, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Fully-connected stack: affine + GELU for every hidden layer, affine output.
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` chains input through hidden sizes to the output width,
    /// e.g. `[in, hidden, out]` builds two affine layers with one GELU.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least input and output widths");
        let layers = (0..widths.len() - 1)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    /// Scalar parameter count of this stack.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.layers
            .iter()
            .map(|l| store.get(l.w).numel() + store.get(l.b).numel())
            .sum()
    }
}

/// Learnable gain/bias pair for layer normalization.
#[derive(Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), Tensor::full(&[width], T::one()));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[width]));
        LayerNormParams { gain, bias }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = store.inject(g, self.gain);
        let bias = store.inject(g, self.bias);
        g.layer_norm(x, gain, bias)
    }
}
