//! Building blocks shared by the encoders and decoders.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registration context: a store, an initialiser, a name prefix and whether
/// the parameters are frozen.
pub struct Builder<'a, 'r> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init<'r>,
    pub prefix: String,
    pub frozen: bool,
}

impl<'a, 'r> Builder<'a, 'r> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Init<'r>, prefix: &str, frozen: bool) -> Self {
        Builder { store, init, prefix: prefix.to_string(), frozen }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, 'r> {
        Builder {
            store: &mut *self.store,
            init: &mut *self.init,
            prefix: format!("{}.{}", self.prefix, name),
            frozen: self.frozen,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}.{}", self.prefix, name), value, self.frozen)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut b = b.sub(name);
        let w = b.init.xavier(fan_in, fan_out);
        let weight = b.add("weight", w);
        let bias = Some(b.add("bias", Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn normal(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Self {
        let mut b = b.sub(name);
        let w = b.init.normal(fan_in, fan_out, std);
        let weight = b.add("weight", w);
        let bias = Some(b.add("bias", Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        let gain = b.add("gain", Tensor::full(1, dim, 1.0));
        let bias = b.add("bias", Tensor::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let mut b = b.sub(name);
        Attention {
            q: Linear::new(&mut b, "q", dim, dim),
            k: Linear::new(&mut b, "k", dim, dim),
            v: Linear::new(&mut b, "v", dim, dim),
            out: Linear::new(&mut b, "out", dim, dim),
            heads,
        }
    }

    /// `key_bias`, when given, is added to every row of the attention logits
    /// (a `1 × keys` row; large negative entries exclude keys).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, key_bias: Option<Var>) -> Var {
        let dim = g.value(queries).cols();
        let dh = dim / self.heads;
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, keys);
        let v = self.v.forward(g, store, keys);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let mut logits = g.scale(logits, scale);
            if let Some(bias) = key_bias {
                logits = g.add_row(logits, bias);
            }
            let weights = g.softmax_rows(logits);
            heads.push(g.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Self {
        let mut b = b.sub(name);
        FeedForward { fc1: Linear::new(&mut b, "fc1", dim, hidden), fc2: Linear::new(&mut b, "fc2", hidden, dim) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder block: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut b = b.sub(name);
        TransformerBlock {
            ln1: LayerNorm::new(&mut b, "ln1", dim),
            attn: Attention::new(&mut b, "attn", dim, heads),
            ln2: LayerNorm::new(&mut b, "ln2", dim),
            ffn: FeedForward::new(&mut b, "ffn", dim, 4 * dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, key_bias: Option<Var>) -> Var {
        let h = self.ln1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, key_bias);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        g.add(x, f)
    }
}

/// Stride-1 `k × k` convolution over a grid, zero padded to keep its size.
/// Weight layout is `(c_in·k·k) × c_out`, matching [`Graph::im2col`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let mut b = b.sub(name);
        let fan_in = c_in * kernel * kernel;
        let w = b.init.xavier(fan_in, c_out);
        let weight = b.add("weight", w);
        let bias = b.add("bias", Tensor::zeros(1, c_out));
        Conv2d { weight, bias, kernel }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let cols = if self.kernel == 1 { x } else { g.im2col(x, h, w, self.kernel) };
        let weight = g.param(store, self.weight);
        let y = g.matmul(cols, weight);
        let bias = g.param(store, self.bias);
        g.add_row(y, bias)
    }
}

/// Zeroes a parameter in place (tests and stubbed configurations).
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    let (r, c) = store.get(id).shape();
    store.set(id, Tensor::zeros(r, c));
}
