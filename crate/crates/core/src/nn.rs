//! Layers shared by the three networks. Each layer registers its parameters in
//! a [`ParamStore`] under a dotted name prefix and builds its forward pass on a
//! [`Graph`].

use crate::error::{ensure, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-bound, bound));
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Same layer with all weights set to zero, used for output heads.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng)?;
        Ok(Self { fc1, fc2, act })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = self.act.apply(g, h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from `[G, Nq, q_dim]`
/// and keys/values from `[G, Nk, kv_dim]`; every group attends independently.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        ensure!(heads >= 1 && inner % heads == 0, "attention width {inner} not divisible by {heads} heads");
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), q_dim, inner, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, inner, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, inner, rng)?,
            o: Linear::new(store, &format!("{name}.o"), inner, q_dim, rng)?,
            heads,
            inner,
        })
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var) -> Result<Var> {
        let (sq, sk) = (g.shape(xq).to_vec(), g.shape(xkv).to_vec());
        ensure!(sq.len() == 3 && sk.len() == 3 && sq[0] == sk[0], "attention inputs {sq:?} and {sk:?} must be [G, N, D] with equal G");
        let (groups, nq, nk) = (sq[0], sq[1], sk[1]);
        let (h, dh) = (self.heads, self.inner / self.heads);
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let q = split_heads(g, q, groups, nq, h, dh)?;
        let k = split_heads(g, k, groups, nk, h, dh)?;
        let v = split_heads(g, v, groups, nk, h, dh)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let p = g.softmax(scores);
        let out = g.bmm(p, v, false, false)?;
        let out = g.reshape(out, &[groups, h, nq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[groups, nq, self.inner])?;
        self.o.forward(g, out)
    }
}

fn split_heads(g: &mut Graph, x: Var, groups: usize, n: usize, h: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[groups, n, h, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[groups * h, n, dh])
}

/// Pre-norm transformer layer: self-attention then MLP, each residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, hidden, dim), Activation::Silu, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Sinusoidal encoding of a scalar position, `[sin(t·f_i) | cos(t·f_i)]`.
pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Sinusoidal timestep features followed by a small MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub mlp: Mlp,
    pub freq_dim: usize,
    pub max_t: usize,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, freq_dim: usize, out: usize, max_t: usize, rng: &mut Rng) -> Result<Self> {
        let mlp = Mlp::new(store, &format!("{name}.mlp"), (freq_dim, out, out), Activation::Silu, rng)?;
        Ok(Self { mlp, freq_dim, max_t })
    }

    /// One embedding row per entry of `ts`, shape `[len, out]`.
    pub fn forward(&self, g: &mut Graph, ts: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(ts.len() * self.freq_dim);
        for &t in ts {
            ensure!(t <= self.max_t, "timestep {t} outside embedding table 0..={}", self.max_t);
            data.extend(sinusoid(t as f64, self.freq_dim));
        }
        let feats = g.constant(Tensor::new(&[ts.len(), self.freq_dim], data)?);
        self.mlp.forward(g, feats)
    }
}

/// Repeats a `[rows, d]` parameter block across a new leading batch axis.
pub fn tile_batch(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut s = vec![1];
    s.extend(&shape);
    let x = g.reshape(x, &s)?;
    g.broadcast(x, 0, batch)
}
