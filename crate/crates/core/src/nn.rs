//! Shared network building blocks: parameter storage, AdamW, linear
//! layers, multi-head attention and the sinusoidal embeddings used by the
//! denoisers, the blender and the metric embedders.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered parameter storage. Order is creation order, which keeps
/// optimizer state and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Kaiming-ish init: normal with std `sqrt(1 / fan_in)`.
    pub fn add_init(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (1.0 / rows as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| {
            rng.sample::<f64, _>(StandardNormal) * std
        });
        self.add(name, v)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), 1.0))
    }
}

/// Per-forward-pass binding of every parameter to a tape leaf.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn bind(params: &ParamSet, tape: &mut Tape) -> Bound {
        Bound {
            vars: params.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Accumulate parameter gradients from a finished backward pass.
    pub fn accumulate(&self, grads: &Grads, into: &mut [Array2<f64>]) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                into[i] += g;
            }
        }
    }
}

pub fn zero_grads(params: &ParamSet) -> Vec<Array2<f64>> {
    params.values.iter().map(|v| Array2::zeros(v.dim())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Self {
        AdamW {
            cfg,
            m: zero_grads(params),
            v: zero_grads(params),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..params.values.len() {
            let g = &grads[i];
            self.m[i] = &self.m[i] * self.cfg.beta1 + g * (1.0 - self.cfg.beta1);
            self.v[i] = &self.v[i] * self.cfg.beta2 + &g.mapv(|x| x * x) * (1.0 - self.cfg.beta2);
            let p = &mut params.values[i];
            for ((pv, mv), vv) in p.iter_mut().zip(self.m[i].iter()).zip(self.v[i].iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * *pv);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            w: params.add_init(&format!("{name}.w"), inp, out, rng),
            b: params.add_zeros(&format!("{name}.b"), 1, out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w));
        tape.add_row(h, bound.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: params.add_ones(&format!("{name}.gain"), 1, dim),
            bias: params.add_zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), 1e-5)
    }
}

/// Multi-head attention projections. Self- vs. cross-attention is decided
/// by what the caller feeds as the key/value stream.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> MultiHeadAttention {
        assert_eq!(dim % heads, 0, "latent dim must be divisible by heads");
        MultiHeadAttention {
            heads,
            dim,
            wq: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
        }
    }

    /// `softmax(Q Kᵀ / sqrt(d_head)) V` per head. When `attn_probe` is
    /// given, each head's row-stochastic attention matrix is pushed onto it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query_stream: Var,
        kv_stream: Var,
        attn_probe: Option<&mut Vec<Array2<f64>>>,
    ) -> Var {
        let q = self.wq.forward(tape, bound, query_stream);
        let k = self.wk.forward(tape, bound, kv_stream);
        let v = self.wv.forward(tape, bound, kv_stream);
        let d_head = self.dim / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut probes = Vec::new();
        for h in 0..self.heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            probes.push(tape.value(attn).clone());
            head_outs.push(tape.matmul(attn, vh));
        }
        if let Some(probe) = attn_probe {
            probe.extend(probes);
        }
        let cat = tape.concat_cols(&head_outs);
        self.wo.forward(tape, bound, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::new(params, &format!("{name}.ff1"), dim, hidden, rng),
            lin2: Linear::new(params, &format!("{name}.ff2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.lin1.forward(tape, bound, x);
        let h = tape.gelu(h);
        self.lin2.forward(tape, bound, h)
    }
}

/// Sinusoidal position table for `len` tokens of width `dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sinusoidal timestep embedding, one row of width `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, dim), |(_, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
