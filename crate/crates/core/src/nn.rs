//! Parameterized building blocks shared by the encoders, the decoder and the heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    t
}

/// Kaiming-uniform bound for ReLU networks.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform_tensor(&[in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS)?
            .mul_row(tape.param(store, self.gamma))?
            .add_row(tape.param(store, self.beta))
    }
}

/// Multi-head scaled dot-product attention with an optional admission mask.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{dim} not divisible into {heads} heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// `admit` is a row-major `queries × keys` mask; `None` admits everything.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        admit: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        if keys.rows() != values.rows() {
            return Err(Error::shape("attention", "keys and values differ in length"));
        }
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, keys)?;
        let v = self.v.forward(tape, store, values)?;
        let dim = self.q.out_dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?)
            };
            let weights = qh.matmul_t(kh)?.scale(scale)?.softmax_rows(admit)?;
            outs.push(weights.matmul(vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(tape, store, x)?.relu()?;
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN x)` then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        SelfAttentionBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, admit: Option<&[bool]>) -> Result<Var<'t>> {
        let h = self.norm_attn.forward(tape, store, x)?;
        let x = x.add(self.attn.forward(tape, store, h, h, h, admit)?)?;
        let h = self.norm_ffn.forward(tape, store, x)?;
        x.add(self.ffn.forward(tape, store, h)?)
    }
}
