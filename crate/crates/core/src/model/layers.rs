use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Parameter lookup for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng),
            b: store.add_uniform(format!("{name}.b"), &[d_out], d_in, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(cx.p(self.w))?.add(cx.p(self.b))
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(cx, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm().mul(cx.p(self.gain))?.add(cx.p(self.bias))
    }
}

/// Multi-head scaled dot-product attention over batched token sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            n_heads,
        }
    }

    fn split<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, l, d) = (s[0], s[1], s[2]);
        let h = self.n_heads;
        x.reshape(&[b, l, h, d / h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, l, d / h])
    }

    /// `query [B, Lq, d]`, `kv [B, Lk, d]`; `key_valid` (length `B·Lk`)
    /// hides keys from attention where false.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        query: Var<'t>,
        kv: Var<'t>,
        key_valid: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let qs = query.shape();
        let (b, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = kv.shape()[1];
        let h = self.n_heads;
        let dh = d / h;
        let q = self.split(self.q.forward(cx, query)?)?;
        let k = self.split(self.k.forward(cx, kv)?)?;
        let v = self.split(self.v.forward(cx, kv)?)?;
        let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(valid) = key_valid {
            if valid.iter().any(|v| !v) {
                let bias = Tensor::from_fn(&[b * h, lq, lk], |i| {
                    let key = i % lk;
                    let batch = i / (h * lq * lk);
                    if valid[batch * lk + key] {
                        0.0
                    } else {
                        -1e9
                    }
                });
                scores = scores.add(cx.constant(bias))?;
            }
        }
        let attn = scores.softmax();
        let out = attn
            .matmul(v)?
            .reshape(&[b, h, lq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, lq, d])?;
        self.o.forward(cx, out)
    }
}

/// Post-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, n_heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d, 2 * d, d], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, valid: Option<&[bool]>) -> Result<Var<'t>> {
        let a = self.attn.forward(cx, x, x, valid)?;
        let x = self.ln1.forward(cx, x.add(a)?)?;
        let f = self.ff.forward(cx, x)?;
        self.ln2.forward(cx, x.add(f)?)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, k) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
