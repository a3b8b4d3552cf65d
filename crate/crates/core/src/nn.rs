//! Parameterized layers assembled from tape primitives. Layers hold only
//! [`ParamId`]s, so one layout serves any scalar type's [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnMask, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), &[d])?,
            bias: store.add_zeros(format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
        })
    }

    /// Returns `(output, attention node)`; the second exposes the weights.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys: Var,
        mask: &AttnMask,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys)?;
        let v = self.value.forward(tape, store, keys)?;
        let att = tape.attention(q, k, v, self.heads, mask)?;
        Ok((self.out.forward(tape, store, att)?, att))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, rng)?,
        })
    }

    /// Returns the block output and its attention node.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        mask: &AttnMask,
    ) -> Result<(Var, Var)> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let (a, att) = self.attn.forward(tape, store, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        Ok((tape.add(x, f)?, att))
    }
}

/// Pre-norm decoder block with causal self-attention and cross-attention
/// over a memory sequence.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        memory: Var,
        memory_mask: &AttnMask,
    ) -> Result<Var> {
        let h = self.ln_self.forward(tape, store, x)?;
        let (a, _) = self.self_attn.forward(tape, store, h, h, &AttnMask::causal())?;
        let x = tape.add(x, a)?;
        let h = self.ln_cross.forward(tape, store, x)?;
        let (c, _) = self.cross_attn.forward(tape, store, h, memory, memory_mask)?;
        let x = tape.add(x, c)?;
        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}
