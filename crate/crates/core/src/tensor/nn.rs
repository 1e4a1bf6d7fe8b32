use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// `x·W + b` with `W` shaped `in×out` and `b` shaped `1×out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Projection weights for one attention block; each `w*` is `d×d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Full (non-causal) scaled dot-product attention over the rows of `x`.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Parameter(format!(
            "width {d} is not divisible into {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let joined = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, joined, p.wo, p.bo)
}

/// Source of the Gumbel perturbation.
pub enum GumbelNoise<'a> {
    /// Fresh `-ln(-ln u)` draws from the stream.
    Sample(&'a mut RngState),
    /// Caller-supplied noise of the same shape as the logits.
    Fixed(&'a Tensor),
    /// No perturbation: a tempered softmax.
    Off,
}

/// Gumbel-Softmax over rows. With `hard`, the forward value is one-hot at
/// the perturbed argmax and gradients flow through the soft sample.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    noise: GumbelNoise<'_>,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    let shape = tape.value(logits).shape().to_vec();
    let perturbed = match noise {
        GumbelNoise::Sample(rng) => {
            let n: usize = shape.iter().product();
            let g = Tensor::new(shape, (0..n).map(|_| rng.gumbel()).collect())?;
            tape.add_const(logits, &g)?
        }
        GumbelNoise::Fixed(g) => tape.add_const(logits, g)?,
        GumbelNoise::Off => logits,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let soft = tape.softmax_rows(scaled)?;
    Ok(if hard {
        tape.straight_through(soft)
    } else {
        soft
    })
}
