//! Attention rollout over a recorded [`AttentionStack`].
//!
//! Runs in f64 outside the tape: nothing here is differentiated.

use crate::error::{Error, Result};
use crate::vit::AttentionStack;

/// Row-stochastic `[N+1, N+1]` rollout after `layer + 1` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    pub matrix: Vec<f64>,
    pub tokens: usize,
    pub layer_index: usize,
}

impl RolloutMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.tokens..(i + 1) * self.tokens]
    }
}

/// Class-token attention toward each of the `N` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAttentionMap {
    pub values: Vec<f64>,
}

/// Mean over heads of one layer, row-major `[N+1, N+1]`.
pub fn average_heads(attn: &AttentionStack, layer: usize) -> Result<Vec<f64>> {
    if layer >= attn.layers() {
        return Err(Error::Index {
            what: "attention layer",
            index: layer,
            len: attn.layers(),
        });
    }
    let t = attn.tokens();
    let mut out = vec![0.0; t * t];
    for h in 0..attn.heads() {
        for (o, &v) in out.iter_mut().zip(attn.matrix(layer, h)) {
            *o += v;
        }
    }
    let inv = 1.0 / attn.heads() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// `rownorm(m + I)`.
pub fn add_identity_rownorm(m: &[f64], tokens: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    for i in 0..tokens {
        let row = &mut out[i * tokens..(i + 1) * tokens];
        row[i] += 1.0;
        let mut s = 0.0;
        for &v in row.iter() {
            s += v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Rollout after every layer: entry `l` is `M̃_{l+1}`.
pub fn rollout_layers(attn: &AttentionStack) -> Result<Vec<RolloutMap>> {
    if attn.layers() == 0 {
        return Err(Error::Contract("rollout needs at least one layer".into()));
    }
    let t = attn.tokens();
    let mut maps: Vec<RolloutMap> = Vec::with_capacity(attn.layers());
    for l in 0..attn.layers() {
        let step = add_identity_rownorm(&average_heads(attn, l)?, t);
        let matrix = match maps.last() {
            None => step,
            Some(prev) => matmul_square(&step, &prev.matrix, t),
        };
        maps.push(RolloutMap {
            matrix,
            tokens: t,
            layer_index: l,
        });
    }
    Ok(maps)
}

/// Rollout through all `L` layers.
pub fn rollout(attn: &AttentionStack) -> Result<RolloutMap> {
    Ok(rollout_layers(attn)?.pop().expect("at least one layer"))
}

/// Row 0 of the rollout without its class-token column.
pub fn class_token_map(r: &RolloutMap) -> PatchAttentionMap {
    PatchAttentionMap {
        values: r.row(0)[1..].to_vec(),
    }
}

/// Arithmetic cost of [`rollout`] in the same units as the tape op counter.
pub fn rollout_cost(layers: usize, heads: usize, tokens: usize) -> u64 {
    let t2 = (tokens * tokens) as u64;
    let averaging = layers as u64 * heads as u64 * t2;
    let normalize = layers as u64 * t2;
    let chain = layers.saturating_sub(1) as u64 * t2 * tokens as u64;
    averaging + normalize + chain
}
