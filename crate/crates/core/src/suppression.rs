//! Peak suppression: mask the patch the class token attends to most and
//! run the differentiable forward without it.

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::rollout::{class_token_map, rollout, rollout_cost, PatchAttentionMap};
use crate::tensor::{Real, Tensor};
use crate::vit::{AttentionStack, Encoder, EncoderOutput, KeyMask};

/// Binary vector over the `N + 1` tokens; `false` marks a suppressed patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuppressionMask {
    bits: Vec<bool>,
}

impl SuppressionMask {
    /// No suppression, as used at inference time.
    pub fn none(tokens: usize) -> Self {
        Self {
            bits: vec![true; tokens],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Token indices (1-based over patches) that are suppressed.
    pub fn suppressed(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn key_mask(&self) -> KeyMask {
        KeyMask::from_bits(self.bits.clone()).expect("class token bit is always set")
    }
}

/// Zeroes the token of the largest patch response; ties go to the lowest
/// patch index.
pub fn build_mask(map: &PatchAttentionMap) -> Result<SuppressionMask> {
    build_mask_top_k(map, 1)
}

/// Zeroes the `k` largest patch responses. `k = 1` is the standard setting.
pub fn build_mask_top_k(map: &PatchAttentionMap, k: usize) -> Result<SuppressionMask> {
    let n = map.values.len();
    if n == 0 {
        return Err(Error::Contract("empty patch attention map".into()));
    }
    if k > n {
        return Err(Error::config(
            "top_k",
            format!("cannot suppress {k} of {n} patches"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));
    let mut bits = vec![true; n + 1];
    for &i in &order[..k] {
        bits[i + 1] = false;
    }
    Ok(SuppressionMask { bits })
}

/// Result of the two-pass suppressed forward.
pub struct SuppressedForward<'p, T: Real> {
    /// Differentiable tape of the masked pass.
    pub tape: Tape<'p, T>,
    pub output: EncoderOutput,
    pub mask: SuppressionMask,
    pub patch_map: PatchAttentionMap,
    /// Forward ops spent by the gradient-free locating pass.
    pub probe_ops: u64,
    /// Arithmetic spent on rollout, reported apart from forward ops.
    pub rollout_ops: u64,
}

/// Pass 1: unmasked gradient-free forward, rollout, mask. Pass 2: masked
/// forward on a differentiable tape.
pub fn suppressed_step<'p, T: Real>(
    encoder: &Encoder,
    store: &'p ParamStore<T>,
    image: &Tensor<T>,
    top_k: usize,
) -> Result<SuppressedForward<'p, T>> {
    let cfg = encoder.config();
    let full = KeyMask::all(cfg.tokens());

    let mut probe = Tape::inference(store);
    let out = encoder.encode(&mut probe, image, &full)?;
    let attention = AttentionStack::from_tape(&probe, &out)?;
    let patch_map = class_token_map(&rollout(&attention)?);
    let mask = build_mask_top_k(&patch_map, top_k)?;
    let probe_ops = probe.op_count();
    drop(probe);

    let mut tape = Tape::new(store);
    let output = encoder.encode(&mut tape, image, &mask.key_mask())?;
    Ok(SuppressedForward {
        tape,
        output,
        mask,
        patch_map,
        probe_ops,
        rollout_ops: rollout_cost(cfg.layers, cfg.heads, cfg.tokens()),
    })
}
