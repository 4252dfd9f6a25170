//! Slot-to-intent information transfer: label-specific representations
//! via label attention, a bilinear co-attention between the slot and
//! intent views, and the attention summary vector g that feeds the intent
//! classifier. Also the plain attention form of g used when the transfer
//! mechanism is ablated.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{Tape, ValueId};

#[derive(Debug, Clone)]
pub struct LabelAttentionParams {
    /// Intent label queries, `[n_intents, d_a]`.
    pub z_i: ParamId,
    /// Slot label queries, `[n_slot_labels, d_a]`.
    pub z_s: ParamId,
    /// Token projections for the two attention views, `[d_a, d_u]`.
    pub q_i: ParamId,
    pub q_s: ParamId,
    /// Bilinear co-attention weight, `[d_u, d_u]`.
    pub w_c: ParamId,
    /// Fusion weights, `[d_c, d_u]`.
    pub w_i: ParamId,
    pub w_s: ParamId,
    /// Scoring vector over the fused representation, `[d_c]`.
    pub w_a: ParamId,
    /// Token-attention weight for the ablated summary, `[d_u]`.
    pub w_g: ParamId,
}

impl LabelAttentionParams {
    pub fn create(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        d_u: usize,
        n_intents: usize,
        n_slot_labels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LabelAttentionParams {
            z_i: store.add("s2i.z_i", vec![n_intents, cfg.d_a], Init::Glorot, rng),
            z_s: store.add("s2i.z_s", vec![n_slot_labels, cfg.d_a], Init::Glorot, rng),
            q_i: store.add("s2i.q_i", vec![cfg.d_a, d_u], Init::Glorot, rng),
            q_s: store.add("s2i.q_s", vec![cfg.d_a, d_u], Init::Glorot, rng),
            w_c: store.add("s2i.w_c", vec![d_u, d_u], Init::Glorot, rng),
            w_i: store.add("s2i.w_i", vec![cfg.d_c, d_u], Init::Glorot, rng),
            w_s: store.add("s2i.w_s", vec![cfg.d_c, d_u], Init::Glorot, rng),
            w_a: store.add("s2i.w_a", vec![cfg.d_c], Init::Glorot, rng),
            w_g: store.add("s2i.w_g", vec![d_u], Init::Glorot, rng),
        }
    }
}

/// Label-specific token summaries. Attention rows (one per label) softmax
/// over token columns, with `mask[i] == false` excluding pad column i.
/// Returns `(V_I [d_u, n_intents], V_S [d_u, n_slot_labels])`.
pub fn label_specific_reps(
    tape: &mut Tape,
    u: ValueId,
    z_i: ValueId,
    q_i: ValueId,
    z_s: ValueId,
    q_s: ValueId,
    mask: &[bool],
) -> Result<(ValueId, ValueId)> {
    let n = tape.value(u).shape()[1];
    if mask.len() != n {
        return Err(Error::shape(
            "label_specific_reps",
            format!("mask len {} vs {n} token columns", mask.len()),
        ));
    }
    let view = |tape: &mut Tape, z: ValueId, q: ValueId| -> Result<ValueId> {
        let qu = tape.matmul(q, u)?;
        let qu = tape.tanh(qu);
        let logits = tape.matmul(z, qu)?;
        let attn = tape.row_softmax(logits, Some(mask))?;
        let attn_t = tape.transpose(attn)?;
        tape.matmul(u, attn_t)
    };
    let v_i = view(tape, z_i, q_i)?;
    let v_s = view(tape, z_s, q_s)?;
    Ok((v_i, v_s))
}

/// Bilinear co-attention between the slot and intent views:
/// `C = tanh(V_S^T W_C V_I)`, shape `[n_slot_labels, n_intents]`.
pub fn coattention_matrix(
    tape: &mut Tape,
    v_i: ValueId,
    v_s: ValueId,
    w_c: ValueId,
) -> Result<ValueId> {
    let vst = tape.transpose(v_s)?;
    let left = tape.matmul(vst, w_c)?;
    let raw = tape.matmul(left, v_i)?;
    Ok(tape.tanh(raw))
}

/// Attention over intent labels from the fused slot and intent views:
/// `H = tanh(W_I V_I + (W_S V_S) C)`, `a = softmax(w_a H)`.
pub fn intent_attention_weights(
    tape: &mut Tape,
    v_i: ValueId,
    v_s: ValueId,
    c: ValueId,
    w_i: ValueId,
    w_s: ValueId,
    w_a: ValueId,
) -> Result<ValueId> {
    let left = tape.matmul(w_i, v_i)?;
    let slot = tape.matmul(w_s, v_s)?;
    let right = tape.matmul(slot, c)?;
    let h = tape.add(left, right)?;
    let h = tape.tanh(h);
    let logits = tape.matmul(w_a, h)?;
    tape.row_softmax(logits, None)
}

/// Summary vector `g = sum_j a_j V_I[:, j]`. `a` must be a probability
/// vector over the intent labels.
pub fn intent_summary(tape: &mut Tape, v_i: ValueId, a: ValueId) -> Result<ValueId> {
    let av = tape.value(a);
    if av.rank() != 1 {
        return Err(Error::shape(
            "intent_summary",
            format!("weights must be a vector, got {:?}", av.shape()),
        ));
    }
    if !av.all_finite() {
        return Err(Error::Numerical(
            "intent_summary: weights are not finite".to_string(),
        ));
    }
    let sum: f64 = av.data().iter().sum();
    if av.data().iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "intent_summary: weights are not a probability vector (sum {sum})"
        )));
    }
    tape.matmul(v_i, a)
}

/// Plain token attention summary used when slot-to-intent transfer is
/// ablated: `beta = softmax(w_g U)` over real tokens, `g = U beta`.
pub fn baseline_summary(
    tape: &mut Tape,
    u: ValueId,
    w_g: ValueId,
    mask: &[bool],
) -> Result<ValueId> {
    let n = tape.value(u).shape()[1];
    if mask.len() != n {
        return Err(Error::shape(
            "baseline_summary",
            format!("mask len {} vs {n} token columns", mask.len()),
        ));
    }
    let logits = tape.matmul(w_g, u)?;
    let beta = tape.row_softmax(logits, Some(mask))?;
    tape.matmul(u, beta)
}

/// Outputs of the full transfer path, kept for inspection and tests.
pub struct Slot2IntentOut {
    pub g: ValueId,
    pub a: ValueId,
    pub v_i: ValueId,
    pub v_s: ValueId,
}

/// Run the full slot-to-intent path over U.
pub fn slot_to_intent_summary(
    tape: &mut Tape,
    store: &ParameterStore,
    p: &LabelAttentionParams,
    u: ValueId,
    mask: &[bool],
) -> Result<Slot2IntentOut> {
    let z_i = tape.param(store, p.z_i);
    let q_i = tape.param(store, p.q_i);
    let z_s = tape.param(store, p.z_s);
    let q_s = tape.param(store, p.q_s);
    let w_c = tape.param(store, p.w_c);
    let w_i = tape.param(store, p.w_i);
    let w_s = tape.param(store, p.w_s);
    let w_a = tape.param(store, p.w_a);
    let (v_i, v_s) = label_specific_reps(tape, u, z_i, q_i, z_s, q_s, mask)?;
    let c = coattention_matrix(tape, v_i, v_s, w_c)?;
    let a = intent_attention_weights(tape, v_i, v_s, c, w_i, w_s, w_a)?;
    let g = intent_summary(tape, v_i, a)?;
    Ok(Slot2IntentOut { g, a, v_i, v_s })
}
