//! Utterance encoder: contextual token vectors from a BiLSTM and a
//! self-attention layer, fused with projected profile information through
//! multiplicative attention, yielding the encoding matrix U (one column
//! per token).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ModelConfig, ProfileField, ProfileKind};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Supporting profile information for one utterance: `m` user-profile
/// vectors followed by `t` context-awareness vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfileSet {
    pub up: Vec<Vec<f64>>,
    pub ca: Vec<Vec<f64>>,
}

impl ProfileSet {
    /// Check vector counts, per-field dimensions and distribution sums
    /// against the manifest.
    pub fn validate(&self, manifest: &[ProfileField]) -> Result<()> {
        let m = manifest.iter().filter(|f| f.kind == ProfileKind::Up).count();
        let t = manifest.len() - m;
        if self.up.len() != m || self.ca.len() != t {
            return Err(Error::invalid(format!(
                "profile has {} up + {} ca vectors, manifest expects {m} + {t}",
                self.up.len(),
                self.ca.len()
            )));
        }
        let vecs = self.up.iter().chain(self.ca.iter());
        for (field, v) in manifest.iter().zip(vecs) {
            if v.len() != field.dim {
                return Err(Error::invalid(format!(
                    "profile field {}: dim {} does not match manifest dim {}",
                    field.name,
                    v.len(),
                    field.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "profile field {}: non-finite value",
                    field.name
                )));
            }
            if field.distribution {
                let sum: f64 = v.iter().sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::invalid(format!(
                        "profile field {}: distribution sums to {sum}, expected 1",
                        field.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which profile columns survive in P.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileRestriction {
    Full,
    UpOnly,
    CaOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// Input weights for the stacked i/f/g/o gates, `[4H, input_dim]`.
    pub w_ih: ParamId,
    /// Recurrent weights, `[4H, H]`.
    pub w_hh: ParamId,
    /// Gate bias, `[4H]`.
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub word_table: ParamId,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub sa: SaParams,
    /// One projection matrix per manifest field, UP block then CA block.
    pub up_proj: Vec<ParamId>,
    pub ca_proj: Vec<ParamId>,
    /// Fusion weight `[d_e, d_p]`.
    pub w_p: ParamId,
}

impl EncoderParams {
    pub fn create(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = cfg.lstm_hidden;
        let lstm = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, dir: &str| LstmParams {
            w_ih: store.add(&format!("enc.lstm.{dir}.w_ih"), vec![4 * h, cfg.word_dim], Init::Glorot, rng),
            w_hh: store.add(&format!("enc.lstm.{dir}.w_hh"), vec![4 * h, h], Init::Glorot, rng),
            b: store.add(&format!("enc.lstm.{dir}.b"), vec![4 * h], Init::Zero, rng),
        };
        let word_table = store.add("enc.embed", vec![vocab_size, cfg.word_dim], Init::Embedding, rng);
        let lstm_fwd = lstm(store, rng, "fwd");
        let lstm_bwd = lstm(store, rng, "bwd");
        let sa = SaParams {
            w_q: store.add("enc.sa.w_q", vec![cfg.word_dim, cfg.sa_key_dim], Init::Glorot, rng),
            w_k: store.add("enc.sa.w_k", vec![cfg.word_dim, cfg.sa_key_dim], Init::Glorot, rng),
            w_v: store.add("enc.sa.w_v", vec![cfg.word_dim, cfg.sa_dim], Init::Glorot, rng),
        };
        let mut up_proj = Vec::new();
        let mut ca_proj = Vec::new();
        for field in &cfg.profile {
            let name = match field.kind {
                ProfileKind::Up => format!("enc.profile.up.{}", field.name),
                ProfileKind::Ca => format!("enc.profile.ca.{}", field.name),
            };
            let id = store.add(&name, vec![cfg.d_p, field.dim], Init::Glorot, rng);
            match field.kind {
                ProfileKind::Up => up_proj.push(id),
                ProfileKind::Ca => ca_proj.push(id),
            }
        }
        let w_p = store.add("enc.fusion.w_p", vec![cfg.d_e(), cfg.d_p], Init::Glorot, rng);
        EncoderParams {
            word_table,
            lstm_fwd,
            lstm_bwd,
            sa,
            up_proj,
            ca_proj,
            w_p,
        }
    }
}

/// Embedding rows for `ids`, with embedding dropout in train mode.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParameterStore,
    table: ParamId,
    ids: &[usize],
    dropout: f64,
) -> Result<ValueId> {
    let t = tape.param(store, table);
    let e = tape.embed_lookup(t, ids)?;
    Ok(tape.dropout(e, dropout))
}

struct LstmBind {
    w_ih: ValueId,
    w_hh: ValueId,
    b: ValueId,
}

fn bind_lstm(tape: &mut Tape, store: &ParameterStore, p: &LstmParams) -> LstmBind {
    LstmBind {
        w_ih: tape.param(store, p.w_ih),
        w_hh: tape.param(store, p.w_hh),
        b: tape.param(store, p.b),
    }
}

/// One LSTM step: returns the new (h, c).
fn lstm_step(
    tape: &mut Tape,
    bind: &LstmBind,
    hidden: usize,
    x: ValueId,
    h_prev: ValueId,
    c_prev: ValueId,
) -> Result<(ValueId, ValueId)> {
    let zx = tape.matmul(bind.w_ih, x)?;
    let zh = tape.matmul(bind.w_hh, h_prev)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, bind.b)?;
    let i_gate = tape.slice_vec(z, 0, hidden)?;
    let f_gate = tape.slice_vec(z, hidden, hidden)?;
    let g_cand = tape.slice_vec(z, 2 * hidden, hidden)?;
    let o_gate = tape.slice_vec(z, 3 * hidden, hidden)?;
    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.sigmoid(f_gate);
    let g_cand = tape.tanh(g_cand);
    let o_gate = tape.sigmoid(o_gate);
    let fc = tape.mul(f_gate, c_prev)?;
    let ig = tape.mul(i_gate, g_cand)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o_gate, tc)?;
    Ok((h, c))
}

/// Bidirectional LSTM over the first `n_real` rows of `e`; rows beyond
/// `n_real` (padding) come out as zeros. Output is `[n, 2H]`.
pub fn bilstm_encode(
    tape: &mut Tape,
    store: &ParameterStore,
    fwd: &LstmParams,
    bwd: &LstmParams,
    e: ValueId,
    n_real: usize,
    hidden: usize,
) -> Result<ValueId> {
    let n = tape.value(e).shape()[0];
    if n_real == 0 || n_real > n {
        return Err(Error::invalid(format!(
            "bilstm_encode: real length {n_real} invalid for {n} rows"
        )));
    }
    let fwd_bind = bind_lstm(tape, store, fwd);
    let bwd_bind = bind_lstm(tape, store, bwd);
    let xs: Vec<ValueId> = (0..n_real).map(|i| tape.row(e, i)).collect::<Result<_>>()?;

    let run = |tape: &mut Tape, bind: &LstmBind, order: Vec<usize>| -> Result<Vec<ValueId>> {
        let mut h = tape.constant(Tensor::zeros(vec![hidden]));
        let mut c = tape.constant(Tensor::zeros(vec![hidden]));
        let mut out = vec![None; n_real];
        for i in order {
            let (nh, nc) = lstm_step(tape, bind, hidden, xs[i], h, c)?;
            h = nh;
            c = nc;
            out[i] = Some(h);
        }
        Ok(out.into_iter().map(|s| s.expect("every position visited")).collect())
    };
    let hf = run(tape, &fwd_bind, (0..n_real).collect())?;
    let hb = run(tape, &bwd_bind, (0..n_real).rev().collect())?;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n_real {
        rows.push(tape.concat_last(&[hf[i], hb[i]])?);
    }
    for _ in n_real..n {
        rows.push(tape.constant(Tensor::zeros(vec![2 * hidden])));
    }
    tape.stack_rows(&rows)
}

/// Single-head scaled dot-product self-attention over token rows of `e`.
/// `mask[j] == false` removes token j from every attention distribution;
/// masked rows of the output are zeroed.
pub fn self_attention_encode(
    tape: &mut Tape,
    store: &ParameterStore,
    sa: &SaParams,
    e: ValueId,
    mask: &[bool],
) -> Result<ValueId> {
    let n = tape.value(e).shape()[0];
    if mask.len() != n {
        return Err(Error::shape(
            "self_attention",
            format!("mask len {} vs {n} rows", mask.len()),
        ));
    }
    let w_q = tape.param(store, sa.w_q);
    let w_k = tape.param(store, sa.w_k);
    let w_v = tape.param(store, sa.w_v);
    let key_dim = tape.value(w_q).shape()[1];
    let q = tape.matmul(e, w_q)?;
    let k = tape.matmul(e, w_k)?;
    let v = tape.matmul(e, w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (key_dim as f64).sqrt())?;
    let attn = tape.row_softmax(scores, Some(mask))?;
    let out = tape.matmul(attn, v)?;
    if mask.iter().all(|&m| m) {
        return Ok(out);
    }
    // Zero the padded rows so they cannot leak junk downstream.
    let sa_dim = tape.value(out).shape()[1];
    let mut keep = vec![0.0; n * sa_dim];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            keep[i * sa_dim..(i + 1) * sa_dim].fill(1.0);
        }
    }
    let keep = tape.constant(Tensor::new(vec![n, sa_dim], keep)?);
    tape.mul(out, keep)
}

/// Per-token concatenation of the BiLSTM and self-attention vectors:
/// row i is `b_i ++ s_i` (width `d_e`).
pub fn concat_context(tape: &mut Tape, b: ValueId, s: ValueId) -> Result<ValueId> {
    let (rb, rs) = (tape.value(b).shape()[0], tape.value(s).shape()[0]);
    if rb != rs {
        return Err(Error::shape(
            "concat_context",
            format!("{rb} BiLSTM rows vs {rs} self-attention rows"),
        ));
    }
    tape.concat_last(&[b, s])
}

/// Project the supporting vectors through their per-field matrices to form
/// `P` (`[d_p, columns]`), in manifest order. `proj` pairs each surviving
/// field with its projection matrix; `vectors` supplies the matching inputs.
pub fn project_profiles(
    tape: &mut Tape,
    proj: &[(ValueId, ProfileField)],
    vectors: &[&[f64]],
) -> Result<ValueId> {
    if proj.is_empty() {
        return Err(Error::invalid("project_profiles: no profile columns"));
    }
    if proj.len() != vectors.len() {
        return Err(Error::invalid(format!(
            "project_profiles: {} matrices vs {} vectors",
            proj.len(),
            vectors.len()
        )));
    }
    let mut cols = Vec::with_capacity(proj.len());
    for ((w, field), vec) in proj.iter().zip(vectors) {
        let in_dim = tape.value(*w).shape()[1];
        if vec.len() != in_dim {
            return Err(Error::invalid(format!(
                "project_profiles: field {} expects dim {in_dim}, got {}",
                field.name,
                vec.len()
            )));
        }
        let x = tape.constant_vec(vec.to_vec());
        cols.push(tape.matmul(*w, x)?);
    }
    tape.stack_cols(&cols)
}

/// Multiplicative attention from each token vector over the profile
/// columns: weights `softmax_j(e_i W_P P_col_j)`, output row i is the
/// weighted sum of P's columns.
pub fn profile_fusion(
    tape: &mut Tape,
    e_ctx: ValueId,
    p: ValueId,
    w_p: ValueId,
) -> Result<ValueId> {
    let proj = tape.matmul(e_ctx, w_p)?; // [n, d_p]
    let logits = tape.matmul(proj, p)?; // [n, m+t]
    let alpha = tape.row_softmax(logits, None)?;
    let pt = tape.transpose(p)?; // [m+t, d_p]
    tape.matmul(alpha, pt) // [n, d_p]
}

/// Attention weights over profile columns per token (exposed for tests
/// and inspection; `profile_fusion` is the training path).
pub fn profile_fusion_weights(
    tape: &mut Tape,
    e_ctx: ValueId,
    p: ValueId,
    w_p: ValueId,
) -> Result<ValueId> {
    let proj = tape.matmul(e_ctx, w_p)?;
    let logits = tape.matmul(proj, p)?;
    tape.row_softmax(logits, None)
}

/// Assemble P per ablation restriction, validating the profile against the
/// manifest fields the encoder was built with.
pub fn build_profile_matrix(
    tape: &mut Tape,
    store: &ParameterStore,
    enc: &EncoderParams,
    cfg: &ModelConfig,
    profile: &ProfileSet,
    restriction: ProfileRestriction,
) -> Result<ValueId> {
    profile.validate(&cfg.profile)?;
    let up_fields: Vec<ProfileField> = cfg.up_fields().cloned().collect();
    let ca_fields: Vec<ProfileField> = cfg.ca_fields().cloned().collect();
    let mut proj: Vec<(ValueId, ProfileField)> = Vec::new();
    let mut vectors: Vec<&[f64]> = Vec::new();
    if restriction != ProfileRestriction::CaOnly {
        for ((&pid, field), vec) in enc.up_proj.iter().zip(&up_fields).zip(&profile.up) {
            proj.push((tape.param(store, pid), field.clone()));
            vectors.push(vec);
        }
    }
    if restriction != ProfileRestriction::UpOnly {
        for ((&pid, field), vec) in enc.ca_proj.iter().zip(&ca_fields).zip(&profile.ca) {
            proj.push((tape.param(store, pid), field.clone()));
            vectors.push(vec);
        }
    }
    if proj.is_empty() {
        return Err(Error::invalid(
            "profile restriction leaves no columns in P",
        ));
    }
    project_profiles(tape, &proj, &vectors)
}

/// Full encoder: token ids (padded to `mask.len()`, real length =
/// number of leading `true` flags) to the encoding matrix U
/// (`[d_u, n]`; `[d_e, n]` in no-profile mode). Dropout is applied to the
/// word embeddings and to U.
pub fn encode_utterance(
    tape: &mut Tape,
    store: &ParameterStore,
    enc: &EncoderParams,
    cfg: &ModelConfig,
    ids: &[usize],
    n_real: usize,
    profile: &ProfileSet,
    ablation: Ablation,
) -> Result<ValueId> {
    if n_real == 0 || n_real > ids.len() {
        return Err(Error::invalid(format!(
            "encode_utterance: real length {n_real} invalid for {} ids",
            ids.len()
        )));
    }
    let mask: Vec<bool> = (0..ids.len()).map(|i| i < n_real).collect();
    let e = embed_tokens(tape, store, enc.word_table, ids, cfg.dropout)?;
    let b = bilstm_encode(tape, store, &enc.lstm_fwd, &enc.lstm_bwd, e, n_real, cfg.lstm_hidden)?;
    let s = self_attention_encode(tape, store, &enc.sa, e, &mask)?;
    let e_ctx = concat_context(tape, b, s)?;

    let stacked = match ablation {
        Ablation::NoProfile => e_ctx,
        _ => {
            let restriction = match ablation {
                Ablation::NoUp => ProfileRestriction::CaOnly,
                Ablation::NoCa => ProfileRestriction::UpOnly,
                _ => ProfileRestriction::Full,
            };
            let p = build_profile_matrix(tape, store, enc, cfg, profile, restriction)?;
            let w_p = tape.param(store, enc.w_p);
            let e_prof = profile_fusion(tape, e_ctx, p, w_p)?;
            tape.concat_last(&[e_ctx, e_prof])?
        }
    };
    let u = tape.transpose(stacked)?;
    Ok(tape.dropout(u, cfg.dropout))
}
