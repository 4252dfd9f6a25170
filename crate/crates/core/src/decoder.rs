//! Output heads: intent classification from the summary vector g, slot
//! features that append the intent embedding to every token column, a
//! linear-chain CRF over BIO tags (log-space forward algorithm for the
//! loss, Viterbi for inference), and the weighted joint objective.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct IntentHead {
    /// Classifier weight, `[n_intents, d_u]`.
    pub w_id: ParamId,
    /// Intent label embeddings fed to the slot decoder, `[n_intents, d_y]`.
    pub intent_embed: ParamId,
}

impl IntentHead {
    pub fn create(
        store: &mut ParameterStore,
        n_intents: usize,
        d_u: usize,
        d_y: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        IntentHead {
            w_id: store.add("dec.intent.w_id", vec![n_intents, d_u], Init::Glorot, rng),
            intent_embed: store.add("dec.intent.embed", vec![n_intents, d_y], Init::Embedding, rng),
        }
    }
}

/// Linear-chain CRF parameters. The transition matrix covers the real
/// tags plus virtual begin/end states at indices `n_tags` and
/// `n_tags + 1`; entries into the begin state and out of the end state
/// exist in the matrix but are never read.
#[derive(Debug, Clone)]
pub struct CrfParams {
    /// Emission projection, `[n_tags, d_u + d_y]`.
    pub emission_proj: ParamId,
    /// Transition scores, `[n_tags + 2, n_tags + 2]`.
    pub transitions: ParamId,
    pub n_tags: usize,
}

impl CrfParams {
    pub fn create(
        store: &mut ParameterStore,
        n_tags: usize,
        feat_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrfParams {
            emission_proj: store.add("dec.crf.emission", vec![n_tags, feat_dim], Init::Glorot, rng),
            transitions: store.add("dec.crf.trans", vec![n_tags + 2, n_tags + 2], Init::Glorot, rng),
            n_tags,
        }
    }

    pub fn bos(&self) -> usize {
        self.n_tags
    }

    pub fn eos(&self) -> usize {
        self.n_tags + 1
    }
}

/// Intent logits and the arg-max label, ties going to the lowest index.
pub fn predict_intent(
    tape: &mut Tape,
    store: &ParameterStore,
    w_id: ParamId,
    g: ValueId,
) -> Result<(ValueId, usize)> {
    let w = tape.param(store, w_id);
    let logits = tape.matmul(w, g)?;
    let y = argmax_lowest(tape.value(logits).data());
    Ok((logits, y))
}

pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Cross entropy of the gold intent under softmax of the logits.
pub fn intent_loss(tape: &mut Tape, logits: ValueId, gold: usize) -> Result<ValueId> {
    let n = tape.value(logits).numel();
    if gold >= n {
        return Err(Error::invalid(format!(
            "intent_loss: gold label {gold} out of range for {n} intents"
        )));
    }
    tape.ce_logits(logits, gold)
}

/// Slot features: every token column of U gets the embedding of the
/// chosen intent appended, giving `[(d_u + d_y), n]`.
pub fn slot_features(
    tape: &mut Tape,
    store: &ParameterStore,
    intent_embed: ParamId,
    u: ValueId,
    intent: usize,
) -> Result<ValueId> {
    let table = tape.param(store, intent_embed);
    let n_intents = tape.value(table).rows();
    if intent >= n_intents {
        return Err(Error::invalid(format!(
            "slot_features: intent {intent} out of range for {n_intents} labels"
        )));
    }
    let e_y = tape.row(table, intent)?;
    let n = tape.value(u).shape()[1];
    let rep = tape.repeat_col(e_y, n)?;
    tape.concat_rows(&[u, rep])
}

/// Emission scores for the first `n` token columns, `[n_tags, n]`.
pub fn emission_scores(
    tape: &mut Tape,
    store: &ParameterStore,
    crf: &CrfParams,
    s_feat: ValueId,
    n: usize,
) -> Result<ValueId> {
    let proj = tape.param(store, crf.emission_proj);
    let phi = tape.matmul(proj, s_feat)?;
    let cols = tape.value(phi).cols();
    if n == cols {
        Ok(phi)
    } else {
        tape.slice_block(phi, 0, 0, crf.n_tags, n)
    }
}

/// CRF negative log-likelihood of the gold tag sequence. The partition
/// function is computed with the forward algorithm in log space; the
/// sequence length is `gold_tags.len()`, and any extra (pad) columns of
/// `s_feat` are ignored.
pub fn crf_nll(
    tape: &mut Tape,
    store: &ParameterStore,
    crf: &CrfParams,
    s_feat: ValueId,
    gold_tags: &[usize],
) -> Result<ValueId> {
    let n = gold_tags.len();
    if n == 0 {
        return Err(Error::invalid("crf_nll: empty tag sequence"));
    }
    if tape.value(s_feat).cols() < n {
        return Err(Error::shape(
            "crf_nll",
            format!("{} feature columns for {n} tags", tape.value(s_feat).cols()),
        ));
    }
    let k = crf.n_tags;
    if let Some(&bad) = gold_tags.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!(
            "crf_nll: tag {bad} out of range for {k} tags"
        )));
    }
    let phi = emission_scores(tape, store, crf, s_feat, n)?;
    let trans = tape.param(store, crf.transitions);
    let t_core = tape.slice_block(trans, 0, 0, k, k)?;
    let bos_row = tape.row(trans, crf.bos())?;
    let t_bos = tape.slice_vec(bos_row, 0, k)?;
    let t_eos = tape.col(trans, crf.eos())?;
    let t_eos = tape.slice_vec(t_eos, 0, k)?;

    // Forward recursion: alpha[j] accumulates the log-sum of all prefix
    // paths ending in tag j.
    let phi0 = tape.col(phi, 0)?;
    let mut alpha = tape.add(t_bos, phi0)?;
    for t in 1..n {
        let m = tape.add_col_vec(t_core, alpha)?;
        let lse = tape.logsumexp_cols(m)?;
        let phit = tape.col(phi, t)?;
        alpha = tape.add(lse, phit)?;
    }
    let final_scores = tape.add(alpha, t_eos)?;
    let log_z = tape.logsumexp(final_scores)?;

    // Gold path score: emissions plus the transition chain through the
    // virtual begin and end states.
    let em_idx: Vec<(usize, usize)> = gold_tags.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let em = tape.gather_elems(phi, &em_idx)?;
    let em_sum = tape.sum(em);
    let mut tr_idx = Vec::with_capacity(n + 1);
    tr_idx.push((crf.bos(), gold_tags[0]));
    for w in gold_tags.windows(2) {
        tr_idx.push((w[0], w[1]));
    }
    tr_idx.push((gold_tags[n - 1], crf.eos()));
    let tr = tape.gather_elems(trans, &tr_idx)?;
    let tr_sum = tape.sum(tr);

    tape.weighted_sum(&[(log_z, 1.0), (em_sum, -1.0), (tr_sum, -1.0)])
}

/// Highest-scoring tag sequence for emission matrix `phi` (`[n_tags, n]`)
/// under transition matrix `trans`, including the virtual begin and end
/// transitions. Ties take the lowest tag index at every backtrack step.
pub fn viterbi_from_scores(phi: &Tensor, trans: &Tensor, n_tags: usize) -> Result<Vec<usize>> {
    let n = phi.cols();
    if n == 0 {
        return Err(Error::invalid("viterbi: empty sequence"));
    }
    if phi.rows() != n_tags || trans.rows() != n_tags + 2 || trans.cols() != n_tags + 2 {
        return Err(Error::shape(
            "viterbi",
            format!(
                "emissions {:?} with transitions {:?} for {n_tags} tags",
                phi.shape(),
                trans.shape()
            ),
        ));
    }
    let bos = n_tags;
    let eos = n_tags + 1;
    let mut delta: Vec<f64> = (0..n_tags).map(|j| trans.at(bos, j) + phi.at(j, 0)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let mut next = vec![f64::NEG_INFINITY; n_tags];
        let mut ptr = vec![0usize; n_tags];
        for j in 0..n_tags {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, &d) in delta.iter().enumerate() {
                let s = d + trans.at(i, j);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            next[j] = best + phi.at(j, t);
            ptr[j] = best_i;
        }
        delta = next;
        back.push(ptr);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, &d) in delta.iter().enumerate() {
        let s = d + trans.at(j, eos);
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut tags = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        tags.push(last);
    }
    tags.reverse();
    Ok(tags)
}

/// Viterbi over the first `n` columns of on-tape slot features.
pub fn viterbi_decode(
    tape: &mut Tape,
    store: &ParameterStore,
    crf: &CrfParams,
    s_feat: ValueId,
    n: usize,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("viterbi: empty sequence"));
    }
    let phi = emission_scores(tape, store, crf, s_feat, n)?;
    let phi = tape.value(phi).clone();
    let trans = store.value(crf.transitions);
    viterbi_from_scores(&phi, trans, crf.n_tags)
}

/// Weighted joint objective `lambda * L_ID + (1 - lambda) * L_SF`.
pub fn joint_loss(
    tape: &mut Tape,
    l_id: ValueId,
    l_sf: ValueId,
    lambda: f64,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "joint_loss: lambda {lambda} outside [0, 1]"
        )));
    }
    tape.weighted_sum(&[(l_id, lambda), (l_sf, 1.0 - lambda)])
}
