//! The full joint model: parameter creation, the per-utterance training
//! graph, inference, and checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Ablation, ModelConfig};
use crate::data::{LabelVocabulary, TokenVocab};
use crate::decoder::{self, CrfParams, IntentHead};
use crate::encoder::{self, EncoderParams, ProfileSet};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::slot2intent::{self, LabelAttentionParams};
use crate::tape::{Tape, ValueId};

/// Everything the checkpoint stores besides raw parameter values. The
/// frozen vocabularies pin label and tag order so decoding is stable
/// across processes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub tokens: TokenVocab,
    pub labels: LabelVocabulary,
}

pub struct JpisModel {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub tokens: TokenVocab,
    pub labels: LabelVocabulary,
    pub store: ParameterStore,
    pub enc: EncoderParams,
    pub s2i: LabelAttentionParams,
    pub intent_head: IntentHead,
    pub crf: CrfParams,
}

/// One utterance prepared for the model: padded token ids, the real
/// length, and the profile vectors.
pub struct UtteranceInput<'a> {
    pub ids: &'a [usize],
    pub n_real: usize,
    pub profile: &'a ProfileSet,
}

pub struct Prediction {
    pub intent: usize,
    pub tags: Vec<usize>,
}

impl JpisModel {
    /// Create a model with freshly initialized parameters. Creation order
    /// is fixed so identical seeds give identical parameters.
    pub fn new(
        cfg: ModelConfig,
        ablation: Ablation,
        tokens: TokenVocab,
        labels: LabelVocabulary,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(ablation)?;
        if labels.n_intents() == 0 || labels.n_slot_types() == 0 {
            return Err(Error::invalid("label vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d_u = cfg.d_u(ablation);
        let enc = EncoderParams::create(&mut store, &cfg, tokens.len(), &mut rng);
        let s2i = LabelAttentionParams::create(
            &mut store,
            &cfg,
            d_u,
            labels.n_intents(),
            labels.n_slot_types(),
            &mut rng,
        );
        let intent_head =
            IntentHead::create(&mut store, labels.n_intents(), d_u, cfg.d_y, &mut rng);
        let crf = CrfParams::create(&mut store, labels.n_tags(), d_u + cfg.d_y, &mut rng);
        Ok(JpisModel {
            cfg,
            ablation,
            tokens,
            labels,
            store,
            enc,
            s2i,
            intent_head,
            crf,
        })
    }

    pub fn d_u(&self) -> usize {
        self.cfg.d_u(self.ablation)
    }

    fn mask_for(&self, input: &UtteranceInput) -> Vec<bool> {
        (0..input.ids.len()).map(|i| i < input.n_real).collect()
    }

    /// Encode and summarize one utterance, returning the encoding matrix
    /// U, the intent logits and the arg-max intent.
    fn encode_and_classify(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        input: &UtteranceInput,
    ) -> Result<(ValueId, ValueId, usize)> {
        if input.n_real == 0 || input.n_real > input.ids.len() {
            return Err(Error::invalid(format!(
                "utterance real length {} invalid for {} ids",
                input.n_real,
                input.ids.len()
            )));
        }
        let mask = self.mask_for(input);
        let u = encoder::encode_utterance(
            tape,
            store,
            &self.enc,
            &self.cfg,
            input.ids,
            input.n_real,
            input.profile,
            self.ablation,
        )?;
        let g = if self.ablation == Ablation::NoSlot2intent {
            let w_g = tape.param(store, self.s2i.w_g);
            slot2intent::baseline_summary(tape, u, w_g, &mask)?
        } else {
            slot2intent::slot_to_intent_summary(tape, store, &self.s2i, u, &mask)?.g
        };
        let (logits, y_pred) = decoder::predict_intent(tape, store, self.intent_head.w_id, g)?;
        Ok((u, logits, y_pred))
    }

    /// Joint training loss for one utterance, reading parameter values
    /// from an explicit store. The store must be the one this model's
    /// parameter handles were created in (or a clone of it); passing an
    /// explicit reference lets finite-difference checks perturb values
    /// while the model itself stays borrowed immutably.
    pub fn utterance_loss_in(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        input: &UtteranceInput,
        gold_intent: usize,
        gold_tags: &[usize],
        lambda: f64,
        teacher_forcing: bool,
    ) -> Result<ValueId> {
        if gold_tags.len() != input.n_real {
            return Err(Error::invalid(format!(
                "{} gold tags for real length {}",
                gold_tags.len(),
                input.n_real
            )));
        }
        let (u, logits, y_pred) = self.encode_and_classify(store, tape, input)?;
        let l_id = decoder::intent_loss(tape, logits, gold_intent)?;
        let intent_for_slots = if teacher_forcing { gold_intent } else { y_pred };
        let s_feat = decoder::slot_features(
            tape,
            store,
            self.intent_head.intent_embed,
            u,
            intent_for_slots,
        )?;
        let l_sf = decoder::crf_nll(tape, store, &self.crf, s_feat, gold_tags)?;
        decoder::joint_loss(tape, l_id, l_sf, lambda)
    }

    /// Joint training loss for one utterance. `gold_tags` must cover the
    /// real (unpadded) length. With `teacher_forcing` the gold intent's
    /// embedding feeds the slot decoder; otherwise the predicted one.
    pub fn utterance_loss(
        &self,
        tape: &mut Tape,
        input: &UtteranceInput,
        gold_intent: usize,
        gold_tags: &[usize],
        lambda: f64,
        teacher_forcing: bool,
    ) -> Result<ValueId> {
        self.utterance_loss_in(
            &self.store,
            tape,
            input,
            gold_intent,
            gold_tags,
            lambda,
            teacher_forcing,
        )
    }

    /// Inference: intent by arg-max, slot tags by Viterbi. The predicted
    /// intent's embedding feeds the slot decoder.
    pub fn predict(&self, input: &UtteranceInput) -> Result<Prediction> {
        let mut tape = Tape::eval();
        let (u, _logits, y_pred) = self.encode_and_classify(&self.store, &mut tape, input)?;
        let s_feat = decoder::slot_features(
            &mut tape,
            &self.store,
            self.intent_head.intent_embed,
            u,
            y_pred,
        )?;
        let tags =
            decoder::viterbi_decode(&mut tape, &self.store, &self.crf, s_feat, input.n_real)?;
        Ok(Prediction { intent: y_pred, tags })
    }

    /// [`predict`](Self::predict) on a corpus record, looking tokens up
    /// in the model vocabulary. Gold labels on the record are ignored.
    pub fn predict_record(&self, record: &crate::data::CorpusRecord) -> Result<Prediction> {
        let ids = self.tokens.ids(&record.tokens);
        self.predict(&UtteranceInput {
            ids: &ids,
            n_real: ids.len(),
            profile: &record.profile,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.cfg.clone(),
            ablation: self.ablation,
            tokens: self.tokens.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.store, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load_checkpoint(path)?;
        let mut meta: ModelMeta = loaded.meta_as()?;
        meta.tokens.rebuild_index();
        let mut model = JpisModel::new(meta.config, meta.ablation, meta.tokens, meta.labels, 0)?;
        checkpoint::restore_into(&mut model.store, &loaded)?;
        Ok(model)
    }
}

/// Build a small fixed model plus one frozen utterance and compare its
/// backward pass against central finite differences over every parameter
/// element. Shared by the test suite and the `gradcheck` CLI command;
/// the instance is frozen so results are reproducible across runs.
pub fn gradcheck_tiny_model(ablation: Ablation) -> Result<crate::gradcheck::GradCheckReport> {
    gradcheck_fixed_model(ablation, 8, 3, 11)
}

/// Same check on a somewhat larger instance (hidden dims 12, four
/// tokens) for extra scrutiny; slower than the tiny variant.
pub fn gradcheck_small_model(ablation: Ablation) -> Result<crate::gradcheck::GradCheckReport> {
    gradcheck_fixed_model(ablation, 12, 4, 11)
}

fn gradcheck_fixed_model(
    ablation: Ablation,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<crate::gradcheck::GradCheckReport> {
    use crate::config::{ProfileField, ProfileKind};
    use crate::data::build_vocab;
    use crate::data::CorpusRecord;

    let cfg = ModelConfig {
        word_dim: dim,
        lstm_hidden: dim,
        sa_dim: dim,
        sa_key_dim: dim,
        d_p: dim,
        d_a: dim,
        d_c: dim,
        d_y: dim,
        dropout: 0.0,
        profile: vec![
            ProfileField {
                kind: ProfileKind::Up,
                name: "pref".into(),
                dim: 2,
                distribution: true,
            },
            ProfileField {
                kind: ProfileKind::Ca,
                name: "place".into(),
                dim: 3,
                distribution: true,
            },
        ],
    };
    let rec = |tokens: &[&str], intent: &str, tags: &[&str]| CorpusRecord {
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        intent: intent.to_string(),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        profile: ProfileSet {
            up: vec![vec![0.5, 0.5]],
            ca: vec![vec![0.4, 0.3, 0.3]],
        },
    };
    let records = vec![
        rec(&["play", "one", "two", "three"][..n], "music", &["O", "B-title", "I-title", "O"][..n]),
        rec(&["go", "one", "two", "three"][..n], "travel", &["O", "B-city", "B-poi", "O"][..n]),
        rec(&["find", "one", "two", "three"][..n], "lookup", &["O", "B-artist", "O", "O"][..n]),
    ];
    let (tokens, labels) = build_vocab(&records)?;
    let mut model = JpisModel::new(cfg, ablation, tokens, labels, seed)?;

    let profile = ProfileSet {
        up: vec![vec![0.8, 0.2]],
        ca: vec![vec![0.2, 0.5, 0.3]],
    };
    let ids: Vec<usize> = (2..2 + n).collect();
    let input = UtteranceInput { ids: &ids, n_real: n, profile: &profile };
    let gold_tags: Vec<usize> = [0usize, 1, 2, 0][..n].to_vec();
    let mut store = std::mem::replace(&mut model.store, ParameterStore::new());
    // Epsilon 1e-7 keeps the O(eps^2) truncation term of the central
    // difference below the comparison floor; the extended-precision loss
    // evaluation makes rounding a non-issue at this step size.
    let report = crate::gradcheck::grad_check_detailed(&mut store, 1e-7, |st, tape| {
        model.utterance_loss_in(st, tape, &input, 1, &gold_tags, 0.4, true)
    })?;
    model.store = store;
    Ok(report)
}
