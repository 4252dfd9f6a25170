//! Evaluation: intent accuracy, span-level slot F1 and overall accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bio::bio_decode_spans;
use crate::data::CorpusRecord;
use crate::error::{Error, Result};
use crate::model::JpisModel;

/// Micro-averaged span counts accumulated across utterances.
///
/// Spans are decoded from both tag sequences with the usual repair rule,
/// then matched on exact (start, end, type).
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanStats {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanStats {
    pub fn add<P: AsRef<str>, G: AsRef<str>>(&mut self, predicted: &[P], gold: &[G]) -> Result<()> {
        let pred_spans = bio_decode_spans(predicted)?;
        let gold_spans: BTreeSet<_> = bio_decode_spans(gold)?.into_iter().collect();
        self.predicted += pred_spans.len();
        self.gold += gold_spans.len();
        self.matched += pred_spans.iter().filter(|s| gold_spans.contains(s)).count();
        Ok(())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    /// Harmonic mean of precision and recall, 0 when their sum is 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of one seeded run inside a multi-seed report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub overall_accuracy: f64,
    /// Filled by multi-seed evaluation; empty for a single run.
    #[serde(default)]
    pub per_seed: Vec<SeedMetrics>,
    pub n_utterances: usize,
}

/// Evaluate a model on a dataset.
///
/// Intent accuracy is the exact-match rate. Slot F1 is micro span-level
/// F1 over repaired spans. An utterance counts toward overall accuracy
/// only when the intent is correct and the raw predicted tag sequence
/// equals the gold one; span-equivalent but differently written tag
/// sequences do not count. Gold labels the model has never seen simply
/// never match a prediction.
pub fn evaluate(model: &JpisModel, records: &[CorpusRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("evaluate: empty dataset"));
    }
    let mut intent_hits = 0usize;
    let mut overall_hits = 0usize;
    let mut spans = SpanStats::default();
    for rec in records {
        let pred = model.predict_record(rec)?;
        let pred_tags: Vec<&str> = pred.tags.iter().map(|&t| model.labels.tag_str(t)).collect();

        let intent_ok = model.labels.intent_id(&rec.intent) == Some(pred.intent);
        let tags_ok = pred_tags.len() == rec.tags.len()
            && pred_tags.iter().zip(&rec.tags).all(|(p, g)| *p == g.as_str());
        intent_hits += intent_ok as usize;
        overall_hits += (intent_ok && tags_ok) as usize;
        spans.add(&pred_tags, &rec.tags)?;
    }
    let n = records.len() as f64;
    Ok(MetricsReport {
        intent_accuracy: intent_hits as f64 / n,
        slot_f1: spans.f1(),
        overall_accuracy: overall_hits as f64 / n,
        per_seed: Vec::new(),
        n_utterances: records.len(),
    })
}

/// Arithmetic mean of per-run metrics, carrying the runs along.
pub fn mean_report(runs: Vec<(u64, MetricsReport)>) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::invalid("mean_report: no runs"));
    }
    let n = runs.len() as f64;
    let n_utterances = runs[0].1.n_utterances;
    let mut intent = 0.0;
    let mut f1 = 0.0;
    let mut overall = 0.0;
    let mut per_seed = Vec::with_capacity(runs.len());
    for (seed, r) in runs {
        intent += r.intent_accuracy;
        f1 += r.slot_f1;
        overall += r.overall_accuracy;
        per_seed.push(SeedMetrics {
            seed,
            intent_accuracy: r.intent_accuracy,
            slot_f1: r.slot_f1,
            overall_accuracy: r.overall_accuracy,
        });
    }
    Ok(MetricsReport {
        intent_accuracy: intent / n,
        slot_f1: f1 / n,
        overall_accuracy: overall / n,
        per_seed,
        n_utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig, ProfileField, ProfileKind};
    use crate::data::build_vocab;
    use crate::encoder::ProfileSet;
    use crate::model::UtteranceInput;

    fn tiny_model() -> JpisModel {
        let cfg = ModelConfig {
            word_dim: 6,
            lstm_hidden: 3,
            sa_dim: 4,
            sa_key_dim: 3,
            d_p: 4,
            d_a: 4,
            d_c: 5,
            d_y: 3,
            dropout: 0.0,
            profile: vec![ProfileField {
                kind: ProfileKind::Up,
                name: "pref".into(),
                dim: 2,
                distribution: true,
            }],
        };
        let records = base_records();
        let (tokens, labels) = build_vocab(&records).unwrap();
        JpisModel::new(cfg, Ablation::None, tokens, labels, 5).unwrap()
    }

    fn rec(tokens: &[&str], intent: &str, tags: &[&str]) -> CorpusRecord {
        CorpusRecord {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            intent: intent.to_string(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            profile: ProfileSet { up: vec![vec![0.6, 0.4]], ca: vec![] },
        }
    }

    fn base_records() -> Vec<CorpusRecord> {
        vec![
            rec(&["play", "abc"], "music", &["O", "B-title"]),
            rec(&["go", "to", "oslo"], "travel", &["O", "O", "B-city"]),
            rec(&["play", "oslo"], "music", &["O", "B-title"]),
        ]
    }

    /// Records whose gold equals whatever the model currently predicts.
    fn self_consistent_records(model: &JpisModel) -> Vec<CorpusRecord> {
        base_records()
            .into_iter()
            .map(|mut r| {
                let ids = model.tokens.ids(&r.tokens);
                let input =
                    UtteranceInput { ids: &ids, n_real: ids.len(), profile: &r.profile };
                let pred = model.predict(&input).unwrap();
                r.intent = model.labels.intents[pred.intent].clone();
                r.tags = pred
                    .tags
                    .iter()
                    .map(|&t| model.labels.tag_str(t).to_string())
                    .collect();
                r
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let model = tiny_model();
        let records = self_consistent_records(&model);
        let m = evaluate(&model, &records).unwrap();
        assert_eq!(m.intent_accuracy, 1.0);
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.n_utterances, 3);
        // Slot F1 is 1 only if the model predicted at least one span;
        // with none anywhere it is 0 by the zero-denominator rule.
        let any_span = records.iter().any(|r| r.tags.iter().any(|t| t != "O"));
        assert_eq!(m.slot_f1, if any_span { 1.0 } else { 0.0 });
    }

    #[test]
    fn span_counts_match_hand_enumeration() {
        // gold spans {(0,1,X), (3,3,Y)}; predicted {(0,1,X), (2,3,Y)}.
        let mut s = SpanStats::default();
        s.add(
            &["B-X", "I-X", "B-Y", "I-Y"],
            &["B-X", "I-X", "O", "B-Y"],
        )
        .unwrap();
        assert_eq!((s.matched, s.predicted, s.gold), (1, 2, 2));
        assert_eq!(s.precision(), 0.5);
        assert_eq!(s.recall(), 0.5);
        assert_eq!(s.f1(), 0.5);
    }

    #[test]
    fn f1_is_zero_when_no_spans_on_either_side() {
        let mut s = SpanStats::default();
        s.add(&["O", "O"], &["O", "O"]).unwrap();
        assert_eq!(s.f1(), 0.0);
        assert_eq!(s.precision(), 0.0);
    }

    #[test]
    fn micro_average_pools_counts_not_rates() {
        let mut s = SpanStats::default();
        s.add(&["B-X"], &["B-X"]).unwrap();
        s.add(&["B-X", "B-X", "B-X"], &["O", "O", "O"]).unwrap();
        // One matched of four predicted, one gold overall.
        assert_eq!(s.precision(), 0.25);
        assert_eq!(s.recall(), 1.0);
        assert!((s.f1() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn wrong_intent_blocks_overall_even_with_perfect_tags() {
        let model = tiny_model();
        let mut records = self_consistent_records(&model);
        for r in &mut records {
            r.intent = "never-seen-intent".to_string();
        }
        let m = evaluate(&model, &records).unwrap();
        assert_eq!(m.intent_accuracy, 0.0);
        assert_eq!(m.overall_accuracy, 0.0);
    }

    #[test]
    fn unseen_gold_slot_types_reduce_recall_without_crashing() {
        let model = tiny_model();
        let mut records = self_consistent_records(&model);
        records[0].tags = vec!["B-unknown-type".to_string(); records[0].tags.len()];
        let m = evaluate(&model, &records).unwrap();
        assert!(m.slot_f1 <= 1.0);
        assert!(m.overall_accuracy < 1.0);
    }

    #[test]
    fn overall_bounded_by_intent_and_exact_tag_fraction() {
        let model = tiny_model();
        // Arbitrary gold that mostly disagrees with the model.
        let records = vec![
            rec(&["play", "abc"], "music", &["B-title", "I-title"]),
            rec(&["go", "to", "oslo"], "travel", &["O", "B-city", "I-city"]),
            rec(&["play", "oslo"], "travel", &["O", "B-poi"]),
        ];
        let m = evaluate(&model, &records).unwrap();
        let exact_tags = records
            .iter()
            .filter(|r| {
                let ids = model.tokens.ids(&r.tokens);
                let input =
                    UtteranceInput { ids: &ids, n_real: ids.len(), profile: &r.profile };
                let pred = model.predict(&input).unwrap();
                pred.tags
                    .iter()
                    .map(|&t| model.labels.tag_str(t))
                    .eq(r.tags.iter().map(|s| s.as_str()))
            })
            .count() as f64
            / records.len() as f64;
        assert!(m.overall_accuracy <= m.intent_accuracy + 1e-12);
        assert!(m.overall_accuracy <= exact_tags + 1e-12);
    }

    #[test]
    fn evaluation_is_pure() {
        let model = tiny_model();
        let records = base_records();
        let a = evaluate(&model, &records).unwrap();
        let b = evaluate(&model, &records).unwrap();
        assert_eq!(a.intent_accuracy.to_bits(), b.intent_accuracy.to_bits());
        assert_eq!(a.slot_f1.to_bits(), b.slot_f1.to_bits());
        assert_eq!(a.overall_accuracy.to_bits(), b.overall_accuracy.to_bits());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = tiny_model();
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn mean_report_is_permutation_invariant() {
        let m = |i, f, o| MetricsReport {
            intent_accuracy: i,
            slot_f1: f,
            overall_accuracy: o,
            per_seed: Vec::new(),
            n_utterances: 10,
        };
        let fwd = mean_report(vec![(1, m(0.9, 0.8, 0.7)), (2, m(0.5, 0.4, 0.3))]).unwrap();
        let rev = mean_report(vec![(2, m(0.5, 0.4, 0.3)), (1, m(0.9, 0.8, 0.7))]).unwrap();
        assert_eq!(fwd.intent_accuracy.to_bits(), rev.intent_accuracy.to_bits());
        assert_eq!(fwd.overall_accuracy.to_bits(), rev.overall_accuracy.to_bits());
        assert!((fwd.intent_accuracy - 0.7).abs() < 1e-12);
        assert_eq!(fwd.per_seed.len(), 2);
        assert_eq!(fwd.per_seed[0].seed, 1);
        assert_eq!(rev.per_seed[0].seed, 2);
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = MetricsReport {
            intent_accuracy: 0.9375,
            slot_f1: 0.5,
            overall_accuracy: 0.875,
            per_seed: vec![SeedMetrics {
                seed: 3,
                intent_accuracy: 0.9375,
                slot_f1: 0.5,
                overall_accuracy: 0.875,
            }],
            n_utterances: 16,
        };
        let s = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.intent_accuracy, report.intent_accuracy);
        assert_eq!(back.per_seed.len(), 1);
        assert_eq!(back.n_utterances, 16);
    }
}
