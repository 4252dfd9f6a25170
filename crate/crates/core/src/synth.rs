//! Synthetic corpus generator for desk-scale experiments.
//!
//! Utterances come from a small template grammar over four intents
//! (`play.music`, `play.video`, `travel.flight`, `travel.train`) and four
//! slot types (`title`, `artist`, `city`, `poi`). A configurable fraction
//! of utterances is textually ambiguous between exactly two intents; for
//! those, the user-profile preference distribution decides the gold
//! intent. Destination names drawn from a shared pool are likewise
//! ambiguous between `city` and `poi`, with the context vector deciding.
//! Profiles never contradict the gold labels, so a profile-aware model
//! can resolve every utterance while a text-only model faces coin flips
//! on the ambiguous ones.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ProfileField, ProfileKind, TrainConfig};
use crate::data::CorpusRecord;
use crate::encoder::ProfileSet;
use crate::error::{Error, Result};

pub const INTENT_MUSIC: &str = "play.music";
pub const INTENT_VIDEO: &str = "play.video";
pub const INTENT_FLIGHT: &str = "travel.flight";
pub const INTENT_TRAIN: &str = "travel.train";

const SHARED_TITLES: &[&[&str]] = &[
    &["golden", "hour"],
    &["midnight", "sky"],
    &["ocean", "drive"],
    &["silver", "lining"],
    &["northern", "lights"],
    &["falling", "stars"],
    &["thriller"],
    &["yesterday"],
    &["dynamite"],
    &["believer"],
];

const ARTISTS: &[&[&str]] = &[
    &["nova", "ray"],
    &["luna"],
    &["the", "echoes"],
    &["miles", "carter"],
    &["aria"],
    &["red", "velvet"],
];

const CITY_ONLY: &[&[&str]] = &[
    &["hanoi"],
    &["paris"],
    &["berlin"],
    &["tokyo"],
    &["oslo"],
    &["madrid"],
];

const POI_ONLY: &[&[&str]] = &[
    &["sunrise", "hotel"],
    &["central", "station"],
    &["city", "museum"],
    &["river", "park"],
    &["grand", "plaza"],
];

/// Names that read as either a town or a neighborhood; only the context
/// vector settles which slot type they carry.
const SHARED_PLACES: &[&[&str]] = &[
    &["riverside"],
    &["springfield"],
    &["georgetown"],
    &["oakland"],
    &["richmond"],
    &["clifton"],
];

/// Generation summary recorded next to the corpus files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub seed: u64,
    pub size: usize,
    pub ambiguity_rate: f64,
    pub intent_counts: BTreeMap<String, usize>,
    pub slot_counts: BTreeMap<String, usize>,
}

pub struct SynthCorpus {
    pub train: Vec<CorpusRecord>,
    pub valid: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub metadata: SynthMetadata,
}

/// Profile layout every synthetic record follows: two user preference
/// distributions and two context distributions.
pub fn synth_manifest() -> Vec<ProfileField> {
    let field = |kind, name: &str, dim| ProfileField {
        kind,
        name: name.to_string(),
        dim,
        distribution: true,
    };
    vec![
        field(ProfileKind::Up, "media_pref", 2),
        field(ProfileKind::Up, "transport_pref", 2),
        field(ProfileKind::Ca, "locality", 2),
        field(ProfileKind::Ca, "daypart", 3),
    ]
}

/// Training configuration sized for the synthetic corpus.
pub fn synth_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            word_dim: 64,
            lstm_hidden: 32,
            sa_dim: 32,
            sa_key_dim: 32,
            d_p: 32,
            d_a: 32,
            d_c: 64,
            d_y: 32,
            dropout: 0.1,
            profile: synth_manifest(),
        },
        lambda: 0.5,
        learning_rate: 4e-4,
        batch_size: 32,
        epochs: 30,
        seeds: vec![1, 2, 3],
        ablation: crate::config::Ablation::None,
        intent_teacher_forcing: true,
        grad_clip: Some(5.0),
        lr_grid: vec![2e-4, 4e-4, 6e-4, 8e-4],
        lambda_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    }
}

/// A preference distribution that clearly favors one of two options.
fn pref(rng: &mut ChaCha8Rng, favored: usize) -> Vec<f64> {
    let w = rng.gen_range(0.75..0.95);
    if favored == 0 {
        vec![w, 1.0 - w]
    } else {
        vec![1.0 - w, w]
    }
}

fn noise_dist(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn push_words(tokens: &mut Vec<String>, tags: &mut Vec<String>, words: &[&str]) {
    for w in words {
        tokens.push(w.to_string());
        tags.push("O".to_string());
    }
}

fn push_span(tokens: &mut Vec<String>, tags: &mut Vec<String>, words: &[&str], label: &str) {
    for (i, w) in words.iter().enumerate() {
        tokens.push(w.to_string());
        tags.push(if i == 0 {
            format!("B-{label}")
        } else {
            format!("I-{label}")
        });
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [&'a [&'a str]]) -> &'a [&'a str] {
    pool[rng.gen_range(0..pool.len())]
}

fn generate_record(rng: &mut ChaCha8Rng, ambiguity_rate: f64) -> CorpusRecord {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let ambiguous = rng.gen_range(0.0..1.0) < ambiguity_rate;
    let media_family = rng.gen_range(0..2) == 0;

    let intent;
    let mut media_pref_winner = rng.gen_range(0..2);
    let mut transport_pref_winner = rng.gen_range(0..2);
    let mut locality_winner = rng.gen_range(0..2);

    if media_family {
        // media_pref: index 0 = music, index 1 = video
        let gold = rng.gen_range(0..2);
        intent = if gold == 0 { INTENT_MUSIC } else { INTENT_VIDEO };
        media_pref_winner = gold;
        if ambiguous {
            match rng.gen_range(0..2) {
                0 => push_words(&mut tokens, &mut tags, &["play"]),
                _ => push_words(&mut tokens, &mut tags, &["put", "on"]),
            }
        } else if gold == 0 {
            push_words(&mut tokens, &mut tags, &["listen", "to"]);
        } else {
            match rng.gen_range(0..2) {
                0 => push_words(&mut tokens, &mut tags, &["watch"]),
                _ => push_words(&mut tokens, &mut tags, &["show", "me"]),
            }
        }
        push_span(&mut tokens, &mut tags, pick(rng, SHARED_TITLES), "title");
        if rng.gen_range(0..2) == 0 {
            push_words(&mut tokens, &mut tags, &["by"]);
            push_span(&mut tokens, &mut tags, pick(rng, ARTISTS), "artist");
        }
    } else {
        // transport_pref: index 0 = flight, index 1 = train
        let gold = rng.gen_range(0..2);
        intent = if gold == 0 { INTENT_FLIGHT } else { INTENT_TRAIN };
        transport_pref_winner = gold;
        if ambiguous {
            match rng.gen_range(0..2) {
                0 => push_words(&mut tokens, &mut tags, &["book", "a", "ticket", "to"]),
                _ => push_words(&mut tokens, &mut tags, &["get", "me", "to"]),
            }
        } else if gold == 0 {
            match rng.gen_range(0..2) {
                0 => push_words(&mut tokens, &mut tags, &["fly", "to"]),
                _ => push_words(&mut tokens, &mut tags, &["book", "a", "flight", "to"]),
            }
        } else {
            match rng.gen_range(0..2) {
                0 => push_words(&mut tokens, &mut tags, &["take", "the", "train", "to"]),
                _ => push_words(&mut tokens, &mut tags, &["catch", "a", "train", "to"]),
            }
        }
        // locality: index 0 = city, index 1 = poi
        if ambiguous {
            let place_kind = rng.gen_range(0..2);
            locality_winner = place_kind;
            let label = if place_kind == 0 { "city" } else { "poi" };
            push_span(&mut tokens, &mut tags, pick(rng, SHARED_PLACES), label);
        } else if rng.gen_range(0.0..1.0) < 0.6 {
            locality_winner = 0;
            push_span(&mut tokens, &mut tags, pick(rng, CITY_ONLY), "city");
        } else {
            locality_winner = 1;
            push_span(&mut tokens, &mut tags, pick(rng, POI_ONLY), "poi");
        }
    }

    let profile = ProfileSet {
        up: vec![pref(rng, media_pref_winner), pref(rng, transport_pref_winner)],
        ca: vec![pref(rng, locality_winner), noise_dist(rng, 3)],
    };
    CorpusRecord {
        tokens,
        intent: intent.to_string(),
        tags,
        profile,
    }
}

/// Generate train/valid/test splits of `size`, `size/8`, `size/8`
/// records. Deterministic for a fixed seed.
pub fn synth_generate(seed: u64, size: usize, ambiguity_rate: f64) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&ambiguity_rate) {
        return Err(Error::invalid(format!(
            "ambiguity rate {ambiguity_rate} outside [0, 1]"
        )));
    }
    if size == 0 {
        return Err(Error::invalid("corpus size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (size / 8).max(1);
    let total = size + 2 * side;
    let mut records = Vec::with_capacity(total);
    for _ in 0..total {
        records.push(generate_record(&mut rng, ambiguity_rate));
    }
    let test = records.split_off(size + side);
    let valid = records.split_off(size);
    let train = records;

    let mut intent_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut slot_counts: BTreeMap<String, usize> = BTreeMap::new();
    for record in &train {
        *intent_counts.entry(record.intent.clone()).or_insert(0) += 1;
        for span in crate::bio::bio_decode_spans(&record.tags)? {
            *slot_counts.entry(span.label).or_insert(0) += 1;
        }
    }
    let intents = [INTENT_MUSIC, INTENT_VIDEO, INTENT_FLIGHT, INTENT_TRAIN];
    let slots = ["title", "artist", "city", "poi"];
    for intent in intents {
        if intent_counts.get(intent).copied().unwrap_or(0) < 20 {
            return Err(Error::invalid(format!(
                "size {size} too small to cover all labels: intent {intent} appears fewer than 20 times"
            )));
        }
    }
    for slot in slots {
        if slot_counts.get(slot).copied().unwrap_or(0) < 20 {
            return Err(Error::invalid(format!(
                "size {size} too small to cover all labels: slot {slot} appears fewer than 20 times"
            )));
        }
    }

    Ok(SynthCorpus {
        train,
        valid,
        test,
        metadata: SynthMetadata {
            seed,
            size,
            ambiguity_rate,
            intent_counts,
            slot_counts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::argmax_lowest;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = synth_generate(7, 400, 0.5).unwrap();
        let b = synth_generate(7, 400, 0.5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        let c = synth_generate(8, 400, 0.5).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_sizes_follow_request() {
        let c = synth_generate(1, 400, 0.3).unwrap();
        assert_eq!(c.train.len(), 400);
        assert_eq!(c.valid.len(), 50);
        assert_eq!(c.test.len(), 50);
    }

    #[test]
    fn records_validate_against_the_manifest() {
        let manifest = synth_manifest();
        let c = synth_generate(3, 400, 0.5).unwrap();
        for record in c.train.iter().chain(&c.valid).chain(&c.test) {
            record.validate(&manifest).unwrap();
        }
    }

    #[test]
    fn all_labels_covered_and_counted() {
        let c = synth_generate(5, 800, 0.5).unwrap();
        for intent in [INTENT_MUSIC, INTENT_VIDEO, INTENT_FLIGHT, INTENT_TRAIN] {
            assert!(c.metadata.intent_counts[intent] >= 20, "{intent}");
        }
        for slot in ["title", "artist", "city", "poi"] {
            assert!(c.metadata.slot_counts[slot] >= 20, "{slot}");
        }
        let total: usize = c.metadata.intent_counts.values().sum();
        assert_eq!(total, 800);
    }

    #[test]
    fn tiny_size_is_rejected_for_coverage() {
        assert!(synth_generate(1, 30, 0.5).is_err());
        assert!(synth_generate(1, 0, 0.5).is_err());
    }

    #[test]
    fn profiles_always_agree_with_gold_labels() {
        let c = synth_generate(11, 800, 0.7).unwrap();
        for record in &c.train {
            let media = &record.profile.up[0];
            let transport = &record.profile.up[1];
            let locality = &record.profile.ca[0];
            match record.intent.as_str() {
                INTENT_MUSIC => assert_eq!(argmax_lowest(media), 0),
                INTENT_VIDEO => assert_eq!(argmax_lowest(media), 1),
                INTENT_FLIGHT => assert_eq!(argmax_lowest(transport), 0),
                INTENT_TRAIN => assert_eq!(argmax_lowest(transport), 1),
                other => panic!("unexpected intent {other}"),
            }
            for span in crate::bio::bio_decode_spans(&record.tags).unwrap() {
                match span.label.as_str() {
                    "city" => assert_eq!(argmax_lowest(locality), 0),
                    "poi" => assert_eq!(argmax_lowest(locality), 1),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn zero_ambiguity_keeps_openers_unambiguous() {
        let c = synth_generate(13, 400, 0.0).unwrap();
        for record in &c.train {
            let first = record.tokens[0].as_str();
            // The ambiguous openers never appear at rate zero.
            assert!(first != "play" && first != "put", "{:?}", record.tokens);
            if first == "get" || (first == "book" && record.tokens[1] == "a" && record.tokens[2] == "ticket") {
                panic!("ambiguous travel opener at rate 0: {:?}", record.tokens);
            }
        }
    }

    #[test]
    fn full_ambiguity_only_uses_ambiguous_openers() {
        let c = synth_generate(17, 400, 1.0).unwrap();
        for record in &c.train {
            let opener: Vec<&str> = record.tokens.iter().map(|s| s.as_str()).take(4).collect();
            let ok = opener.starts_with(&["play"])
                || opener.starts_with(&["put", "on"])
                || opener.starts_with(&["book", "a", "ticket", "to"])
                || opener.starts_with(&["get", "me", "to"]);
            assert!(ok, "{:?}", record.tokens);
        }
    }

    #[test]
    fn rejects_out_of_range_ambiguity() {
        assert!(synth_generate(1, 400, 1.5).is_err());
        assert!(synth_generate(1, 400, -0.1).is_err());
    }
}
