//! Generated cross-topic corpora with known grade structure.
//!
//! Every essay belongs to one of four grade classes. Tokens are a mix of
//! grade words (class-specific), topic words (topic-specific) and filler.
//! Token and essay names are alphanumeric so they survive tokenization.
//! Higher grades write longer essays. The last topic is the target; `shift`
//! dilutes its grade words and lengthens its essays.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EssayRecord, Genre, ScoreRange, TopicRegistry, TopicSpec, Trait, NUM_GRADES, NUM_TRAITS};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_sources: usize,
    pub essays_per_topic: usize,
    /// Target shift strength in `[0, 1]`.
    pub shift: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub grade_word_rate: f64,
    pub topic_word_rate: f64,
    pub grade_vocab: usize,
    pub topic_vocab: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_sources: 2,
            essays_per_topic: 400,
            shift: 0.3,
            min_len: 40,
            max_len: 100,
            grade_word_rate: 0.25,
            topic_word_rate: 0.5,
            grade_vocab: 25,
            topic_vocab: 40,
            filler_vocab: 200,
            seed: 0,
        }
    }
}

/// Score range of every synthetic trait.
pub const SYNTHETIC_RANGE: ScoreRange = ScoreRange { min: 0, max: 20 };

const SYNTHETIC_TRAITS: [Trait; 4] = [Trait::Holistic, Trait::Content, Trait::Organization, Trait::Conventions];

/// Registry for topics `1..=num_sources + 1`.
pub fn synthetic_registry(num_topics: usize) -> TopicRegistry {
    let topics = (1..=num_topics as u32)
        .map(|topic_id| TopicSpec {
            topic_id,
            genre: Genre::Argumentative,
            score_min: SYNTHETIC_RANGE.min,
            score_max: SYNTHETIC_RANGE.max,
            traits: SYNTHETIC_TRAITS.to_vec(),
            max_length: None,
            trait_ranges: BTreeMap::new(),
        })
        .collect();
    TopicRegistry::new(topics).expect("synthetic registry is valid")
}

/// Unit-interval bin bounds of each grade class.
fn class_bounds(class: usize) -> (f64, f64) {
    match class {
        0 => (0.0, 0.4),
        1 => (0.4, 0.6),
        2 => (0.6, 0.8),
        _ => (0.8, 1.0),
    }
}

/// Generates labeled records for every topic (target last) plus the registry.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<EssayRecord>, TopicRegistry)> {
    if spec.num_sources == 0 || spec.essays_per_topic < 2 {
        return Err(Error::Config("synthetic corpus needs >= 1 source and >= 2 essays per topic".into()));
    }
    if spec.min_len == 0 || spec.max_len < spec.min_len {
        return Err(Error::Config("synthetic length range is empty".into()));
    }
    if !(0.0..=1.0).contains(&spec.shift) || spec.grade_word_rate + spec.topic_word_rate > 1.0 {
        return Err(Error::Config("synthetic rates must lie in [0, 1]".into()));
    }
    let num_topics = spec.num_sources + 1;
    let registry = synthetic_registry(num_topics);
    let mut records = Vec::with_capacity(num_topics * spec.essays_per_topic);
    for topic_id in 1..=num_topics as u32 {
        let topic = registry.get(topic_id)?;
        let is_target = topic_id as usize == num_topics;
        let mut rng = rng::stream(spec.seed, streams::SYNTHETIC, u64::from(topic_id));
        let (grade_rate, len_scale) = if is_target {
            (spec.grade_word_rate * (1.0 - 0.5 * spec.shift), 1.0 + 0.5 * spec.shift)
        } else {
            (spec.grade_word_rate, 1.0)
        };
        for k in 0..spec.essays_per_topic {
            let class = k % NUM_GRADES;
            let (lo, hi) = class_bounds(class);
            let span = f64::from(SYNTHETIC_RANGE.max - SYNTHETIC_RANGE.min);
            let holistic = loop {
                let u: f64 = rng.random_range(lo..hi);
                let raw = (u * span).floor() as i32;
                if crate::corpus::score_to_class(f64::from(raw) / span) as usize == class {
                    break raw;
                }
            };
            let mut raw = [None; NUM_TRAITS];
            raw[Trait::Holistic.index()] = Some(holistic);
            for t in &SYNTHETIC_TRAITS[1..] {
                let jitter: i32 = rng.random_range(-2..=2);
                raw[t.index()] = Some((holistic + jitter).clamp(SYNTHETIC_RANGE.min, SYNTHETIC_RANGE.max));
            }
            let frac = class as f64 / (NUM_GRADES - 1) as f64;
            let base = spec.min_len as f64 + frac * (spec.max_len - spec.min_len) as f64;
            let len = ((base * len_scale) * rng.random_range(0.85..1.15)).round().max(1.0) as usize;
            let tokens = (0..len)
                .map(|_| {
                    let r: f64 = rng.random();
                    if r < grade_rate {
                        format!("grade{class}w{}", rng.random_range(0..spec.grade_vocab))
                    } else if r < grade_rate + spec.topic_word_rate {
                        format!("topic{topic_id}w{}", rng.random_range(0..spec.topic_vocab))
                    } else {
                        format!("w{}", rng.random_range(0..spec.filler_vocab))
                    }
                })
                .collect();
            records.push(EssayRecord::labeled(format!("t{topic_id}-{k:04}"), topic, tokens, raw)?);
        }
    }
    Ok((records, registry))
}
