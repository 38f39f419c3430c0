//! Handcrafted essay features: length statistics, readability and
//! punctuation indices, lexicon sentiment counts and lexical variation.
//!
//! The vector layout is fixed at [`FEATURE_DIM`] entries and described by
//! [`FEATURE_SCHEMA`]; `assets/feature_schema.json` is the machine-readable
//! copy of that table.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EssayRecord;
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 86;
pub const SCHEMA_VERSION: &str = "handcrafted-v1";

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Length,
    Readability,
    Sentiment,
    Variation,
}

use FeatureGroup::*;

pub const FEATURE_SCHEMA: [(&str, FeatureGroup); FEATURE_DIM] = [
    ("token_count", Length),
    ("word_count", Length),
    ("char_count", Length),
    ("sentence_count", Length),
    ("mean_word_length", Length),
    ("std_word_length", Length),
    ("mean_sentence_length", Length),
    ("std_sentence_length", Length),
    ("max_sentence_length", Length),
    ("min_sentence_length", Length),
    ("log_word_count", Length),
    ("sqrt_word_count", Length),
    ("long_word_count", Length),
    ("short_word_count", Length),
    ("word_length_share_1", Length),
    ("word_length_share_2", Length),
    ("word_length_share_3", Length),
    ("word_length_share_4", Length),
    ("word_length_share_5", Length),
    ("word_length_share_6", Length),
    ("word_length_share_7", Length),
    ("word_length_share_8", Length),
    ("word_length_share_9", Length),
    ("word_length_share_10", Length),
    ("word_length_share_11", Length),
    ("word_length_share_12", Length),
    ("word_length_share_13", Length),
    ("word_length_share_14", Length),
    ("word_length_share_15_plus", Length),
    ("syllable_count", Readability),
    ("mean_syllables_per_word", Readability),
    ("polysyllable_count", Readability),
    ("polysyllable_ratio", Readability),
    ("flesch_reading_ease", Readability),
    ("flesch_kincaid_grade", Readability),
    ("gunning_fog", Readability),
    ("smog_index", Readability),
    ("automated_readability_index", Readability),
    ("coleman_liau_index", Readability),
    ("lix", Readability),
    ("rix", Readability),
    ("mean_chars_per_sentence", Readability),
    ("comma_count", Readability),
    ("period_count", Readability),
    ("question_count", Readability),
    ("exclamation_count", Readability),
    ("semicolon_count", Readability),
    ("colon_count", Readability),
    ("quote_count", Readability),
    ("dash_count", Readability),
    ("parenthesis_count", Readability),
    ("other_symbol_count", Readability),
    ("commas_per_sentence", Readability),
    ("positive_count", Sentiment),
    ("negative_count", Sentiment),
    ("positive_ratio", Sentiment),
    ("negative_ratio", Sentiment),
    ("polarity_score", Sentiment),
    ("subjectivity", Sentiment),
    ("negator_count", Sentiment),
    ("polarity_balance", Sentiment),
    ("type_count", Variation),
    ("type_token_ratio", Variation),
    ("root_ttr", Variation),
    ("corrected_ttr", Variation),
    ("log_ttr", Variation),
    ("uber_index", Variation),
    ("yules_k", Variation),
    ("hapax_count", Variation),
    ("hapax_ratio", Variation),
    ("dis_legomena_ratio", Variation),
    ("stopword_ratio", Variation),
    ("lexical_density", Variation),
    ("bigram_type_ratio", Variation),
    ("trigram_type_ratio", Variation),
    ("capitalized_ratio", Variation),
    ("all_caps_ratio", Variation),
    ("digit_token_ratio", Variation),
    ("mean_repetition", Variation),
    ("max_word_share", Variation),
    ("first_person_rate", Variation),
    ("second_person_rate", Variation),
    ("third_person_rate", Variation),
    ("conjunction_rate", Variation),
    ("transition_rate", Variation),
    ("sentence_starter_variety", Variation),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    pub group: FeatureGroup,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaManifest {
    pub schema_version: String,
    pub features: Vec<SchemaEntry>,
}

pub fn schema_manifest() -> SchemaManifest {
    SchemaManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        features: FEATURE_SCHEMA
            .iter()
            .enumerate()
            .map(|(index, (name, group))| SchemaEntry {
                name: name.to_string(),
                group: *group,
                index,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema_version: String,
}

const BUNDLED_LEXICON: &str = include_str!("../assets/sentiment_lexicon.txt");

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
];
const NEGATORS: &[&str] = &[
    "not", "no", "never", "none", "nothing", "nobody", "neither", "nor", "nowhere", "cannot",
];
const FIRST_PERSON: &[&str] = &["i", "me", "my", "mine", "myself", "we", "us", "our", "ours"];
const SECOND_PERSON: &[&str] = &["you", "your", "yours", "yourself", "yourselves"];
const THIRD_PERSON: &[&str] = &[
    "he", "him", "his", "she", "her", "hers", "it", "its", "they", "them", "their", "theirs",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "or", "nor", "for", "yet", "so", "because", "although", "while"];
const TRANSITIONS: &[&str] = &[
    "however", "therefore", "furthermore", "moreover", "consequently", "additionally", "finally",
    "first", "second", "third", "also", "thus", "hence", "meanwhile", "overall", "instead",
    "similarly", "nevertheless", "besides", "conclusion",
];

/// Word polarity lookup.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    polarity: HashMap<String, i8>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon parses")
    }

    /// Parses `word polarity` lines; polarity is `positive`, `negative`,
    /// `+1`, `1` or `-1`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut polarity = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(word), Some(pol), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: i as u64 + 1,
                    message: format!("expected `word polarity`, got {line:?}"),
                });
            };
            let value = match pol {
                "positive" | "+1" | "1" => 1,
                "negative" | "-1" => -1,
                other => {
                    return Err(Error::Parse {
                        line: i as u64 + 1,
                        message: format!("unknown polarity {other:?}"),
                    })
                }
            };
            polarity.insert(word.to_lowercase(), value);
        }
        Ok(Lexicon { polarity })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn polarity(&self, word: &str) -> i8 {
        self.polarity.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }
}

/// Anything that maps a token sequence to a fixed-width feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, tokens: &[String]) -> FeatureVector;
}

/// The default 86-feature extractor.
#[derive(Debug, Clone)]
pub struct HandcraftedFeatures {
    lexicon: Lexicon,
}

impl Default for HandcraftedFeatures {
    fn default() -> Self {
        HandcraftedFeatures {
            lexicon: Lexicon::bundled(),
        }
    }
}

impl HandcraftedFeatures {
    pub fn with_lexicon(lexicon: Lexicon) -> Self {
        HandcraftedFeatures { lexicon }
    }
}

impl FeatureExtractor for HandcraftedFeatures {
    fn extract(&self, tokens: &[String]) -> FeatureVector {
        extract_with(tokens, &self.lexicon)
    }
}

/// Extracts features with the bundled lexicon.
pub fn extract_features(tokens: &[String]) -> FeatureVector {
    thread_local! {
        static DEFAULT: HandcraftedFeatures = HandcraftedFeatures::default();
    }
    DEFAULT.with(|f| f.extract(tokens))
}

fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

fn syllables(word: &str) -> usize {
    let lower: Vec<char> = word.to_lowercase().chars().filter(|c| c.is_alphabetic()).collect();
    if lower.is_empty() {
        return 1;
    }
    let vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut count = 0;
    let mut prev = false;
    for &c in &lower {
        let v = vowel(c);
        if v && !prev {
            count += 1;
        }
        prev = v;
    }
    let n = lower.len();
    if count > 1 && lower[n - 1] == 'e' && !(n >= 2 && lower[n - 2] == 'l') {
        count -= 1;
    }
    count.max(1)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn extract_with(tokens: &[String], lexicon: &Lexicon) -> FeatureVector {
    let mut f = Vec::with_capacity(FEATURE_DIM);

    let words: Vec<&str> = tokens.iter().map(String::as_str).filter(|t| is_word(t)).collect();
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let nw = words.len() as f64;

    // sentences as word counts; terminators close a sentence
    let mut sentence_lengths: Vec<f64> = Vec::new();
    let mut sentence_chars: Vec<f64> = Vec::new();
    let mut starters: HashSet<String> = HashSet::new();
    let (mut cur_words, mut cur_chars) = (0usize, 0usize);
    for t in tokens {
        if is_word(t) {
            if cur_words == 0 {
                starters.insert(t.to_lowercase());
            }
            cur_words += 1;
            cur_chars += t.chars().count();
        } else if matches!(t.as_str(), "." | "!" | "?") && cur_words > 0 {
            sentence_lengths.push(cur_words as f64);
            sentence_chars.push(cur_chars as f64);
            cur_words = 0;
            cur_chars = 0;
        }
    }
    if cur_words > 0 {
        sentence_lengths.push(cur_words as f64);
        sentence_chars.push(cur_chars as f64);
    }
    let ns = sentence_lengths.len() as f64;

    let word_lengths: Vec<f64> = words.iter().map(|w| w.chars().count() as f64).collect();
    let nchars: f64 = word_lengths.iter().sum();
    let (wl_mean, wl_std) = mean_std(&word_lengths);
    let (sl_mean, sl_std) = mean_std(&sentence_lengths);
    let long_words = word_lengths.iter().filter(|&&l| l >= 7.0).count() as f64;
    let short_words = word_lengths.iter().filter(|&&l| l <= 3.0).count() as f64;

    // length
    f.push(tokens.len() as f64);
    f.push(nw);
    f.push(nchars);
    f.push(ns);
    f.push(wl_mean);
    f.push(wl_std);
    f.push(sl_mean);
    f.push(sl_std);
    f.push(sentence_lengths.iter().copied().fold(0.0, f64::max));
    f.push(if ns > 0.0 {
        sentence_lengths.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    });
    f.push(nw.ln_1p());
    f.push(nw.sqrt());
    f.push(long_words);
    f.push(short_words);
    let mut hist = [0.0; 15];
    for &l in &word_lengths {
        hist[(l as usize).clamp(1, 15) - 1] += 1.0;
    }
    f.extend(hist.iter().map(|&c| ratio(c, nw)));

    // readability
    let syl: Vec<usize> = words.iter().map(|w| syllables(w)).collect();
    let total_syl = syl.iter().sum::<usize>() as f64;
    let poly = syl.iter().filter(|&&s| s >= 3).count() as f64;
    let wps = ratio(nw, ns);
    let spw = ratio(total_syl, nw);
    let has_words = nw > 0.0;
    f.push(total_syl);
    f.push(spw);
    f.push(poly);
    f.push(ratio(poly, nw));
    f.push(if has_words { 206.835 - 1.015 * wps - 84.6 * spw } else { 0.0 });
    f.push(if has_words { 0.39 * wps + 11.8 * spw - 15.59 } else { 0.0 });
    f.push(if has_words { 0.4 * (wps + 100.0 * poly / nw) } else { 0.0 });
    f.push(if has_words { 1.043 * (poly * 30.0 / ns).sqrt() + 3.1291 } else { 0.0 });
    f.push(if has_words { 4.71 * nchars / nw + 0.5 * wps - 21.43 } else { 0.0 });
    f.push(if has_words {
        0.0588 * (100.0 * nchars / nw) - 0.296 * (100.0 * ns / nw) - 15.8
    } else {
        0.0
    });
    let very_long = word_lengths.iter().filter(|&&l| l > 6.0).count() as f64;
    f.push(if has_words { wps + 100.0 * very_long / nw } else { 0.0 });
    f.push(ratio(very_long, ns));
    f.push(ratio(sentence_chars.iter().sum(), ns));

    let count = |set: &[&str]| tokens.iter().filter(|t| set.contains(&t.as_str())).count() as f64;
    let commas = count(&[","]);
    f.push(commas);
    f.push(count(&["."]));
    f.push(count(&["?"]));
    f.push(count(&["!"]));
    f.push(count(&[";"]));
    f.push(count(&[":"]));
    f.push(count(&["\"", "“", "”", "'", "‘", "’"]));
    f.push(count(&["-", "–", "—"]));
    f.push(count(&["(", ")", "[", "]"]));
    let known = [
        ",", ".", "?", "!", ";", ":", "\"", "“", "”", "'", "‘", "’", "-", "–", "—", "(", ")", "[",
        "]",
    ];
    f.push(
        tokens
            .iter()
            .filter(|t| !is_word(t) && !known.contains(&t.as_str()))
            .count() as f64,
    );
    f.push(ratio(commas, ns));

    // sentiment
    let pos = lower.iter().filter(|w| lexicon.polarity(w) > 0).count() as f64;
    let neg = lower.iter().filter(|w| lexicon.polarity(w) < 0).count() as f64;
    let negators = lower
        .iter()
        .filter(|w| NEGATORS.contains(&w.as_str()) || w.ends_with("n't"))
        .count() as f64;
    f.push(pos);
    f.push(neg);
    f.push(ratio(pos, nw));
    f.push(ratio(neg, nw));
    f.push(ratio(pos - neg, nw));
    f.push(ratio(pos + neg, nw));
    f.push(negators);
    f.push(ratio(pos - neg, pos + neg));

    // variation
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for w in &lower {
        *freq.entry(w.as_str()).or_default() += 1;
    }
    let types = freq.len() as f64;
    let hapax = freq.values().filter(|&&c| c == 1).count() as f64;
    let dis = freq.values().filter(|&&c| c == 2).count() as f64;
    let stop = lower.iter().filter(|w| STOPWORDS.contains(&w.as_str())).count() as f64;
    f.push(types);
    f.push(ratio(types, nw));
    f.push(ratio(types, nw.sqrt()));
    f.push(ratio(types, (2.0 * nw).sqrt()));
    f.push(if nw > 1.0 { types.ln() / nw.ln() } else { 0.0 });
    f.push(if nw > 1.0 && types < nw {
        nw.ln().powi(2) / (nw.ln() - types.ln())
    } else {
        0.0
    });
    let sum_sq: f64 = freq.values().map(|&c| (c * c) as f64).sum();
    f.push(if has_words { 1e4 * (sum_sq - nw) / (nw * nw) } else { 0.0 });
    f.push(hapax);
    f.push(ratio(hapax, nw));
    f.push(ratio(dis, nw));
    f.push(ratio(stop, nw));
    f.push(if has_words { 1.0 - stop / nw } else { 0.0 });
    let ngram_ratio = |n: usize| -> f64 {
        if lower.len() < n {
            return 0.0;
        }
        let grams: HashSet<&[String]> = lower.windows(n).collect();
        grams.len() as f64 / (lower.len() - n + 1) as f64
    };
    f.push(ngram_ratio(2));
    f.push(ngram_ratio(3));
    let capitalized = words
        .iter()
        .filter(|w| w.chars().next().is_some_and(char::is_uppercase))
        .count() as f64;
    let all_caps = words
        .iter()
        .filter(|w| {
            w.chars().filter(|c| c.is_alphabetic()).count() > 1
                && w.chars().filter(|c| c.is_alphabetic()).all(char::is_uppercase)
        })
        .count() as f64;
    let digits = words
        .iter()
        .filter(|w| w.chars().any(|c| c.is_ascii_digit()))
        .count() as f64;
    f.push(ratio(capitalized, nw));
    f.push(ratio(all_caps, nw));
    f.push(ratio(digits, nw));
    f.push(ratio(nw, types));
    f.push(ratio(freq.values().copied().max().unwrap_or(0) as f64, nw));
    let rate = |set: &[&str]| ratio(lower.iter().filter(|w| set.contains(&w.as_str())).count() as f64, nw);
    f.push(rate(FIRST_PERSON));
    f.push(rate(SECOND_PERSON));
    f.push(rate(THIRD_PERSON));
    f.push(rate(CONJUNCTIONS));
    f.push(rate(TRANSITIONS));
    f.push(ratio(starters.len() as f64, ns));

    debug_assert_eq!(f.len(), FEATURE_DIM);
    FeatureVector {
        values: f,
        schema_version: SCHEMA_VERSION.to_string(),
    }
}

/// Per-dimension mean and standard deviation fit on source essays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub enabled: bool,
}

impl Standardizer {
    /// Pass-through standardizer of width `dim`.
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            enabled: false,
        }
    }

    /// Fits population statistics over `vectors`; needs at least two.
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Config(format!(
                "standardizer needs at least 2 source essays, got {}",
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Contract("feature vectors differ in width".into()));
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer {
            mean,
            std,
            enabled: true,
        })
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return values.to_vec();
        }
        values
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Fits the standardizer over the handcrafted features of `source_records`.
pub fn fit_standardizer(source_records: &[EssayRecord]) -> Result<Standardizer> {
    let vectors: Vec<Vec<f64>> = source_records
        .iter()
        .map(|r| extract_features(&r.tokens).values)
        .collect();
    Standardizer::fit(&vectors)
}
