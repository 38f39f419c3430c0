//! Essay ingestion, score normalization, grade binning and leave-one-topic-out
//! splits.
//!
//! Scores are carried in two forms: the integer rating a human rater gave
//! (`raw_scores`) and the same rating mapped linearly onto `[0, 1]` using the
//! topic's declared range (`unit_scores`). Training works on unit scores;
//! evaluation maps predictions back to integer ratings.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of traits in the global vocabulary.
pub const NUM_TRAITS: usize = 9;

/// Number of grade classes (poor, moderate, good, excellent).
pub const NUM_GRADES: usize = 4;

/// Global trait vocabulary. Holistic is always index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Trait {
    Holistic,
    Content,
    Organization,
    WordChoice,
    SentenceFluency,
    Conventions,
    TopicAdherence,
    Language,
    Narrativity,
}

impl Trait {
    pub const ALL: [Trait; NUM_TRAITS] = [
        Trait::Holistic,
        Trait::Content,
        Trait::Organization,
        Trait::WordChoice,
        Trait::SentenceFluency,
        Trait::Conventions,
        Trait::TopicAdherence,
        Trait::Language,
        Trait::Narrativity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Trait> {
        Trait::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Trait::Holistic => "Holistic",
            Trait::Content => "Content",
            Trait::Organization => "Organization",
            Trait::WordChoice => "WordChoice",
            Trait::SentenceFluency => "SentenceFluency",
            Trait::Conventions => "Conventions",
            Trait::TopicAdherence => "TopicAdherence",
            Trait::Language => "Language",
            Trait::Narrativity => "Narrativity",
        }
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Trait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Trait::ALL
            .iter()
            .copied()
            .find(|t| t.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Registry(format!("unknown trait name {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Genre {
    Argumentative,
    SourceDependent,
    Narrative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: i32,
    pub max: i32,
}

impl ScoreRange {
    pub fn new(min: i32, max: i32) -> Self {
        ScoreRange { min, max }
    }

    pub fn contains(&self, raw: i32) -> bool {
        (self.min..=self.max).contains(&raw)
    }

    /// Number of distinct integer ratings in the range.
    pub fn num_ratings(&self) -> usize {
        (self.max - self.min + 1) as usize
    }
}

/// Per-topic metadata: score range, genre and the traits raters scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicSpec {
    pub topic_id: u32,
    pub genre: Genre,
    pub score_min: i32,
    pub score_max: i32,
    /// Ordered trait list; must contain Holistic.
    pub traits: Vec<Trait>,
    /// Token budget for essays of this topic; longer essays lose their tail.
    #[serde(default)]
    pub max_length: Option<usize>,
    /// Optional per-trait overrides of the topic range.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub trait_ranges: BTreeMap<Trait, ScoreRange>,
}

impl TopicSpec {
    pub fn score_range(&self) -> ScoreRange {
        ScoreRange::new(self.score_min, self.score_max)
    }

    /// Range used for `trait_`; the topic range unless overridden.
    pub fn range_for(&self, trait_: Trait) -> ScoreRange {
        self.trait_ranges
            .get(&trait_)
            .copied()
            .unwrap_or_else(|| self.score_range())
    }

    pub fn has_trait(&self, trait_: Trait) -> bool {
        self.traits.contains(&trait_)
    }

    pub fn trait_mask(&self) -> [bool; NUM_TRAITS] {
        let mut mask = [false; NUM_TRAITS];
        for t in &self.traits {
            mask[t.index()] = true;
        }
        mask
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.topic_id;
        if self.score_max <= self.score_min {
            return Err(Error::Registry(format!(
                "topic {id}: score_max {} must exceed score_min {}",
                self.score_max, self.score_min
            )));
        }
        for (t, r) in &self.trait_ranges {
            if r.max <= r.min {
                return Err(Error::Registry(format!(
                    "topic {id}: range for {t} has max {} <= min {}",
                    r.max, r.min
                )));
            }
        }
        if !self.traits.contains(&Trait::Holistic) {
            return Err(Error::Registry(format!("topic {id}: trait list lacks Holistic")));
        }
        let unique: BTreeSet<_> = self.traits.iter().collect();
        if unique.len() != self.traits.len() {
            return Err(Error::Registry(format!("topic {id}: duplicate trait names")));
        }
        if self.max_length == Some(0) {
            return Err(Error::Registry(format!("topic {id}: max_length must be positive")));
        }
        Ok(())
    }
}

pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicRegistry {
    pub schema_version: u32,
    #[serde(rename = "topic")]
    pub topics: Vec<TopicSpec>,
}

impl TopicRegistry {
    pub fn new(topics: Vec<TopicSpec>) -> Result<Self> {
        let registry = TopicRegistry {
            schema_version: REGISTRY_SCHEMA_VERSION,
            topics,
        };
        registry.validate()?;
        Ok(registry)
    }

    /// The eight ASAP++ topics with their score ranges, genres, trait sets and
    /// length budgets. The topic range is applied to every trait.
    pub fn asap_plus_plus() -> Self {
        use Trait::*;
        let arg = vec![
            Holistic,
            Content,
            Organization,
            WordChoice,
            SentenceFluency,
            Conventions,
        ];
        let src = vec![Holistic, Content, TopicAdherence, Language, Narrativity];
        let rows: [(u32, Genre, i32, i32, Vec<Trait>, usize); 8] = [
            (1, Genre::Argumentative, 2, 12, arg.clone(), 350),
            (2, Genre::Argumentative, 1, 6, arg.clone(), 350),
            (3, Genre::SourceDependent, 0, 3, src.clone(), 150),
            (4, Genre::SourceDependent, 0, 3, src.clone(), 150),
            (5, Genre::SourceDependent, 0, 4, src.clone(), 150),
            (6, Genre::SourceDependent, 0, 4, src, 150),
            (
                7,
                Genre::Narrative,
                0,
                30,
                vec![Holistic, Content, Organization, Conventions],
                250,
            ),
            (8, Genre::Narrative, 0, 60, arg, 650),
        ];
        let topics = rows
            .into_iter()
            .map(|(topic_id, genre, score_min, score_max, traits, len)| TopicSpec {
                topic_id,
                genre,
                score_min,
                score_max,
                traits,
                max_length: Some(len),
                trait_ranges: BTreeMap::new(),
            })
            .collect();
        TopicRegistry {
            schema_version: REGISTRY_SCHEMA_VERSION,
            topics,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let registry: TopicRegistry =
            toml::from_str(text).map_err(|e| Error::Registry(e.to_string()))?;
        registry.validate()?;
        Ok(registry)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("registry serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REGISTRY_SCHEMA_VERSION {
            return Err(Error::Registry(format!(
                "unsupported registry schema_version {} (expected {REGISTRY_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for t in &self.topics {
            t.validate()?;
            if !seen.insert(t.topic_id) {
                return Err(Error::Registry(format!("duplicate topic_id {}", t.topic_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, topic_id: u32) -> Result<&TopicSpec> {
        self.topics
            .iter()
            .find(|t| t.topic_id == topic_id)
            .ok_or_else(|| Error::Registry(format!("unknown topic_id {topic_id}")))
    }

    pub fn topic_ids(&self) -> Vec<u32> {
        self.topics.iter().map(|t| t.topic_id).collect()
    }
}

/// Splits text into word and punctuation tokens. Apostrophes inside words
/// stay attached (`don't` is one token).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let inner_apostrophe = c == '\''
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_apostrophe {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// One essay. For labeled essays `unit_scores[j]`, `raw_scores[j]` and
/// `trait_mask[j]` are either all present or all absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub topic_id: u32,
    pub tokens: Vec<String>,
    pub raw_scores: [Option<i32>; NUM_TRAITS],
    pub unit_scores: [Option<f64>; NUM_TRAITS],
    pub grade_class: Option<u8>,
    pub trait_mask: [bool; NUM_TRAITS],
}

impl EssayRecord {
    /// Builds a labeled record from raw trait scores, normalizing against the
    /// topic's ranges. Scores for traits outside the topic's trait set are
    /// dropped.
    pub fn labeled(
        essay_id: impl Into<String>,
        topic: &TopicSpec,
        tokens: Vec<String>,
        raw: [Option<i32>; NUM_TRAITS],
    ) -> Result<Self> {
        let essay_id = essay_id.into();
        let mut raw_scores = [None; NUM_TRAITS];
        let mut unit_scores = [None; NUM_TRAITS];
        let mut trait_mask = [false; NUM_TRAITS];
        for t in Trait::ALL {
            let j = t.index();
            let Some(r) = raw[j] else { continue };
            if !topic.has_trait(t) {
                continue;
            }
            let unit = normalize_score(r, topic.range_for(t)).map_err(|e| match e {
                Error::Range { raw, min, max, .. } => Error::Range {
                    raw,
                    min,
                    max,
                    context: Some(format!("essay {essay_id}, trait {t}")),
                },
                other => other,
            })?;
            raw_scores[j] = Some(r);
            unit_scores[j] = Some(unit);
            trait_mask[j] = true;
        }
        let grade_class = unit_scores[Trait::Holistic.index()].map(score_to_class);
        Ok(EssayRecord {
            essay_id,
            topic_id: topic.topic_id,
            tokens,
            raw_scores,
            unit_scores,
            grade_class,
            trait_mask,
        })
    }

    /// Copy with all labels removed.
    pub fn unlabeled(&self) -> Self {
        EssayRecord {
            essay_id: self.essay_id.clone(),
            topic_id: self.topic_id,
            tokens: self.tokens.clone(),
            raw_scores: [None; NUM_TRAITS],
            unit_scores: [None; NUM_TRAITS],
            grade_class: None,
            trait_mask: [false; NUM_TRAITS],
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.trait_mask.iter().any(|&m| m)
    }
}

/// Maps a raw rating onto `[0, 1]`.
pub fn normalize_score(raw: i32, range: ScoreRange) -> Result<f64> {
    if range.max <= range.min {
        return Err(Error::Contract(format!(
            "degenerate score range [{}, {}]",
            range.min, range.max
        )));
    }
    if !range.contains(raw) {
        return Err(Error::Range {
            raw: raw as i64,
            min: range.min as i64,
            max: range.max as i64,
            context: None,
        });
    }
    Ok(f64::from(raw - range.min) / f64::from(range.max - range.min))
}

/// Inverse of [`normalize_score`], rounding half away from zero and clamping
/// into the range.
pub fn denormalize_score(unit: f64, range: ScoreRange) -> i32 {
    debug_assert!((0.0..=1.0).contains(&unit), "unit score {unit} outside [0,1]");
    let value = (unit * f64::from(range.max - range.min) + f64::from(range.min)).round();
    (value as i32).clamp(range.min, range.max)
}

/// Grade bins `[0,0.4) [0.4,0.6) [0.6,0.8) [0.8,1]` mapped to 0..=3, higher
/// is better.
pub fn score_to_class(unit: f64) -> u8 {
    debug_assert!((0.0..=1.0).contains(&unit), "unit score {unit} outside [0,1]");
    if unit < 0.4 {
        0
    } else if unit < 0.6 {
        1
    } else if unit < 0.8 {
        2
    } else {
        3
    }
}

pub const GRADE_NAMES: [&str; NUM_GRADES] = ["poor", "moderate", "good", "excellent"];

/// Reads a tab-separated essay file: `essay_id`, `topic_id`, essay text, then
/// one column per trait named in the header (empty cell means absent).
pub fn load_dataset(path: impl AsRef<Path>, registry: &TopicRegistry) -> Result<Vec<EssayRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_dataset(file, registry)
}

pub fn read_dataset<R: Read>(reader: R, registry: &TopicRegistry) -> Result<Vec<EssayRecord>> {
    scan_dataset(reader, registry, true).map_err(|mut errors| errors.remove(0))
}

/// Checks every row and returns all problems found, in file order.
pub fn validate_dataset<R: Read>(reader: R, registry: &TopicRegistry) -> Vec<Error> {
    scan_dataset(reader, registry, false).err().unwrap_or_default()
}

fn scan_dataset<R: Read>(
    reader: R,
    registry: &TopicRegistry,
    stop_at_first: bool,
) -> std::result::Result<Vec<EssayRecord>, Vec<Error>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(r) => r.map_err(|e| vec![csv_error(e, 1)])?,
        None => {
            return Err(vec![Error::Parse {
                line: 1,
                message: "missing header row".into(),
            }])
        }
    };
    let columns: Vec<String> = header.iter().map(|c| c.trim().to_string()).collect();
    let trait_columns = parse_header(&columns).map_err(|e| vec![e])?;

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, row) in rows.enumerate() {
        let line = i as u64 + 2;
        let parsed = row
            .map_err(|e| csv_error(e, line))
            .and_then(|row| parse_row(&row, line, columns.len(), &trait_columns, registry, &mut seen_ids));
        match parsed {
            Ok(Some(record)) => records.push(record),
            Ok(None) => {}
            Err(e) => {
                errors.push(e);
                if stop_at_first {
                    break;
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(errors)
    }
}

fn parse_header(columns: &[String]) -> Result<Vec<Trait>> {
    if columns.len() < 3 || columns[0] != "essay_id" || columns[1] != "topic_id" {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must start with essay_id, topic_id, text; got {columns:?}"),
        });
    }
    let mut trait_columns = Vec::new();
    for name in &columns[3..] {
        let t: Trait = name.parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("unknown trait column {name:?}"),
        })?;
        if trait_columns.contains(&t) {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate trait column {name:?}"),
            });
        }
        trait_columns.push(t);
    }
    Ok(trait_columns)
}

fn parse_row(
    row: &csv::StringRecord,
    line: u64,
    width: usize,
    trait_columns: &[Trait],
    registry: &TopicRegistry,
    seen_ids: &mut HashSet<String>,
) -> Result<Option<EssayRecord>> {
    if row.len() == 1 && row.get(0).is_some_and(|c| c.trim().is_empty()) {
        return Ok(None);
    }
    if row.len() != width {
        return Err(Error::Parse {
            line,
            message: format!("expected {width} columns, found {}", row.len()),
        });
    }
    let essay_id = row[0].trim().to_string();
    if essay_id.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty essay_id".into(),
        });
    }
    if !seen_ids.insert(essay_id.clone()) {
        return Err(Error::Parse {
            line,
            message: format!("duplicate essay_id {essay_id:?}"),
        });
    }
    let topic_id: u32 = row[1].trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid topic_id {:?}", &row[1]),
    })?;
    let topic = registry.get(topic_id).map_err(|e| match e {
        Error::Registry(m) => Error::Registry(format!("line {line}: {m}")),
        other => other,
    })?;
    let mut raw = [None; NUM_TRAITS];
    for (k, t) in trait_columns.iter().enumerate() {
        let cell = row[3 + k].trim();
        if cell.is_empty() {
            continue;
        }
        let value: i32 = cell.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid {t} score {cell:?}"),
        })?;
        raw[t.index()] = Some(value);
    }
    EssayRecord::labeled(essay_id, topic, tokenize(&row[2]), raw)
        .map(Some)
        .map_err(|e| match e {
            Error::Range { raw, min, max, context } => Error::Range {
                raw,
                min,
                max,
                context: Some(format!(
                    "line {line}{}",
                    context.map(|c| format!(", {c}")).unwrap_or_default()
                )),
            },
            other => other,
        })
}

/// Writes records in the layout [`read_dataset`] accepts. Tokens are joined
/// with single spaces, so tokens must not contain whitespace.
pub fn write_dataset<W: Write>(writer: W, records: &[EssayRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(writer);
    let mut header = vec!["essay_id".to_string(), "topic_id".into(), "text".into()];
    header.extend(Trait::ALL.iter().map(|t| t.name().to_string()));
    writeln!(out, "{}", header.join("\t"))?;
    for r in records {
        if r.tokens.iter().any(|t| t.contains(char::is_whitespace) || t.contains('\t')) || r.essay_id.contains('\t') {
            return Err(Error::Contract(format!("essay {} cannot be written as one TSV row", r.essay_id)));
        }
        let scores: Vec<String> = r
            .raw_scores
            .iter()
            .map(|s| s.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        writeln!(out, "{}\t{}\t{}\t{}", r.essay_id, r.topic_id, r.tokens.join(" "), scores.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error, line: u64) -> Error {
    Error::Parse {
        line: e.position().map(|p| p.line()).unwrap_or(line),
        message: e.to_string(),
    }
}

/// All essays of one topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCollection {
    pub topic_id: u32,
    pub essays: Vec<EssayRecord>,
}

/// Labels withheld from the target topic. Only evaluation code reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealedGold {
    target_topic_id: u32,
    entries: BTreeMap<String, GoldEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct GoldEntry {
    pub raw_scores: [Option<i32>; NUM_TRAITS],
    pub unit_scores: [Option<f64>; NUM_TRAITS],
    pub grade_class: Option<u8>,
    pub trait_mask: [bool; NUM_TRAITS],
}

impl SealedGold {
    pub fn target_topic_id(&self) -> u32 {
        self.target_topic_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gold labels taken from labeled `records` of one topic.
    pub fn from_records(topic_id: u32, records: &[EssayRecord]) -> Self {
        SealedGold {
            target_topic_id: topic_id,
            entries: records
                .iter()
                .filter(|r| r.topic_id == topic_id)
                .map(|r| {
                    (
                        r.essay_id.clone(),
                        GoldEntry {
                            raw_scores: r.raw_scores,
                            unit_scores: r.unit_scores,
                            grade_class: r.grade_class,
                            trait_mask: r.trait_mask,
                        },
                    )
                })
                .collect(),
        }
    }

    pub(crate) fn entry(&self, essay_id: &str) -> Option<&GoldEntry> {
        self.entries.get(essay_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Labeled source topics plus one unlabeled target topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTopicSplit {
    pub sources: Vec<TopicCollection>,
    pub target: TopicCollection,
    pub target_topic_id: u32,
}

impl CrossTopicSplit {
    pub fn source_topic_ids(&self) -> Vec<u32> {
        self.sources.iter().map(|s| s.topic_id).collect()
    }

    /// Source topic ids followed by the target id; this is the slot order for
    /// topic-specific prompts.
    pub fn topic_order(&self) -> Vec<u32> {
        let mut ids = self.source_topic_ids();
        ids.push(self.target_topic_id);
        ids
    }

    pub fn num_essays(&self) -> usize {
        self.sources.iter().map(|s| s.essays.len()).sum::<usize>() + self.target.essays.len()
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            target_topic_id: self.target_topic_id,
            sources: self
                .sources
                .iter()
                .map(|s| PartitionIds {
                    topic_id: s.topic_id,
                    essay_ids: s.essays.iter().map(|e| e.essay_id.clone()).collect(),
                })
                .collect(),
            target: PartitionIds {
                topic_id: self.target.topic_id,
                essay_ids: self.target.essays.iter().map(|e| e.essay_id.clone()).collect(),
            },
        }
    }

    /// Rebuilds a split from a manifest and the labeled records it refers to.
    pub fn from_manifest(
        manifest: &SplitManifest,
        records: &[EssayRecord],
    ) -> Result<(CrossTopicSplit, SealedGold)> {
        let by_id: BTreeMap<&str, &EssayRecord> =
            records.iter().map(|r| (r.essay_id.as_str(), r)).collect();
        let lookup = |id: &str| -> Result<EssayRecord> {
            by_id
                .get(id)
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Contract(format!("manifest references unknown essay {id:?}")))
        };
        let mut selected = Vec::new();
        for p in manifest.sources.iter().chain(std::iter::once(&manifest.target)) {
            for id in &p.essay_ids {
                selected.push(lookup(id)?);
            }
        }
        make_cross_topic_split(&selected, manifest.target_topic_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionIds {
    pub topic_id: u32,
    pub essay_ids: Vec<String>,
}

/// Essay ids per partition of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub target_topic_id: u32,
    pub sources: Vec<PartitionIds>,
    pub target: PartitionIds,
}

/// Designates `target_topic_id` as the unlabeled target and every other topic
/// present in `records` as a labeled source. Sources are ordered by topic id.
pub fn make_cross_topic_split(
    records: &[EssayRecord],
    target_topic_id: u32,
) -> Result<(CrossTopicSplit, SealedGold)> {
    let mut by_topic: BTreeMap<u32, Vec<&EssayRecord>> = BTreeMap::new();
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.essay_id.as_str()) {
            return Err(Error::Contract(format!("duplicate essay_id {:?}", r.essay_id)));
        }
        by_topic.entry(r.topic_id).or_default().push(r);
    }
    let Some(target_records) = by_topic.remove(&target_topic_id) else {
        return Err(Error::Registry(format!(
            "target topic {target_topic_id} has no essays"
        )));
    };
    if by_topic.is_empty() {
        return Err(Error::Config(format!(
            "target topic {target_topic_id} is the only topic; a split needs at least one source"
        )));
    }
    let sources = by_topic
        .into_iter()
        .map(|(topic_id, essays)| TopicCollection {
            topic_id,
            essays: essays.into_iter().cloned().collect(),
        })
        .collect();
    let entries = target_records
        .iter()
        .map(|r| {
            (
                r.essay_id.clone(),
                GoldEntry {
                    raw_scores: r.raw_scores,
                    unit_scores: r.unit_scores,
                    grade_class: r.grade_class,
                    trait_mask: r.trait_mask,
                },
            )
        })
        .collect();
    let target = TopicCollection {
        topic_id: target_topic_id,
        essays: target_records.iter().map(|r| r.unlabeled()).collect(),
    };
    Ok((
        CrossTopicSplit {
            sources,
            target,
            target_topic_id,
        },
        SealedGold {
            target_topic_id,
            entries,
        },
    ))
}
