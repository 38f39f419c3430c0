//! Two-phase alternating training, batching, model selection and
//! checkpoints.
//!
//! Each iteration draws `per_topic_batch` essays from every source topic and
//! from the target, then runs the shared phase (shared prompt, classifier,
//! discriminators, heads; adversarial term through gradient reversal)
//! followed by the specific phase (topic prompts, classifier, heads) on the
//! same mini-batch.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::GradientReversal;
use crate::corpus::{CrossTopicSplit, EssayRecord, SealedGold, TopicRegistry, TopicSpec};
use crate::encoder::{BackendSpec, EncoderBackend};
use crate::error::{Error, Result};
use crate::feats::{fit_standardizer, Standardizer, FEATURE_DIM};
use crate::metrics::{self, TopicReport};
use crate::model::{
    batch_objective, forward_batch, AdvRouting, Batch, EssayPass, Group, LossTerms, LossWeights, ModelDims, Params,
    PreparedEssay,
};
use crate::optim::{clip_global_norm, Adam, LrSchedule};
use crate::pseudo::{MemoryBank, PseudoLabel};
use crate::rng::{self, streams};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: u32 = 1;
/// Environment variables `XTOPIC_<KEY>` override config keys; nested keys
/// use a double underscore (`XTOPIC_BACKEND__WIDTH`).
pub const ENV_PREFIX: &str = "XTOPIC_";

pub const SHARED_GROUPS: [Group; 4] = [Group::Shared, Group::Classifier, Group::Discriminators, Group::Heads];
pub const SPECIFIC_GROUPS: [Group; 3] = [Group::Specific, Group::Classifier, Group::Heads];

/// How the best epoch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Highest average target QWK, read from the sealed gold sidecar.
    #[default]
    TargetGold,
    /// Highest average QWK on a held-out slice of each source topic.
    SourceHoldout,
    /// The final epoch.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    /// Regression weight.
    pub alpha: f64,
    /// Adversarial weight.
    pub beta: f64,
    pub epochs: u64,
    pub per_topic_batch: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub seed: u64,
    pub prompt_len_shared: usize,
    pub prompt_len_specific: usize,
    pub knn_k: usize,
    pub tau: f64,
    pub lambda: f64,
    /// Global gradient-norm cap per phase; 0 disables clipping.
    pub grad_clip: f64,
    pub grl_coeff: f64,
    pub proj_dim: usize,
    pub cls_hidden: usize,
    pub disc_hidden: usize,
    pub selection: Selection,
    pub holdout_fraction: f64,
    /// Stop after this many iterations regardless of `epochs`.
    pub max_steps: Option<u64>,
    pub standardize_features: bool,
    pub backend: BackendSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            alpha: 10.0,
            beta: 1.0,
            epochs: 30,
            per_topic_batch: 4,
            learning_rate: 0.01,
            decay_rate: 0.9,
            decay_steps: 2000,
            seed: 42,
            prompt_len_shared: 8,
            prompt_len_specific: 8,
            knn_k: 8,
            tau: 2.0,
            lambda: 0.9,
            grad_clip: 5.0,
            grl_coeff: 1.0,
            proj_dim: 100,
            cls_hidden: 10,
            disc_hidden: 128,
            selection: Selection::TargetGold,
            holdout_fraction: 0.1,
            max_steps: None,
            standardize_features: true,
            backend: BackendSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return fail("alpha and beta must be >= 0".into());
        }
        if self.per_topic_batch == 0 {
            return fail("per_topic_batch must be >= 1".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be >= 1".into());
        }
        if !(self.tau > 0.0) {
            return fail("tau must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]".into());
        }
        if !(self.grl_coeff >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("grl_coeff and grad_clip must be >= 0".into());
        }
        if self.proj_dim == 0 || self.cls_hidden == 0 || self.disc_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.selection == Selection::SourceHoldout && !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return fail("holdout_fraction must lie in (0, 1)".into());
        }
        LrSchedule::new(self.learning_rate, self.decay_rate, self.decay_steps)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.learning_rate,
            decay_rate: self.decay_rate,
            decay_steps: self.decay_steps,
        }
    }

    /// Applies `XTOPIC_*` overrides from `vars`. Unknown keys are errors.
    pub fn with_env_overrides<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = name.split("__").map(str::to_lowercase).collect();
            set_path(&mut doc, &path, &value, &key)?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: &str, var: &str) -> Result<()> {
    let (head, rest) = path.split_first().expect("non-empty path");
    let unknown = || Error::Config(format!("{var} names unknown config key {:?}", path.join(".")));
    if rest.is_empty() {
        let parsed = if let Some(old) = table.get(head) {
            match old {
                toml::Value::Integer(_) => value.parse().map(toml::Value::Integer).ok(),
                toml::Value::Float(_) => value.parse().map(toml::Value::Float).ok(),
                toml::Value::Boolean(_) => value.parse().map(toml::Value::Boolean).ok(),
                toml::Value::String(_) => Some(toml::Value::String(value.to_string())),
                _ => None,
            }
        } else if head == "max_steps" {
            value.parse().map(toml::Value::Integer).ok()
        } else {
            return Err(unknown());
        };
        let parsed = parsed.ok_or_else(|| Error::Config(format!("{var}: cannot parse {value:?}")))?;
        table.insert(head.clone(), parsed);
        return Ok(());
    }
    match table.get_mut(head) {
        Some(toml::Value::Table(inner)) => set_path(inner, rest, value, var),
        _ => Err(unknown()),
    }
}

/// `l_ce + alpha * l_mse + beta * l_adv`.
pub fn total_loss(l_ce: f64, l_mse: f64, l_adv: f64, alpha: f64, beta: f64) -> f64 {
    l_ce + alpha * l_mse + beta * l_adv
}

fn check_finite(terms: &LossTerms, step: u64) -> Result<()> {
    for (component, v) in [
        ("source cross-entropy", terms.source_ce),
        ("target cross-entropy", terms.target_ce),
        ("regression", terms.mse),
        ("adversarial", terms.adv),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component, step });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Shared,
    Specific,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Shared => "shared",
            Phase::Specific => "specific",
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub phase: Phase,
    pub l_ce: f64,
    pub l_mse: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl LogRow {
    pub const TSV_HEADER: &'static str = "step\tphase\tl_ce\tl_mse\tl_adv\tl_total\tlr";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.phase, self.l_ce, self.l_mse, self.l_adv, self.l_total, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub metric: Option<f64>,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: u64,
    pub metric: Option<f64>,
    pub params: Params,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub opt_shared: Adam,
    pub opt_specific: Adam,
    pub bank: MemoryBank,
    /// Completed iterations.
    pub iteration: u64,
    pub epoch: u64,
    /// Completed iterations inside the current epoch.
    pub cursor: u64,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSnapshot>,
    epoch_total: f64,
}

/// Prepares `records` for the model; `topic_order` fixes prompt slots.
pub fn prepare_essays(records: &[EssayRecord], topic_order: &[u32], standardizer: &Standardizer) -> Result<Vec<PreparedEssay>> {
    records
        .iter()
        .map(|r| {
            let slot = topic_order
                .iter()
                .position(|&t| t == r.topic_id)
                .ok_or_else(|| Error::Registry(format!("topic {} has no prompt slot", r.topic_id)))?;
            Ok(PreparedEssay::new(r, slot, standardizer))
        })
        .collect()
}

fn permutation(seed: u64, epoch: u64, slot: usize, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rng::stream(seed, streams::DATA_SHUFFLE, (epoch << 16) | slot as u64);
    idx.shuffle(&mut rng);
    idx
}

fn draw<'a>(essays: &'a [PreparedEssay], perm: &[usize], cursor: u64, b: usize) -> Vec<&'a PreparedEssay> {
    (0..b)
        .map(|r| &essays[perm[(cursor as usize * b + r) % essays.len()]])
        .collect()
}

/// Mini-batch `cursor` of epoch `epoch`: `b` essays per topic, cycling
/// through a per-epoch permutation of each topic.
pub fn sample_batch<'a>(
    sources: &'a [Vec<PreparedEssay>],
    target: &'a [PreparedEssay],
    seed: u64,
    epoch: u64,
    cursor: u64,
    b: usize,
) -> Batch<'a> {
    let n = sources.len();
    let sources = sources
        .iter()
        .enumerate()
        .map(|(k, s)| draw(s, &permutation(seed, epoch, k, s.len()), cursor, b))
        .collect();
    let target = draw(target, &permutation(seed, epoch, n, target.len()), cursor, b);
    Batch { sources, target }
}

/// Pseudo-labels for the target essays of a forward pass.
pub fn pseudo_labels(bank: &MemoryBank, passes: &[EssayPass], essays: &[&PreparedEssay], k: usize) -> Result<Vec<PseudoLabel>> {
    passes
        .iter()
        .zip(essays)
        .map(|(p, e)| bank.knn_pseudo_label(p.h.view(), &e.essay_id, k))
        .collect()
}

/// Pseudo-label of every essay in `target` under `params`.
pub fn pseudo_label_rows(
    params: &Params,
    backend: &dyn EncoderBackend,
    bank: &MemoryBank,
    target: &[PreparedEssay],
    k: usize,
) -> Result<Vec<(String, PseudoLabel)>> {
    target
        .iter()
        .map(|e| {
            let pass = crate::model::forward_essay(params, backend, e)?;
            let pl = bank.knn_pseudo_label(pass.h.view(), &e.essay_id, k)?;
            Ok((e.essay_id.clone(), pl))
        })
        .collect()
}

pub fn init_bank(params: &Params, backend: &dyn EncoderBackend, target: &[PreparedEssay], lambda: f64, tau: f64) -> Result<MemoryBank> {
    if target.is_empty() {
        return Err(Error::Config("target topic has no essays".into()));
    }
    let mut ids = Vec::with_capacity(target.len());
    let mut feats = Vec::with_capacity(target.len());
    let mut probs = Vec::with_capacity(target.len());
    for e in target {
        let pass = crate::model::forward_essay(params, backend, e)?;
        ids.push(e.essay_id.clone());
        feats.push(pass.h);
        probs.push(pass.classifier.probs);
    }
    MemoryBank::from_predictions(&ids, &feats, &probs, lambda, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: u64,
    pub epochs_completed: u64,
    pub best_epoch: Option<u64>,
    pub best_metric: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    backend: Arc<dyn EncoderBackend>,
    pub standardizer: Standardizer,
    pub topic_order: Vec<u32>,
    pub sources: Vec<Vec<PreparedEssay>>,
    pub holdout: Vec<Vec<PreparedEssay>>,
    holdout_gold: Vec<SealedGold>,
    pub target: Vec<PreparedEssay>,
    source_topics: Vec<TopicSpec>,
    target_topic: TopicSpec,
    gold: Option<SealedGold>,
    pub state: TrainState,
}

struct Data {
    standardizer: Standardizer,
    sources: Vec<Vec<PreparedEssay>>,
    holdout: Vec<Vec<PreparedEssay>>,
    holdout_gold: Vec<SealedGold>,
    target: Vec<PreparedEssay>,
    source_topics: Vec<TopicSpec>,
    target_topic: TopicSpec,
}

fn prepare_data(
    split: &CrossTopicSplit,
    registry: &TopicRegistry,
    config: &TrainConfig,
    standardizer: Option<Standardizer>,
) -> Result<Data> {
    let topic_order = split.topic_order();
    let mut train_records = Vec::new();
    let mut held_records = Vec::new();
    for (k, topic) in split.sources.iter().enumerate() {
        let mut essays: Vec<&EssayRecord> = topic.essays.iter().collect();
        if essays.is_empty() {
            return Err(Error::Config(format!("source topic {} has no essays", topic.topic_id)));
        }
        let mut held = Vec::new();
        if config.selection == Selection::SourceHoldout {
            let mut rng = rng::stream(config.seed, streams::HOLDOUT, k as u64);
            essays.shuffle(&mut rng);
            let n_held = ((essays.len() as f64 * config.holdout_fraction).round() as usize).clamp(1, essays.len() - 1);
            held = essays.split_off(essays.len() - n_held);
            held.sort_by(|a, b| a.essay_id.cmp(&b.essay_id));
            essays.sort_by(|a, b| a.essay_id.cmp(&b.essay_id));
        }
        train_records.push(essays.into_iter().cloned().collect::<Vec<_>>());
        held_records.push(held.into_iter().cloned().collect::<Vec<_>>());
    }
    let standardizer = match standardizer {
        Some(s) => s,
        None if config.standardize_features => {
            let all: Vec<EssayRecord> = train_records.iter().flatten().cloned().collect();
            fit_standardizer(&all)?
        }
        None => Standardizer::identity(FEATURE_DIM),
    };
    let sources = train_records
        .iter()
        .map(|r| prepare_essays(r, &topic_order, &standardizer))
        .collect::<Result<Vec<_>>>()?;
    let holdout = held_records
        .iter()
        .map(|r| prepare_essays(r, &topic_order, &standardizer))
        .collect::<Result<Vec<_>>>()?;
    let holdout_gold = split
        .sources
        .iter()
        .zip(&held_records)
        .map(|(t, r)| SealedGold::from_records(t.topic_id, r))
        .collect();
    let mut target = prepare_essays(&split.target.essays, &topic_order, &standardizer)?;
    for e in &mut target {
        e.grade = None;
        e.unit_scores = [None; crate::corpus::NUM_TRAITS];
    }
    let source_topics = split
        .sources
        .iter()
        .map(|t| registry.get(t.topic_id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let target_topic = registry.get(split.target_topic_id)?.clone();
    Ok(Data {
        standardizer,
        sources,
        holdout,
        holdout_gold,
        target,
        source_topics,
        target_topic,
    })
}

impl Trainer {
    pub fn new(
        split: &CrossTopicSplit,
        registry: &TopicRegistry,
        config: TrainConfig,
        backend: Arc<dyn EncoderBackend>,
        gold: Option<SealedGold>,
    ) -> Result<Self> {
        config.validate()?;
        if config.selection == Selection::TargetGold && gold.is_none() {
            return Err(Error::EvaluationUnavailable(
                "target-gold model selection needs the gold sidecar; use selection = \"source-holdout\" or \"last\"".into(),
            ));
        }
        let data = prepare_data(split, registry, &config, None)?;
        let topic_order = split.topic_order();
        if data.target.len() <= config.knn_k {
            return Err(Error::Config(format!(
                "knn_k = {} needs more than {} target essays",
                config.knn_k, config.knn_k
            )));
        }
        let dims = model_dims(&config, backend.width());
        let params = Params::init(dims, &topic_order, config.seed)?;
        let bank = init_bank(&params, backend.as_ref(), &data.target, config.lambda, config.tau)?;
        let state = TrainState {
            opt_shared: Adam::new(&params, &SHARED_GROUPS),
            opt_specific: Adam::new(&params, &SPECIFIC_GROUPS),
            params,
            bank,
            iteration: 0,
            epoch: 0,
            cursor: 0,
            history: Vec::new(),
            best: None,
            epoch_total: 0.0,
        };
        Ok(Trainer {
            config,
            backend,
            standardizer: data.standardizer,
            topic_order,
            sources: data.sources,
            holdout: data.holdout,
            holdout_gold: data.holdout_gold,
            target: data.target,
            source_topics: data.source_topics,
            target_topic: data.target_topic,
            gold,
            state,
        })
    }

    pub fn backend(&self) -> &dyn EncoderBackend {
        self.backend.as_ref()
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        let largest = self
            .sources
            .iter()
            .map(Vec::len)
            .chain(std::iter::once(self.target.len()))
            .max()
            .unwrap_or(0);
        largest.div_ceil(self.config.per_topic_batch) as u64
    }

    /// Parameters chosen by model selection, or the current ones before any
    /// epoch has finished.
    pub fn best_params(&self) -> &Params {
        self.state.best.as_ref().map_or(&self.state.params, |b| &b.params)
    }

    fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
            || self.config.max_steps.is_some_and(|m| self.state.iteration >= m)
    }

    /// Runs until `epochs` or `max_steps` is reached, passing every log row
    /// to `sink`.
    pub fn fit(&mut self, sink: &mut dyn FnMut(&LogRow)) -> Result<FitSummary> {
        self.fit_with(sink, &mut |_| Ok(()))
    }

    /// [`fit`](Self::fit) that also calls `on_epoch` after every completed
    /// epoch, e.g. to write a checkpoint.
    pub fn fit_with(
        &mut self,
        sink: &mut dyn FnMut(&LogRow),
        on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<FitSummary> {
        if self.config.epochs == 0 {
            log::warn!("epochs = 0: returning the initial state unchanged");
        }
        while !self.finished() {
            self.step(sink)?;
            if self.state.cursor == 0 {
                on_epoch(self)?;
            }
        }
        Ok(FitSummary {
            iterations: self.state.iteration,
            epochs_completed: self.state.epoch,
            best_epoch: self.state.best.as_ref().map(|b| b.epoch),
            best_metric: self.state.best.as_ref().and_then(|b| b.metric),
        })
    }

    /// One iteration: shared phase, bank update, specific phase.
    pub fn step(&mut self, sink: &mut dyn FnMut(&LogRow)) -> Result<[LogRow; 2]> {
        let shared = self.shared_phase()?;
        sink(&shared);
        let specific = self.specific_phase()?;
        sink(&specific);
        self.finish_iteration(shared.l_total)?;
        Ok([shared, specific])
    }

    /// Advances the counters once both phases of an iteration have run and
    /// closes the epoch after its last mini-batch. Returns whether an epoch
    /// ended.
    pub fn finish_iteration(&mut self, shared_total: f64) -> Result<bool> {
        self.state.iteration += 1;
        self.state.cursor += 1;
        self.state.epoch_total += shared_total;
        if self.state.cursor == self.iterations_per_epoch() {
            self.end_epoch()?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Shared-phase step on the current mini-batch; updates the memory bank.
    pub fn shared_phase(&mut self) -> Result<LogRow> {
        let cfg = &self.config;
        let backend = self.backend.as_ref();
        let step = self.state.iteration;
        let lr = cfg.schedule().rate(step);
        let batch = sample_batch(&self.sources, &self.target, cfg.seed, self.state.epoch, self.state.cursor, cfg.per_topic_batch);
        let state = &mut self.state;
        let fwd = forward_batch(&state.params, backend, &batch)?;
        let labels: Vec<u8> = pseudo_labels(&state.bank, &fwd.target, &batch.target, cfg.knn_k)?
            .into_iter()
            .map(|p| p.class)
            .collect();
        let grl = GradientReversal::new(cfg.grl_coeff)?;
        let (terms, mut grads) = batch_objective(
            &state.params,
            backend,
            &batch,
            &fwd,
            Some(&labels),
            self.target.len(),
            LossWeights {
                ce: 1.0,
                mse: cfg.alpha,
                adv: cfg.beta,
            },
            Some(AdvRouting::Reversed(grl)),
        )?;
        check_finite(&terms, step)?;
        clip_global_norm(&mut grads, &SHARED_GROUPS, cfg.grad_clip);
        state.opt_shared.step(&mut state.params, &grads, lr);
        for (essay, pass) in batch.target.iter().zip(&fwd.target) {
            state.bank.update(&essay.essay_id, pass.h.view(), pass.probs().view())?;
        }
        Ok(LogRow {
            step,
            phase: Phase::Shared,
            l_ce: terms.ce(),
            l_mse: terms.mse,
            l_adv: terms.adv,
            l_total: total_loss(terms.ce(), terms.mse, terms.adv, cfg.alpha, cfg.beta),
            lr,
        })
    }

    /// Specific-phase step on the current mini-batch.
    pub fn specific_phase(&mut self) -> Result<LogRow> {
        let cfg = &self.config;
        let backend = self.backend.as_ref();
        let step = self.state.iteration;
        let lr = cfg.schedule().rate(step);
        let batch = sample_batch(&self.sources, &self.target, cfg.seed, self.state.epoch, self.state.cursor, cfg.per_topic_batch);
        let state = &mut self.state;
        let fwd = forward_batch(&state.params, backend, &batch)?;
        let labels: Vec<u8> = pseudo_labels(&state.bank, &fwd.target, &batch.target, cfg.knn_k)?
            .into_iter()
            .map(|p| p.class)
            .collect();
        let (terms, mut grads) = batch_objective(
            &state.params,
            backend,
            &batch,
            &fwd,
            Some(&labels),
            self.target.len(),
            LossWeights {
                ce: 1.0,
                mse: cfg.alpha,
                adv: 0.0,
            },
            None,
        )?;
        check_finite(&terms, step)?;
        clip_global_norm(&mut grads, &SPECIFIC_GROUPS, cfg.grad_clip);
        state.opt_specific.step(&mut state.params, &grads, lr);
        Ok(LogRow {
            step,
            phase: Phase::Specific,
            l_ce: terms.ce(),
            l_mse: terms.mse,
            l_adv: 0.0,
            l_total: total_loss(terms.ce(), terms.mse, 0.0, cfg.alpha, 0.0),
            lr,
        })
    }

    /// Selection metric for the current parameters.
    pub fn selection_metric(&self) -> Result<Option<f64>> {
        let params = &self.state.params;
        let backend = self.backend.as_ref();
        match self.config.selection {
            Selection::TargetGold => {
                let gold = self
                    .gold
                    .as_ref()
                    .ok_or_else(|| Error::EvaluationUnavailable("no gold sidecar loaded".into()))?;
                Ok(metrics::evaluate(params, backend, &self.target, &self.target_topic, gold)?.average())
            }
            Selection::SourceHoldout => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for ((essays, topic), gold) in self.holdout.iter().zip(&self.source_topics).zip(&self.holdout_gold) {
                    if let Some(avg) = metrics::evaluate(params, backend, essays, topic, gold)?.average() {
                        sum += avg;
                        n += 1;
                    }
                }
                Ok((n > 0).then(|| sum / n as f64))
            }
            Selection::Last => Ok(None),
        }
    }

    fn end_epoch(&mut self) -> Result<()> {
        let metric = self.selection_metric()?;
        let per_epoch = self.state.cursor.max(1) as f64;
        let record = EpochRecord {
            epoch: self.state.epoch,
            metric,
            mean_total: self.state.epoch_total / per_epoch,
        };
        log::info!(
            "epoch {} mean shared loss {:.4} selection metric {:?}",
            record.epoch,
            record.mean_total,
            record.metric
        );
        let better = match (&self.state.best, metric) {
            (None, _) => true,
            (Some(_), None) => self.config.selection == Selection::Last,
            (Some(b), Some(m)) => b.metric.is_none_or(|bm| m > bm),
        };
        if better {
            self.state.best = Some(BestSnapshot {
                epoch: self.state.epoch,
                metric,
                params: self.state.params.clone(),
            });
        }
        self.state.history.push(record);
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.state.epoch_total = 0.0;
        Ok(())
    }

    /// Target-topic report for `params` against the loaded gold sidecar.
    pub fn target_report(&self, params: &Params) -> Result<TopicReport> {
        let gold = self
            .gold
            .as_ref()
            .ok_or_else(|| Error::EvaluationUnavailable("no gold sidecar loaded".into()))?;
        metrics::evaluate(params, self.backend.as_ref(), &self.target, &self.target_topic, gold)
    }

    /// Current pseudo-label of every target essay.
    pub fn pseudo_label_rows(&self) -> Result<Vec<(String, PseudoLabel)>> {
        pseudo_label_rows(&self.state.params, self.backend.as_ref(), &self.state.bank, &self.target, self.config.knn_k)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            backend_fingerprint: self.backend.fingerprint(),
            dims: s.params.dims,
            topic_order: self.topic_order.clone(),
            target_topic_id: self.target_topic.topic_id,
            standardizer: self.standardizer.clone(),
            iteration: s.iteration,
            epoch: s.epoch,
            cursor: s.cursor,
            epoch_total: s.epoch_total,
            history: s.history.clone(),
            params: tensor_map(&s.params),
            best: s.best.as_ref().map(|b| StoredBest {
                epoch: b.epoch,
                metric: b.metric,
                params: tensor_map(&b.params),
            }),
            opt_shared: StoredAdam::from_adam(&s.opt_shared),
            opt_specific: StoredAdam::from_adam(&s.opt_specific),
            bank: s.bank.clone(),
        }
    }

    /// Continues a run from `ckpt` on the same split and backend.
    pub fn resume(
        ckpt: Checkpoint,
        split: &CrossTopicSplit,
        registry: &TopicRegistry,
        backend: Arc<dyn EncoderBackend>,
        gold: Option<SealedGold>,
    ) -> Result<Self> {
        ckpt.check_compatible(split, backend.as_ref())?;
        let config = ckpt.config.clone();
        config.validate()?;
        let data = prepare_data(split, registry, &config, Some(ckpt.standardizer.clone()))?;
        let params = ckpt.params()?;
        let mut bank = ckpt.bank;
        bank.rebuild_index()?;
        let best = match ckpt.best {
            Some(b) => Some(BestSnapshot {
                epoch: b.epoch,
                metric: b.metric,
                params: params_from_map(ckpt.dims, &ckpt.topic_order, &b.params)?,
            }),
            None => None,
        };
        let state = TrainState {
            opt_shared: ckpt.opt_shared.to_adam(&params)?,
            opt_specific: ckpt.opt_specific.to_adam(&params)?,
            params,
            bank,
            iteration: ckpt.iteration,
            epoch: ckpt.epoch,
            cursor: ckpt.cursor,
            history: ckpt.history,
            best,
            epoch_total: ckpt.epoch_total,
        };
        Ok(Trainer {
            config,
            backend,
            standardizer: data.standardizer,
            topic_order: ckpt.topic_order,
            sources: data.sources,
            holdout: data.holdout,
            holdout_gold: data.holdout_gold,
            target: data.target,
            source_topics: data.source_topics,
            target_topic: data.target_topic,
            gold,
            state,
        })
    }
}

pub fn model_dims(config: &TrainConfig, width: usize) -> ModelDims {
    let mut dims = ModelDims::new(width, config.prompt_len_shared, config.prompt_len_specific);
    dims.proj_dim = config.proj_dim;
    dims.cls_hidden = config.cls_hidden;
    dims.disc_hidden = config.disc_hidden;
    dims
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type TensorMap = BTreeMap<String, StoredTensor>;

pub fn tensor_map(params: &Params) -> TensorMap {
    params
        .tensors()
        .into_iter()
        .map(|t| {
            (
                t.name,
                StoredTensor {
                    shape: t.shape,
                    data: t.data.to_vec(),
                },
            )
        })
        .collect()
}

pub fn params_from_map(dims: ModelDims, topic_order: &[u32], map: &TensorMap) -> Result<Params> {
    let mut params = Params::zeros(dims, topic_order);
    let mut seen = 0usize;
    for t in params.tensors_mut() {
        let stored = map
            .get(&t.name)
            .ok_or_else(|| Error::Version(format!("checkpoint lacks tensor {}", t.name)))?;
        if stored.shape != t.shape || stored.data.len() != t.data.len() {
            return Err(Error::Version(format!(
                "tensor {} has shape {:?}, expected {:?}",
                t.name, stored.shape, t.shape
            )));
        }
        t.data.copy_from_slice(&stored.data);
        seen += 1;
    }
    if seen != map.len() {
        return Err(Error::Version("checkpoint holds tensors this model does not have".into()));
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBest {
    pub epoch: u64,
    pub metric: Option<f64>,
    pub params: TensorMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAdam {
    pub groups: Vec<Group>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

impl StoredAdam {
    fn from_adam(a: &Adam) -> Self {
        StoredAdam {
            groups: a.groups.clone(),
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            m: tensor_map(&a.m),
            v: tensor_map(&a.v),
        }
    }

    fn to_adam(&self, params: &Params) -> Result<Adam> {
        Ok(Adam {
            groups: self.groups.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m: params_from_map(params.dims, params.topic_order(), &self.m)?,
            v: params_from_map(params.dims, params.topic_order(), &self.v)?,
        })
    }
}

/// Full training state as named tensors plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub backend_fingerprint: String,
    pub dims: ModelDims,
    pub topic_order: Vec<u32>,
    pub target_topic_id: u32,
    pub standardizer: Standardizer,
    pub iteration: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub epoch_total: f64,
    pub history: Vec<EpochRecord>,
    pub params: TensorMap,
    pub best: Option<StoredBest>,
    pub opt_shared: StoredAdam,
    pub opt_specific: StoredAdam,
    pub bank: MemoryBank,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Version(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<Params> {
        params_from_map(self.dims, &self.topic_order, &self.params)
    }

    /// Selected parameters, falling back to the latest ones.
    pub fn best_params(&self) -> Result<Params> {
        match &self.best {
            Some(b) => params_from_map(self.dims, &self.topic_order, &b.params),
            None => self.params(),
        }
    }

    pub fn check_compatible(&self, split: &CrossTopicSplit, backend: &dyn EncoderBackend) -> Result<()> {
        if split.topic_order() != self.topic_order {
            return Err(Error::Version(format!(
                "checkpoint was trained on topics {:?}, split has {:?}",
                self.topic_order,
                split.topic_order()
            )));
        }
        if backend.fingerprint() != self.backend_fingerprint {
            return Err(Error::Version("backend differs from the one the checkpoint was trained with".into()));
        }
        Ok(())
    }
}
