//! Trainable parameter groups, per-essay forward/backward and the batch
//! objective shared by both training phases.

use std::fmt;

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{disc_term, DiscriminatorSet, GradientReversal};
use crate::classification::{ce_term, ClassifierForward, GradeClassifier};
use crate::corpus::{EssayRecord, NUM_TRAITS};
use crate::encoder::{backward_prompts, encode_slot, init_prompt_bank, project_and_concat, EncodedEssay, EncoderBackend, PromptBank};
use crate::error::{Error, Result};
use crate::feats::{extract_features, Standardizer, FEATURE_DIM};
use crate::heads::{HeadsForward, TraitHeads};
use crate::nn::Linear;
use crate::rng::{self, streams};

/// Layer widths of the scoring model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Backend width `d`.
    pub width: usize,
    pub proj_dim: usize,
    pub feature_dim: usize,
    pub cls_hidden: usize,
    pub disc_hidden: usize,
    pub shared_len: usize,
    pub specific_len: usize,
}

impl ModelDims {
    pub fn new(width: usize, shared_len: usize, specific_len: usize) -> Self {
        ModelDims {
            width,
            proj_dim: 100,
            feature_dim: FEATURE_DIM,
            cls_hidden: 10,
            disc_hidden: 128,
            shared_len,
            specific_len,
        }
    }

    /// Width of `h`.
    pub fn hidden(&self) -> usize {
        self.proj_dim + self.feature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Topic-shared prompt.
    Shared,
    /// Topic-specific prompts.
    Specific,
    Classifier,
    Discriminators,
    /// Projection and trait heads.
    Heads,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Shared,
        Group::Specific,
        Group::Classifier,
        Group::Discriminators,
        Group::Heads,
    ];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Shared => "shared",
            Group::Specific => "specific",
            Group::Classifier => "classifier",
            Group::Discriminators => "discriminators",
            Group::Heads => "heads",
        })
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Every trainable tensor. The backend is not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub dims: ModelDims,
    pub prompts: PromptBank,
    pub projection: Linear,
    pub heads: TraitHeads,
    pub classifier: GradeClassifier,
    pub discriminators: DiscriminatorSet,
}

fn push_linear<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, group: Group, l: &'a Linear) {
    out.push(TensorRef {
        name: format!("{name}.weight"),
        group,
        shape: l.weight.shape().to_vec(),
        data: l.weight.as_slice().expect("standard layout"),
    });
    out.push(TensorRef {
        name: format!("{name}.bias"),
        group,
        shape: l.bias.shape().to_vec(),
        data: l.bias.as_slice().expect("standard layout"),
    });
}

fn push_linear_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, group: Group, l: &'a mut Linear) {
    out.push(TensorMut {
        name: format!("{name}.weight"),
        group,
        shape: l.weight.shape().to_vec(),
        data: l.weight.as_slice_mut().expect("standard layout"),
    });
    out.push(TensorMut {
        name: format!("{name}.bias"),
        group,
        shape: l.bias.shape().to_vec(),
        data: l.bias.as_slice_mut().expect("standard layout"),
    });
}

impl Params {
    /// Fresh parameters for the topics in `topic_order` (sources first, target
    /// last); one discriminator per source.
    pub fn init(dims: ModelDims, topic_order: &[u32], seed: u64) -> Result<Self> {
        if topic_order.len() < 2 {
            return Err(Error::Config("need at least one source topic and a target".into()));
        }
        let prompts = init_prompt_bank(dims.shared_len, dims.specific_len, topic_order, dims.width, seed)?;
        let mut rng = rng::stream(seed, streams::HEAD_INIT, 0);
        let projection = Linear::init(dims.width, dims.proj_dim, &mut rng);
        let heads = TraitHeads::init(dims.hidden(), NUM_TRAITS, &mut rng);
        let classifier = GradeClassifier::init(dims.hidden(), dims.cls_hidden, &mut rng);
        let discriminators = DiscriminatorSet::init(topic_order.len() - 1, dims.width, dims.disc_hidden, &mut rng);
        Ok(Params {
            dims,
            prompts,
            projection,
            heads,
            classifier,
            discriminators,
        })
    }

    /// All-zero parameters with the shapes `init` would produce.
    pub fn zeros(dims: ModelDims, topic_order: &[u32]) -> Self {
        let num_sources = topic_order.len().saturating_sub(1);
        Params {
            dims,
            prompts: PromptBank {
                shared: ndarray::Array2::zeros((dims.shared_len, dims.width)),
                specific: topic_order
                    .iter()
                    .map(|_| ndarray::Array2::zeros((dims.specific_len, dims.width)))
                    .collect(),
                topic_ids: topic_order.to_vec(),
            },
            projection: Linear::zeros(dims.width, dims.proj_dim),
            heads: TraitHeads::zeros(dims.hidden(), NUM_TRAITS),
            classifier: GradeClassifier::zeros(dims.hidden(), dims.cls_hidden),
            discriminators: DiscriminatorSet::zeros(num_sources, dims.width, dims.disc_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dims;
        Params {
            dims: d,
            prompts: self.prompts.zeros_like(),
            projection: Linear::zeros(d.width, d.proj_dim),
            heads: TraitHeads::zeros(d.hidden(), self.heads.num_traits()),
            classifier: GradeClassifier::zeros(d.hidden(), d.cls_hidden),
            discriminators: DiscriminatorSet::zeros(self.discriminators.len(), d.width, d.disc_hidden),
        }
    }

    pub fn topic_order(&self) -> &[u32] {
        &self.prompts.topic_ids
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        out.push(TensorRef {
            name: "prompt.shared".into(),
            group: Group::Shared,
            shape: self.prompts.shared.shape().to_vec(),
            data: self.prompts.shared.as_slice().expect("standard layout"),
        });
        for (m, t) in self.prompts.specific.iter().zip(&self.prompts.topic_ids) {
            out.push(TensorRef {
                name: format!("prompt.specific.{t}"),
                group: Group::Specific,
                shape: m.shape().to_vec(),
                data: m.as_slice().expect("standard layout"),
            });
        }
        push_linear(&mut out, "projection", Group::Heads, &self.projection);
        for (j, l) in self.heads.transforms.iter().enumerate() {
            push_linear(&mut out, &format!("heads.transform.{j}"), Group::Heads, l);
        }
        for (j, l) in self.heads.outputs.iter().enumerate() {
            push_linear(&mut out, &format!("heads.output.{j}"), Group::Heads, l);
        }
        push_linear(&mut out, "classifier.hidden", Group::Classifier, &self.classifier.hidden);
        push_linear(&mut out, "classifier.output", Group::Classifier, &self.classifier.output);
        for (i, d) in self.discriminators.discriminators.iter().enumerate() {
            push_linear(&mut out, &format!("discriminator.{i}.hidden"), Group::Discriminators, &d.hidden);
            push_linear(&mut out, &format!("discriminator.{i}.output"), Group::Discriminators, &d.output);
        }
        out
    }

    /// Same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let shape = self.prompts.shared.shape().to_vec();
        out.push(TensorMut {
            name: "prompt.shared".into(),
            group: Group::Shared,
            shape,
            data: self.prompts.shared.as_slice_mut().expect("standard layout"),
        });
        for (m, t) in self.prompts.specific.iter_mut().zip(&self.prompts.topic_ids) {
            let shape = m.shape().to_vec();
            out.push(TensorMut {
                name: format!("prompt.specific.{t}"),
                group: Group::Specific,
                shape,
                data: m.as_slice_mut().expect("standard layout"),
            });
        }
        push_linear_mut(&mut out, "projection", Group::Heads, &mut self.projection);
        for (j, l) in self.heads.transforms.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("heads.transform.{j}"), Group::Heads, l);
        }
        for (j, l) in self.heads.outputs.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("heads.output.{j}"), Group::Heads, l);
        }
        push_linear_mut(&mut out, "classifier.hidden", Group::Classifier, &mut self.classifier.hidden);
        push_linear_mut(&mut out, "classifier.output", Group::Classifier, &mut self.classifier.output);
        for (i, d) in self.discriminators.discriminators.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("discriminator.{i}.hidden"), Group::Discriminators, &mut d.hidden);
            push_linear_mut(&mut out, &format!("discriminator.{i}.output"), Group::Discriminators, &mut d.output);
        }
        out
    }

    pub fn num_parameters(&self, group: Group) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.data.len())
            .sum()
    }

    /// Digest of one group's values, bit-exact.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for t in self.tensors().into_iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            for v in t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Sum of squares over the tensors of `groups`.
    pub fn squared_norm(&self, groups: &[Group]) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| groups.contains(&t.group))
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, groups: &[Group], factor: f64) {
        for t in self.tensors_mut() {
            if groups.contains(&t.group) {
                t.data.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// An essay with its handcrafted features computed and labels unpacked.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEssay {
    pub essay_id: String,
    pub topic_id: u32,
    pub slot: usize,
    pub tokens: Vec<String>,
    pub features: Array1<f64>,
    pub grade: Option<u8>,
    pub unit_scores: [Option<f64>; NUM_TRAITS],
}

impl PreparedEssay {
    pub fn new(record: &EssayRecord, slot: usize, standardizer: &Standardizer) -> Self {
        let raw = extract_features(&record.tokens).values;
        PreparedEssay {
            essay_id: record.essay_id.clone(),
            topic_id: record.topic_id,
            slot,
            tokens: record.tokens.clone(),
            features: Array1::from(standardizer.transform(&raw)),
            grade: record.grade_class,
            unit_scores: record.unit_scores,
        }
    }
}

/// Intermediate values of one essay's forward pass.
#[derive(Debug, Clone)]
pub struct EssayPass {
    pub encoded: EncodedEssay,
    pub h: Array1<f64>,
    pub heads: HeadsForward,
    pub classifier: ClassifierForward,
}

impl EssayPass {
    pub fn h_cls(&self) -> &Array1<f64> {
        &self.encoded.h_cls
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.classifier.probs
    }

    pub fn scores(&self) -> &[f64] {
        &self.heads.scores
    }
}

pub fn forward_essay(params: &Params, backend: &dyn EncoderBackend, essay: &PreparedEssay) -> Result<EssayPass> {
    let encoded = encode_slot(&essay.tokens, essay.slot, &params.prompts, backend)?;
    let h = project_and_concat(encoded.h_cls.view(), essay.features.view(), &params.projection)?;
    let heads = params.heads.forward(h.view())?;
    let classifier = params.classifier.forward(h.view());
    Ok(EssayPass {
        encoded,
        h,
        heads,
        classifier,
    })
}

/// Backpropagates score and logit gradients plus any extra `dL/dh_cls`
/// through the whole essay path, accumulating into `grads`.
pub fn backward_essay(
    params: &Params,
    backend: &dyn EncoderBackend,
    pass: &EssayPass,
    d_scores: Option<&[f64]>,
    d_logits: Option<&Array1<f64>>,
    d_h_cls_extra: Option<&Array1<f64>>,
    grads: &mut Params,
) {
    let mut d_h = Array1::zeros(pass.h.len());
    if let Some(ds) = d_scores {
        d_h += &params.heads.backward(pass.h.view(), &pass.heads, ds, &mut grads.heads);
    }
    if let Some(dl) = d_logits {
        d_h += &params
            .classifier
            .backward(pass.h.view(), &pass.classifier, dl.view(), &mut grads.classifier);
    }
    let proj = params.dims.proj_dim;
    let mut d_cls = params
        .projection
        .backward(pass.h_cls().view(), d_h.slice(s![..proj]), &mut grads.projection);
    if let Some(extra) = d_h_cls_extra {
        d_cls += extra;
    }
    backward_prompts(&pass.encoded, d_cls.view(), backend, &mut grads.prompts);
}

/// One training mini-batch: per-source-topic essays (source index order) and
/// target essays.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub sources: Vec<Vec<&'a PreparedEssay>>,
    pub target: Vec<&'a PreparedEssay>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.sources.iter().map(Vec::len).sum::<usize>() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct BatchForward {
    pub sources: Vec<Vec<EssayPass>>,
    pub target: Vec<EssayPass>,
}

pub fn forward_batch(params: &Params, backend: &dyn EncoderBackend, batch: &Batch<'_>) -> Result<BatchForward> {
    let sources = batch
        .sources
        .iter()
        .map(|topic| topic.iter().map(|e| forward_essay(params, backend, e)).collect())
        .collect::<Result<_>>()?;
    let target = batch
        .target
        .iter()
        .map(|e| forward_essay(params, backend, e))
        .collect::<Result<_>>()?;
    Ok(BatchForward { sources, target })
}

/// Gradient multipliers for the three loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub mse: f64,
    pub adv: f64,
}

/// How the adversarial gradient reaches `h_cls`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvRouting {
    Reversed(GradientReversal),
    /// No reversal; used to check the reversal against plain backprop.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub source_ce: f64,
    pub target_ce: f64,
    pub mse: f64,
    pub adv: f64,
}

impl LossTerms {
    pub fn ce(&self) -> f64 {
        self.source_ce + self.target_ce
    }
}

/// Batch losses and their weighted gradient.
///
/// `target_labels` supplies pseudo-labels for the target essays (no target
/// term when `None`); `target_size` is `|T|`. The adversarial term is only
/// evaluated when `routing` is given.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    params: &Params,
    backend: &dyn EncoderBackend,
    batch: &Batch<'_>,
    forward: &BatchForward,
    target_labels: Option<&[u8]>,
    target_size: usize,
    weights: LossWeights,
    routing: Option<AdvRouting>,
) -> Result<(LossTerms, Params)> {
    let num_sources = params.discriminators.len();
    if batch.sources.len() != num_sources || forward.sources.len() != num_sources {
        return Err(Error::Contract(format!(
            "batch has {} source topics, model has {num_sources}",
            batch.sources.len()
        )));
    }
    if let Some(labels) = target_labels {
        if labels.len() != forward.target.len() {
            return Err(Error::Contract("pseudo-label count differs from target batch".into()));
        }
        if target_size == 0 {
            return Err(Error::Config("target set is empty".into()));
        }
    }
    let mut terms = LossTerms::default();
    let mut grads = params.zeros_like();
    let mut d_cls_source: Vec<Vec<Option<Array1<f64>>>> =
        forward.sources.iter().map(|t| vec![None; t.len()]).collect();
    let mut d_cls_target: Vec<Option<Array1<f64>>> = vec![None; forward.target.len()];

    if let Some(routing) = routing {
        if forward.target.is_empty() {
            return Err(Error::Contract("adversarial loss needs target essays".into()));
        }
        let route = |g: Array1<f64>| match routing {
            AdvRouting::Reversed(grl) => grl.backward(&g),
            AdvRouting::Plain => g,
        };
        for (i, disc) in params.discriminators.discriminators.iter().enumerate() {
            let gdisc = &mut grads.discriminators.discriminators[i];
            for (k, pass) in forward.sources[i].iter().enumerate() {
                let (loss, dl, fwd) = disc_term(disc, pass.h_cls().view(), false);
                terms.adv += loss;
                let d = disc.backward(pass.h_cls().view(), &fwd, (dl * weights.adv).view(), gdisc);
                add_into(&mut d_cls_source[i][k], route(d));
            }
            for (k, pass) in forward.target.iter().enumerate() {
                let (loss, dl, fwd) = disc_term(disc, pass.h_cls().view(), true);
                terms.adv += loss;
                let d = disc.backward(pass.h_cls().view(), &fwd, (dl * weights.adv).view(), gdisc);
                add_into(&mut d_cls_target[k], route(d));
            }
        }
    }

    for (i, (essays, passes)) in batch.sources.iter().zip(&forward.sources).enumerate() {
        if essays.len() != passes.len() {
            return Err(Error::Contract("forward pass does not match batch".into()));
        }
        let cells: usize = essays
            .iter()
            .map(|e| e.unit_scores.iter().filter(|s| s.is_some()).count())
            .sum();
        let graded = essays.iter().filter(|e| e.grade.is_some()).count();
        for (k, (essay, pass)) in essays.iter().zip(passes).enumerate() {
            let mut d_scores = [0.0; NUM_TRAITS];
            for (j, gold) in essay.unit_scores.iter().enumerate() {
                if let Some(y) = gold {
                    let diff = pass.heads.scores[j] - y;
                    terms.mse += diff * diff / cells as f64;
                    d_scores[j] = weights.mse * 2.0 * diff / cells as f64;
                }
            }
            let d_logits = essay.grade.map(|label| {
                let (loss, dl) = ce_term(pass.probs().view(), label);
                terms.source_ce += loss / graded as f64;
                dl * (weights.ce / graded as f64)
            });
            backward_essay(
                params,
                backend,
                pass,
                (cells > 0).then_some(&d_scores[..]),
                d_logits.as_ref(),
                d_cls_source[i][k].as_ref(),
                &mut grads,
            );
        }
    }

    for (k, pass) in forward.target.iter().enumerate() {
        let d_logits = target_labels.map(|labels| {
            let (loss, dl) = ce_term(pass.probs().view(), labels[k]);
            terms.target_ce += loss / target_size as f64;
            dl * (weights.ce / target_size as f64)
        });
        backward_essay(params, backend, pass, None, d_logits.as_ref(), d_cls_target[k].as_ref(), &mut grads);
    }
    Ok((terms, grads))
}

fn add_into(slot: &mut Option<Array1<f64>>, g: Array1<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
