//! Quadratic weighted kappa, prediction and the per-topic / per-trait report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::adversary::{disc_term, Discriminator};
use crate::corpus::{denormalize_score, SealedGold, TopicSpec, Trait, NUM_GRADES};
use crate::encoder::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::{forward_essay, Params, PreparedEssay};
use crate::pseudo::argmax;
use crate::rng::{self, streams};

/// Quadratic weighted kappa between two integer rating vectors on
/// `[min_rating, max_rating]`.
pub fn qwk(pred: &[i32], gold: &[i32], min_rating: i32, max_rating: i32) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "rating vectors differ in length: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("QWK over zero ratings".into()));
    }
    if max_rating < min_rating {
        return Err(Error::Contract(format!("empty rating range [{min_rating}, {max_rating}]")));
    }
    if let Some(bad) = pred.iter().chain(gold).find(|&&r| r < min_rating || r > max_rating) {
        return Err(Error::Contract(format!(
            "rating {bad} outside [{min_rating}, {max_rating}]"
        )));
    }
    let r = (max_rating - min_rating + 1) as usize;
    if r == 1 {
        return Ok(1.0);
    }
    let mut observed = vec![vec![0.0f64; r]; r];
    let mut hist_p = vec![0.0f64; r];
    let mut hist_g = vec![0.0f64; r];
    for (&p, &g) in pred.iter().zip(gold) {
        let (i, j) = ((p - min_rating) as usize, (g - min_rating) as usize);
        observed[i][j] += 1.0;
        hist_p[i] += 1.0;
        hist_g[j] += 1.0;
    }
    let n = pred.len() as f64;
    let denom_w = ((r - 1) * (r - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r {
        for j in 0..r {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            num += w * observed[i][j];
            den += w * hist_p[i] * hist_g[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(if pred == gold { 1.0 } else { 0.0 });
    }
    Ok(1.0 - num / den)
}

/// Model outputs for one essay.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub essay_id: String,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn predict(params: &Params, backend: &dyn EncoderBackend, essays: &[PreparedEssay]) -> Result<Vec<Prediction>> {
    essays
        .iter()
        .map(|e| {
            let pass = forward_essay(params, backend, e)?;
            Ok(Prediction {
                essay_id: e.essay_id.clone(),
                scores: pass.heads.scores.clone(),
                probs: pass.classifier.probs.to_vec(),
            })
        })
        .collect()
}

/// QWK cells and grade-classification scores for one target topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub topic_id: u32,
    pub num_essays: usize,
    pub traits: BTreeMap<Trait, f64>,
    pub class_accuracy: Option<f64>,
    pub class_qwk: Option<f64>,
}

impl TopicReport {
    pub fn average(&self) -> Option<f64> {
        mean(self.traits.values().copied())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Rows are target topics, columns traits; averages only cover traits a
/// topic actually has.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub topics: Vec<TopicReport>,
}

impl Report {
    pub fn topic(&self, topic_id: u32) -> Option<&TopicReport> {
        self.topics.iter().find(|t| t.topic_id == topic_id)
    }

    pub fn merge(&mut self, other: Report) {
        for t in other.topics {
            self.topics.retain(|x| x.topic_id != t.topic_id);
            self.topics.push(t);
        }
        self.topics.sort_by_key(|t| t.topic_id);
    }

    /// Mean over topics that have `trait_`.
    pub fn trait_average(&self, trait_: Trait) -> Option<f64> {
        mean(self.topics.iter().filter_map(|t| t.traits.get(&trait_).copied()))
    }

    /// Mean of the per-topic averages.
    pub fn topic_grand_average(&self) -> Option<f64> {
        mean(self.topics.iter().filter_map(TopicReport::average))
    }

    /// Mean of the per-trait averages.
    pub fn trait_grand_average(&self) -> Option<f64> {
        mean(Trait::ALL.iter().filter_map(|&t| self.trait_average(t)))
    }

    fn present_traits(&self) -> Vec<Trait> {
        Trait::ALL
            .into_iter()
            .filter(|t| self.topics.iter().any(|r| r.traits.contains_key(t)))
            .collect()
    }

    /// Table cells; `digits` fixes the decimals, `None` prints full precision.
    fn rows(&self, digits: Option<usize>) -> Vec<Vec<String>> {
        let traits = self.present_traits();
        let fmt = |v: Option<f64>| match (v, digits) {
            (None, _) => "-".to_string(),
            (Some(v), Some(d)) => format!("{v:.d$}"),
            (Some(v), None) => v.to_string(),
        };
        let mut header = vec!["topic".to_string()];
        header.extend(traits.iter().map(|t| t.name().to_string()));
        header.extend(["AVG".to_string(), "class_acc".to_string(), "class_qwk".to_string()]);
        let mut rows = vec![header];
        for t in &self.topics {
            let mut row = vec![t.topic_id.to_string()];
            row.extend(traits.iter().map(|tr| fmt(t.traits.get(tr).copied())));
            row.push(fmt(t.average()));
            row.push(fmt(t.class_accuracy));
            row.push(fmt(t.class_qwk));
            rows.push(row);
        }
        let mut avg = vec!["AVG".to_string()];
        avg.extend(traits.iter().map(|&tr| fmt(self.trait_average(tr))));
        avg.push(fmt(self.topic_grand_average()));
        avg.push(fmt(mean(self.topics.iter().filter_map(|t| t.class_accuracy))));
        avg.push(fmt(mean(self.topics.iter().filter_map(|t| t.class_qwk))));
        rows.push(avg);
        rows
    }

    /// Whitespace-aligned table.
    pub fn to_table(&self) -> String {
        let rows = self.rows(Some(3));
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    /// Tab-separated, full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in self.rows(None) {
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }
}

/// Scores `essays` (all from `topic`) against the sealed gold labels.
pub fn evaluate(
    params: &Params,
    backend: &dyn EncoderBackend,
    essays: &[PreparedEssay],
    topic: &TopicSpec,
    gold: &SealedGold,
) -> Result<TopicReport> {
    if gold.target_topic_id() != topic.topic_id {
        return Err(Error::EvaluationUnavailable(format!(
            "gold sidecar is for topic {}, not {}",
            gold.target_topic_id(),
            topic.topic_id
        )));
    }
    let preds = predict(params, backend, essays)?;
    evaluate_predictions(&preds, topic, gold)
}

pub fn evaluate_predictions(preds: &[Prediction], topic: &TopicSpec, gold: &SealedGold) -> Result<TopicReport> {
    let mut traits = BTreeMap::new();
    for &t in &topic.traits {
        let range = topic.range_for(t);
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for pred in preds {
            let entry = gold.entry(&pred.essay_id).ok_or_else(|| {
                Error::EvaluationUnavailable(format!("no gold label for essay {:?}", pred.essay_id))
            })?;
            if let Some(raw) = entry.raw_scores[t.index()] {
                p.push(denormalize_score(pred.scores[t.index()].clamp(0.0, 1.0), range));
                g.push(raw);
            }
        }
        if !g.is_empty() {
            traits.insert(t, qwk(&p, &g, range.min, range.max)?);
        }
    }
    let (mut pc, mut gc) = (Vec::new(), Vec::new());
    for pred in preds {
        if let Some(c) = gold.entry(&pred.essay_id).and_then(|e| e.grade_class) {
            pc.push(argmax(ndarray::ArrayView1::from(&pred.probs[..])) as i32);
            gc.push(i32::from(c));
        }
    }
    let (class_accuracy, class_qwk) = if gc.is_empty() {
        (None, None)
    } else {
        let acc = pc.iter().zip(&gc).filter(|(a, b)| a == b).count() as f64 / gc.len() as f64;
        (Some(acc), Some(qwk(&pc, &gc, 0, NUM_GRADES as i32 - 1)?))
    };
    Ok(TopicReport {
        topic_id: topic.topic_id,
        num_essays: preds.len(),
        traits,
        class_accuracy,
        class_qwk,
    })
}

/// Writes `essay_id, topic_id, is_target, h_0 .. h_{D-1}` for every essay.
pub fn dump_embeddings(
    params: &Params,
    backend: &dyn EncoderBackend,
    essays: &[PreparedEssay],
    target_topic_id: u32,
    out_path: impl AsRef<Path>,
) -> Result<()> {
    let path = out_path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let dim = params.dims.hidden();
    let mut header = String::from("essay_id\ttopic_id\tis_target");
    for k in 0..dim {
        let _ = write!(header, "\th{k}");
    }
    writeln!(w, "{header}").map_err(|e| Error::file(path, e))?;
    for e in essays {
        let pass = forward_essay(params, backend, e)?;
        let mut line = format!("{}\t{}\t{}", e.essay_id, e.topic_id, u8::from(e.topic_id == target_topic_id));
        for v in pass.h.iter() {
            let _ = write!(line, "\t{v}");
        }
        writeln!(w, "{line}").map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Held-out accuracy of a freshly trained source-vs-target probe.
///
/// Classes are balanced by subsampling the larger side, features are
/// standardized on the training portion, and a `d -> 128 -> 2` perceptron is
/// fit with full-batch Adam; 30% of each class is held out.
pub fn probe_accuracy(source: &[Array1<f64>], target: &[Array1<f64>], seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    if source.len() < 4 || target.len() < 4 {
        return Err(Error::Config("probe needs at least 4 vectors per side".into()));
    }
    let mut rng = rng::stream(seed, streams::PROBE, 0);
    let n = source.len().min(target.len());
    let mut pick = |v: &[Array1<f64>]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.into_iter().map(|i| v[i].clone()).collect::<Vec<_>>()
    };
    let (src, tgt) = (pick(source), pick(target));
    let n_test = (n * 3).div_ceil(10);
    let mut train: Vec<(Array1<f64>, bool)> = Vec::new();
    let mut test: Vec<(Array1<f64>, bool)> = Vec::new();
    for (set, label) in [(&src, false), (&tgt, true)] {
        for (i, x) in set.iter().enumerate() {
            if i < n_test {
                test.push((x.clone(), label));
            } else {
                train.push((x.clone(), label));
            }
        }
    }
    let d = train[0].0.len();
    let mut mean = Array1::<f64>::zeros(d);
    for (x, _) in &train {
        mean += x;
    }
    mean /= train.len() as f64;
    let mut std = Array1::<f64>::zeros(d);
    for (x, _) in &train {
        std += &(x - &mean).mapv(|v| v * v);
    }
    std.mapv_inplace(|v| (v / train.len() as f64).sqrt().max(1e-8));
    let norm = |x: &Array1<f64>| (x - &mean) / &std;
    let train: Vec<(Array1<f64>, bool)> = train.iter().map(|(x, l)| (norm(x), *l)).collect();
    let test: Vec<(Array1<f64>, bool)> = test.iter().map(|(x, l)| (norm(x), *l)).collect();

    let mut disc = Discriminator::init(d, 128, &mut rng);
    let mut m = Discriminator::zeros(d, 128);
    let mut v = Discriminator::zeros(d, 128);
    let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8);
    for t in 1..=PROBE_STEPS {
        let mut grad = Discriminator::zeros(d, 128);
        for (x, label) in &train {
            let (_, dl, fwd) = disc_term(&disc, x.view(), *label);
            disc.backward(x.view(), &fwd, (dl / train.len() as f64).view(), &mut grad);
        }
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let layers = [
            (&mut disc.hidden, &grad.hidden, &mut m.hidden, &mut v.hidden),
            (&mut disc.output, &grad.output, &mut m.output, &mut v.output),
        ];
        for (p, g, mm, vv) in layers {
            for (((x, g), mi), vi) in p
                .weight
                .iter_mut()
                .chain(p.bias.iter_mut())
                .zip(g.weight.iter().chain(g.bias.iter()))
                .zip(mm.weight.iter_mut().chain(mm.bias.iter_mut()))
                .zip(vv.weight.iter_mut().chain(vv.bias.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, label)| {
            let logits = disc.forward(x.view()).logits;
            (logits[1] > logits[0]) == *label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

const PROBE_STEPS: i32 = 300;
