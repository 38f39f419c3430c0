//! Target-topic memory bank and neighborhood pseudo-labels.
//!
//! The bank holds one entry per target essay: an exponential moving average
//! of its representation `h` and of its sharpened class distribution.
//! Pseudo-labels average the stored distributions of the `k` most
//! cosine-similar other essays.

use std::collections::HashMap;
use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classification::ce_term;
use crate::error::{Error, Result};

/// `p_k^tau / sum_k p_k^tau`.
pub fn sharpen(p: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("sharpening temperature must be > 0, got {tau}")));
    }
    let powered = p.mapv(|v| v.max(0.0).powf(tau));
    let sum = powered.sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Contract("cannot sharpen an all-zero distribution".into()));
    }
    Ok(powered / sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub essay_id: String,
    pub feature: Array1<f64>,
    pub soft_label: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub lambda: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class: u8,
    pub soft: Array1<f64>,
    /// Neighbor essay ids, most similar first.
    pub neighbors: Vec<String>,
}

/// Writes `essay_id, class, soft label, neighbor ids` rows as TSV.
pub fn write_pseudo_labels<W: Write>(writer: W, rows: &[(String, PseudoLabel)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(writer);
    writeln!(out, "essay_id\tpseudo_class\tsoft_label\tneighbors")?;
    for (id, pl) in rows {
        let soft: Vec<String> = pl.soft.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{id}\t{}\t{}\t{}", pl.class, soft.join(","), pl.neighbors.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("EMA smoothing must lie in [0,1], got {lambda}")));
    }
    Ok(())
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MemoryBank {
    /// Builds the bank from initial representations and raw class
    /// probabilities; stored labels are sharpened.
    pub fn from_predictions(
        essay_ids: &[String],
        features: &[Array1<f64>],
        probs: &[Array1<f64>],
        lambda: f64,
        tau: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if essay_ids.is_empty() {
            return Err(Error::Config("memory bank needs at least one target essay".into()));
        }
        if essay_ids.len() != features.len() || essay_ids.len() != probs.len() {
            return Err(Error::Contract("memory bank inputs differ in length".into()));
        }
        let mut entries = Vec::with_capacity(essay_ids.len());
        for ((id, f), p) in essay_ids.iter().zip(features).zip(probs) {
            entries.push(BankEntry {
                essay_id: id.clone(),
                feature: f.clone(),
                soft_label: sharpen(p.view(), tau)?,
            });
        }
        let mut bank = MemoryBank {
            entries,
            index: HashMap::new(),
            lambda,
            tau,
        };
        bank.rebuild_index()?;
        Ok(bank)
    }

    /// Restores the id index after deserialization.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, e) in self.entries.iter().enumerate() {
            if self.index.insert(e.essay_id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate bank entry {:?}", e.essay_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, essay_id: &str) -> Option<&BankEntry> {
        self.index.get(essay_id).map(|&i| &self.entries[i])
    }

    /// EMA update of one entry toward `f_new` and `sharpen(p_new)`.
    pub fn update(&mut self, essay_id: &str, f_new: ArrayView1<f64>, p_new: ArrayView1<f64>) -> Result<()> {
        let lambda = self.lambda;
        let sharpened = sharpen(p_new, self.tau)?;
        self.update_raw(essay_id, f_new, sharpened.view(), lambda)
    }

    /// EMA update with an explicit smoothing factor and an already-processed
    /// soft label.
    pub fn update_raw(
        &mut self,
        essay_id: &str,
        f_new: ArrayView1<f64>,
        soft: ArrayView1<f64>,
        lambda: f64,
    ) -> Result<()> {
        check_lambda(lambda)?;
        let &i = self
            .index
            .get(essay_id)
            .ok_or_else(|| Error::Contract(format!("essay {essay_id:?} is not in the memory bank")))?;
        let entry = &mut self.entries[i];
        if entry.feature.len() != f_new.len() || entry.soft_label.len() != soft.len() {
            return Err(Error::Contract("memory bank update has the wrong width".into()));
        }
        entry.feature.zip_mut_with(&f_new, |old, &new| *old = lambda * *old + (1.0 - lambda) * new);
        entry
            .soft_label
            .zip_mut_with(&soft, |old, &new| *old = lambda * *old + (1.0 - lambda) * new);
        Ok(())
    }

    /// Pseudo-label for `query_id` from its `k` nearest neighbors (excluding
    /// itself) by cosine similarity between `h_t` and stored features.
    /// Similarity ties are broken by ascending essay id.
    pub fn knn_pseudo_label(&self, h_t: ArrayView1<f64>, query_id: &str, k: usize) -> Result<PseudoLabel> {
        if k == 0 {
            return Err(Error::Config("neighbor count must be at least 1".into()));
        }
        let mut candidates: Vec<(f64, &BankEntry)> = self
            .entries
            .iter()
            .filter(|e| e.essay_id != query_id)
            .map(|e| (cosine(h_t, e.feature.view()), e))
            .collect();
        if candidates.len() < k {
            return Err(Error::Contract(format!(
                "{k} neighbors requested but only {} available",
                candidates.len()
            )));
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.essay_id.cmp(&b.1.essay_id))
        });
        let top = &candidates[..k];
        let mut soft = Array1::zeros(top[0].1.soft_label.len());
        for (_, e) in top {
            soft += &e.soft_label;
        }
        soft /= k as f64;
        Ok(PseudoLabel {
            class: argmax(soft.view()) as u8,
            soft,
            neighbors: top.iter().map(|(_, e)| e.essay_id.clone()).collect(),
        })
    }
}

/// `(sum over the batch of -log p[pseudo]) / |T|`.
pub fn target_ce_loss(batch_probs: ArrayView2<f64>, pseudo_labels: &[u8], target_size: usize) -> Result<f64> {
    if batch_probs.nrows() != pseudo_labels.len() {
        return Err(Error::Contract("pseudo-label count differs from batch size".into()));
    }
    if target_size == 0 {
        return Err(Error::Config("target set is empty".into()));
    }
    let mut sum = 0.0;
    for (row, &l) in batch_probs.rows().into_iter().zip(pseudo_labels) {
        if l as usize >= row.len() {
            return Err(Error::Contract(format!("pseudo-label {l} out of range")));
        }
        sum += ce_term(row, l).0;
    }
    Ok(sum / target_size as f64)
}
