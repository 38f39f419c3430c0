//! Per-trait regression scorers with attention across traits.
//!
//! Each trait `j` transforms the shared representation `h` with its own
//! rectified linear layer, attends over the other traits' transformed
//! vectors, and maps `[h'_j; o_j]` to a score in `(0, 1)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::NUM_TRAITS;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, sigmoid, softmax, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitHeads {
    /// `h -> h'_j`, width `H -> H`.
    pub transforms: Vec<Linear>,
    /// `[h'_j; o_j] -> logit`, width `2H -> 1`.
    pub outputs: Vec<Linear>,
}

/// Attention result for one trait.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitAttention {
    /// Weights over the other traits, in trait order with `j` skipped.
    pub weights: Vec<f64>,
    pub attended: Array1<f64>,
    /// `[h'_j; o_j]`.
    pub combined: Array1<f64>,
}

/// Cached forward pass over all traits.
#[derive(Debug, Clone)]
pub struct HeadsForward {
    pub pre: Array2<f64>,
    pub transformed: Array2<f64>,
    pub attention: Vec<TraitAttention>,
    pub scores: Vec<f64>,
}

impl TraitHeads {
    pub fn init<R: Rng + ?Sized>(width: usize, num_traits: usize, rng: &mut R) -> Self {
        TraitHeads {
            transforms: (0..num_traits).map(|_| Linear::init(width, width, rng)).collect(),
            outputs: (0..num_traits).map(|_| Linear::init(2 * width, 1, rng)).collect(),
        }
    }

    pub fn zeros(width: usize, num_traits: usize) -> Self {
        TraitHeads {
            transforms: (0..num_traits).map(|_| Linear::zeros(width, width)).collect(),
            outputs: (0..num_traits).map(|_| Linear::zeros(2 * width, 1)).collect(),
        }
    }

    pub fn num_traits(&self) -> usize {
        self.transforms.len()
    }

    pub fn width(&self) -> usize {
        self.transforms[0].in_dim()
    }

    /// `relu(w_j h + b_j)`.
    pub fn trait_transform(&self, h: ArrayView1<f64>, j: usize) -> Array1<f64> {
        relu(&self.transforms[j].forward(h))
    }

    /// `sigmoid(w_j^y n_j + b_j^y)`.
    pub fn predict_trait_score(&self, combined: ArrayView1<f64>, j: usize) -> f64 {
        sigmoid(self.outputs[j].forward(combined)[0])
    }

    pub fn forward(&self, h: ArrayView1<f64>) -> Result<HeadsForward> {
        let k = self.num_traits();
        let width = self.width();
        let mut pre = Array2::zeros((k, width));
        for j in 0..k {
            pre.row_mut(j).assign(&self.transforms[j].forward(h));
        }
        let transformed = pre.mapv(|v| v.max(0.0));
        let mut attention = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        for j in 0..k {
            let att = trait_attention(transformed.view(), j)?;
            scores.push(self.predict_trait_score(att.combined.view(), j));
            attention.push(att);
        }
        Ok(HeadsForward {
            pre,
            transformed,
            attention,
            scores,
        })
    }

    /// Backpropagates `dL/dscore_j` and returns `dL/dh`.
    pub fn backward(
        &self,
        h: ArrayView1<f64>,
        fwd: &HeadsForward,
        d_scores: &[f64],
        grads: &mut TraitHeads,
    ) -> Array1<f64> {
        let k = self.num_traits();
        let width = self.width();
        let scale = 1.0 / (width as f64).sqrt();
        let mut d_transformed: Array2<f64> = Array2::zeros((k, width));
        for j in 0..k {
            let s_j = fwd.scores[j];
            let d_logit = d_scores[j] * s_j * (1.0 - s_j);
            if d_logit == 0.0 {
                continue;
            }
            let att = &fwd.attention[j];
            let d_comb = self.outputs[j].backward(
                att.combined.view(),
                ndarray::arr1(&[d_logit]).view(),
                &mut grads.outputs[j],
            );
            let mut row = d_transformed.row_mut(j);
            row += &d_comb.slice(s![..width]);
            let d_o = d_comb.slice(s![width..]);

            let others: Vec<usize> = (0..k).filter(|&i| i != j).collect();
            let d_v: Vec<f64> = others
                .iter()
                .map(|&i| d_o.dot(&fwd.transformed.row(i)))
                .collect();
            let mean_dv: f64 = att.weights.iter().zip(&d_v).map(|(v, g)| v * g).sum();
            for (idx, &i) in others.iter().enumerate() {
                let v = att.weights[idx];
                let d_s = v * (d_v[idx] - mean_dv);
                // o_j = sum_i v_i F_i
                d_transformed.row_mut(i).scaled_add(v, &d_o);
                // score = F_j . F_i * scale
                let f_i = fwd.transformed.row(i).to_owned();
                let f_j = fwd.transformed.row(j).to_owned();
                d_transformed.row_mut(j).scaled_add(d_s * scale, &f_i);
                d_transformed.row_mut(i).scaled_add(d_s * scale, &f_j);
            }
        }
        let mut d_h = Array1::zeros(h.len());
        for j in 0..k {
            let d_pre = relu_backward(&fwd.pre.row(j).to_owned(), &d_transformed.row(j).to_owned());
            if d_pre.iter().all(|&v| v == 0.0) {
                continue;
            }
            d_h += &self.transforms[j].backward(h, d_pre.view(), &mut grads.transforms[j]);
        }
        d_h
    }
}

/// Scaled dot-product attention of trait `j` over every other trait's
/// transformed vector (rows of `transformed`).
pub fn trait_attention(transformed: ArrayView2<f64>, j: usize) -> Result<TraitAttention> {
    let k = transformed.nrows();
    if k < 2 {
        return Err(Error::Config("trait attention needs at least two traits".into()));
    }
    if j >= k {
        return Err(Error::Contract(format!("trait index {j} out of range {k}")));
    }
    let width = transformed.ncols();
    let scale = 1.0 / (width as f64).sqrt();
    let query = transformed.row(j);
    let others: Vec<usize> = (0..k).filter(|&i| i != j).collect();
    let scores: Vec<f64> = others
        .iter()
        .map(|&i| query.dot(&transformed.row(i)) * scale)
        .collect();
    let weights = softmax(&scores);
    let mut attended = Array1::zeros(width);
    for (&i, &w) in others.iter().zip(&weights) {
        attended.scaled_add(w, &transformed.row(i));
    }
    let mut combined = Array1::zeros(2 * width);
    combined.slice_mut(s![..width]).assign(&query);
    combined.slice_mut(s![width..]).assign(&attended);
    Ok(TraitAttention {
        weights,
        attended,
        combined,
    })
}

/// Mean squared error over unmasked cells of `B x K` matrices.
pub fn masked_mse(preds: ArrayView2<f64>, gold: ArrayView2<f64>, mask: ArrayView2<bool>) -> Result<f64> {
    if preds.dim() != gold.dim() || preds.dim() != mask.dim() {
        return Err(Error::Contract("masked_mse shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, g), &m) in preds.iter().zip(gold.iter()).zip(mask.iter()) {
        if m {
            sum += (p - g).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract(
            "every trait is masked in this batch; the batch carries no regression targets".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Gold matrix and mask for a set of essays' unit scores.
pub fn gold_and_mask(scores: &[[Option<f64>; NUM_TRAITS]]) -> (Array2<f64>, Array2<bool>) {
    let b = scores.len();
    let mut gold = Array2::zeros((b, NUM_TRAITS));
    let mut mask = Array2::from_elem((b, NUM_TRAITS), false);
    for (r, row) in scores.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                gold[[r, j]] = *v;
                mask[[r, j]] = true;
            }
        }
    }
    (gold, mask)
}
