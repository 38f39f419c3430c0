//! Holistic grade classifier and its cross-entropy losses.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::NUM_GRADES;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, softmax, Linear};

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// `softmax(W2 relu(W1 h + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeClassifier {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassifierForward {
    pub hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl GradeClassifier {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GradeClassifier {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, NUM_GRADES, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GradeClassifier {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, NUM_GRADES),
        }
    }

    pub fn forward(&self, h: ArrayView1<f64>) -> ClassifierForward {
        let hidden_pre = self.hidden.forward(h);
        let hidden = relu(&hidden_pre);
        let logits = self.output.forward(hidden.view());
        let probs = Array1::from(softmax(logits.as_slice().expect("contiguous")));
        ClassifierForward {
            hidden_pre,
            hidden,
            logits,
            probs,
        }
    }

    pub fn classify(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.forward(h).probs
    }

    /// Backpropagates `dL/dlogits`; returns `dL/dh`.
    pub fn backward(
        &self,
        h: ArrayView1<f64>,
        fwd: &ClassifierForward,
        d_logits: ArrayView1<f64>,
        grads: &mut GradeClassifier,
    ) -> Array1<f64> {
        let d_hidden = self
            .output
            .backward(fwd.hidden.view(), d_logits, &mut grads.output);
        let d_pre = relu_backward(&fwd.hidden_pre, &d_hidden);
        self.hidden.backward(h, d_pre.view(), &mut grads.hidden)
    }
}

/// `-log p[label]` with the clamp, and its gradient with respect to the
/// logits that produced `probs`.
pub fn ce_term(probs: ArrayView1<f64>, label: u8) -> (f64, Array1<f64>) {
    let p = probs[label as usize];
    if p < LOG_CLAMP {
        return (-LOG_CLAMP.ln(), Array1::zeros(probs.len()));
    }
    let mut grad = probs.to_owned();
    grad[label as usize] -= 1.0;
    (-p.ln(), grad)
}

fn check_labels(probs: ArrayView2<f64>, labels: &[u8]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= probs.ncols()) {
        return Err(Error::Contract(format!("class label {bad} out of range")));
    }
    Ok(())
}

/// Mean negative log-probability of the true class over one topic's essays.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Contract("cross-entropy over an empty batch".into()));
    }
    let sum: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| ce_term(row, l).0)
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Per-topic mean cross-entropy summed over source topics.
pub fn source_ce_loss(topics: &[(ArrayView2<f64>, &[u8])]) -> Result<f64> {
    topics.iter().map(|(p, l)| cross_entropy(*p, l)).sum()
}
