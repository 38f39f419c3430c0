//! Source-vs-target topic discriminators behind a gradient reversal layer.
//!
//! Discriminator `i` separates source topic `i` from the target topic using
//! the raw encoder output. Class 1 means "target".

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, relu, relu_backward, softmax, Linear};

/// Identity forward; backward multiplies the upstream gradient by `-coeff`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub coeff: f64,
}

impl GradientReversal {
    pub fn new(coeff: f64) -> Result<Self> {
        if !(coeff >= 0.0) {
            return Err(Error::Config(format!("GRL coefficient must be >= 0, got {coeff}")));
        }
        Ok(GradientReversal { coeff })
    }

    pub fn forward<T: Clone>(&self, x: &T) -> T {
        x.clone()
    }

    pub fn backward(&self, grad: &Array1<f64>) -> Array1<f64> {
        grad * (-self.coeff)
    }
}

/// `d -> hidden -> 2` perceptron with a rectified hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorForward {
    pub hidden_pre: Array1<f64>,
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Discriminator {
            hidden: Linear::init(width, hidden, rng),
            output: Linear::init(hidden, 2, rng),
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        Discriminator {
            hidden: Linear::zeros(width, hidden),
            output: Linear::zeros(hidden, 2),
        }
    }

    pub fn forward(&self, h_cls: ArrayView1<f64>) -> DiscriminatorForward {
        let hidden_pre = self.hidden.forward(h_cls);
        let hidden = relu(&hidden_pre);
        let logits = self.output.forward(hidden.view());
        DiscriminatorForward {
            hidden_pre,
            hidden,
            logits,
        }
    }

    /// Returns `dL/dh_cls` (before any reversal).
    pub fn backward(
        &self,
        h_cls: ArrayView1<f64>,
        fwd: &DiscriminatorForward,
        d_logits: ArrayView1<f64>,
        grads: &mut Discriminator,
    ) -> Array1<f64> {
        let d_hidden = self.output.backward(fwd.hidden.view(), d_logits, &mut grads.output);
        let d_pre = relu_backward(&fwd.hidden_pre, &d_hidden);
        self.hidden.backward(h_cls, d_pre.view(), &mut grads.hidden)
    }
}

/// One discriminator per source topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSet {
    pub discriminators: Vec<Discriminator>,
}

impl DiscriminatorSet {
    pub fn init<R: Rng + ?Sized>(num_sources: usize, width: usize, hidden: usize, rng: &mut R) -> Self {
        DiscriminatorSet {
            discriminators: (0..num_sources)
                .map(|_| Discriminator::init(width, hidden, rng))
                .collect(),
        }
    }

    pub fn zeros(num_sources: usize, width: usize, hidden: usize) -> Self {
        DiscriminatorSet {
            discriminators: (0..num_sources).map(|_| Discriminator::zeros(width, hidden)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.discriminators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discriminators.is_empty()
    }

    /// Probability that `h_cls` comes from the target topic, according to
    /// discriminator `i`.
    pub fn discriminate(&self, h_cls: ArrayView1<f64>, i: usize) -> Result<f64> {
        let disc = self
            .discriminators
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no discriminator for source {i}")))?;
        let fwd = disc.forward(h_cls);
        Ok(softmax(fwd.logits.as_slice().expect("contiguous"))[1])
    }

    /// `-sum_i [ sum_{x in S_i} log(1 - p_i(x)) + sum_{x in T} log p_i(x) ]`.
    pub fn adversarial_loss(&self, source_batches: &[Vec<Array1<f64>>], target_batch: &[Array1<f64>]) -> Result<f64> {
        if target_batch.is_empty() {
            return Err(Error::Contract("adversarial loss needs target essays".into()));
        }
        if source_batches.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} source batches for {} discriminators",
                source_batches.len(),
                self.len()
            )));
        }
        let mut loss = 0.0;
        for (disc, batch) in self.discriminators.iter().zip(source_batches) {
            for h in batch {
                loss += disc_term(disc, h.view(), false).0;
            }
            for h in target_batch {
                loss += disc_term(disc, h.view(), true).0;
            }
        }
        Ok(loss)
    }
}

/// Negative log-likelihood of the true domain and its logit gradient.
pub fn disc_term(disc: &Discriminator, h_cls: ArrayView1<f64>, is_target: bool) -> (f64, Array1<f64>, DiscriminatorForward) {
    let fwd = disc.forward(h_cls);
    let logits = fwd.logits.as_slice().expect("contiguous");
    let label = usize::from(is_target);
    let loss = -log_softmax(logits)[label];
    let mut grad = Array1::from(softmax(logits));
    grad[label] -= 1.0;
    (loss, grad, fwd)
}
