//! Minimal neural-network core: dense and convolutional layers, softmax, the
//! inverse-class-frequency weighted log-loss, fixed-rate SGD with weight
//! decay, and finite-difference gradient verification.
//!
//! All arithmetic is f64; model files store f32 per the ZOMD format.

pub mod conv;
pub mod mlp;
pub mod modelio;

pub use conv::{ConvArch, ConvNetModel};
pub use mlp::{train_classifier, DenseLayer, MlpModel, TrainReport};
pub use modelio::{load_model, save_model, ArchSpec, ModelHeader, NetModel};

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    Symmetric,
    Asymmetric,
}

/// Training-class frequencies f_c with their raw counts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("no labeled examples for class stats".into()));
        }
        let frequencies = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(ClassStats {
            counts,
            frequencies,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Per-example loss weight: 1/f_y in asymmetric mode, 1 otherwise.
    pub fn weight(&self, label: usize, mode: LossMode) -> f64 {
        match mode {
            LossMode::Symmetric => 1.0,
            LossMode::Asymmetric => {
                let f = self.frequencies[label];
                if f > 0.0 {
                    1.0 / f
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            loss_mode: LossMode::Asymmetric,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Data("negative learning rate or decay".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Data("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// -(1/N) sum_i w_i ln p(y_i); probabilities clamped at 1e-12 before the log.
pub fn weighted_log_loss(
    probs: &[f64],
    labels: &[usize],
    num_classes: usize,
    stats: &ClassStats,
    mode: LossMode,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 || probs.len() != n * num_classes {
        return Err(Error::Dimension("probability rows do not match labels".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        let p = probs[i * num_classes + y].max(PROB_CLAMP);
        total += stats.weight(y, mode) * (-p.ln());
    }
    Ok(total / n as f64)
}

/// Row-wise softmax in place over `num_classes` columns.
pub(crate) fn softmax_rows(logits: &mut [f64], num_classes: usize) {
    for row in logits.chunks_exact_mut(num_classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Glorot-style uniform init in +-sqrt(6/(fan_in+fan_out)).
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Anything whose parameters can be flattened for finite-difference checks.
pub trait Network {
    fn num_params(&self) -> usize;
    fn get_params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    /// Loss of the pure objective (no weight decay) and its gradient, flat in
    /// the same order as `get_params`.
    fn loss_and_grad(
        &self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        mode: LossMode,
    ) -> Result<(f64, Vec<f64>)>;
}

/// Max relative error between analytic gradients and central finite
/// differences over every parameter.
pub fn gradient_check<N: Network + Clone>(
    model: &N,
    batch: &[f64],
    labels: &[usize],
    stats: &ClassStats,
    mode: LossMode,
    eps: f64,
) -> Result<f64> {
    let (_, grad) = model.loss_and_grad(batch, labels, stats, mode)?;
    let mut probe = model.clone();
    let mut params = model.get_params();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        probe.set_params(&params);
        let (lp, _) = probe.loss_and_grad(batch, labels, stats, mode)?;
        params[i] = orig - eps;
        probe.set_params(&params);
        let (lm, _) = probe.loss_and_grad(batch, labels, stats, mode)?;
        params[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
        let rel = (grad[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_stats(c: usize) -> ClassStats {
        ClassStats::from_counts(vec![10; c]).unwrap()
    }

    #[test]
    fn perfect_probs_zero_loss() {
        let stats = uniform_stats(2);
        let probs = vec![1.0, 0.0, 0.0, 1.0];
        let loss =
            weighted_log_loss(&probs, &[0, 1], 2, &stats, LossMode::Symmetric).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn uniform_frequencies_scale_loss_by_c() {
        let stats = uniform_stats(4);
        let probs = vec![0.4, 0.2, 0.2, 0.2, 0.1, 0.6, 0.2, 0.1];
        let labels = [0usize, 1];
        let sym = weighted_log_loss(&probs, &labels, 4, &stats, LossMode::Symmetric).unwrap();
        let asym = weighted_log_loss(&probs, &labels, 4, &stats, LossMode::Asymmetric).unwrap();
        assert!((asym - 4.0 * sym).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_weighted_loss() {
        // two examples, f = {0.9, 0.1}, both correct-class probs 0.5
        // -> -(1/2) ln(1/2) (1/0.9 + 1/0.1) ~ 3.851
        let stats = ClassStats::from_counts(vec![90, 10]).unwrap();
        let probs = vec![0.5, 0.5, 0.5, 0.5];
        let loss =
            weighted_log_loss(&probs, &[0, 1], 2, &stats, LossMode::Asymmetric).unwrap();
        let expect = -0.5 * (0.5f64).ln() * (1.0 / 0.9 + 1.0 / 0.1);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((loss - 3.851).abs() < 1e-3);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let stats = uniform_stats(2);
        let probs = vec![0.0, 1.0];
        let loss =
            weighted_log_loss(&probs, &[0], 2, &stats, LossMode::Symmetric).unwrap();
        assert!(loss.is_finite());
        assert!(loss > 20.0); // -ln(1e-12)
    }

    #[test]
    fn class_stats_sum_to_one() {
        let stats = ClassStats::from_counts(vec![90, 9, 1]).unwrap();
        assert!((stats.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((stats.frequencies[0] - 0.90).abs() < 1e-12);
        assert!((stats.frequencies[2] - 0.01).abs() < 1e-12);
        assert!(ClassStats::from_counts(vec![0, 0]).is_err());
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut logits = vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        softmax_rows(&mut logits, 3);
        for row in logits.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
