//! Feedforward classifier: dense layers with ReLU, softmax head, mini-batch
//! SGD at a fixed learning rate with weight decay.

use super::{
    init_uniform, seeded_rng, softmax_rows, weighted_log_loss, ClassStats, LossMode, Network,
    TrainConfig,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// row-major `out_dim x in_dim`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            w: init_uniform(rng, in_dim * out_dim, in_dim, out_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// y = W x + b for a batch of rows.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.out_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let oi = &mut out[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, (wrow, &bias)) in oi
                .iter_mut()
                .zip(self.w.chunks_exact(self.in_dim).zip(&self.b))
            {
                let mut acc = bias;
                for (wv, xv) in wrow.iter().zip(xi) {
                    acc += wv * xv;
                }
                *o = acc;
            }
        }
        out
    }
}

/// Dense network with ReLU hidden activations and a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MlpGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl MlpModel {
    /// `hidden` may be empty for a linear (softmax) classifier.
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::new_seeded(prev, h, &mut rng));
            prev = h;
        }
        layers.push(DenseLayer::new_seeded(prev, num_classes, &mut rng));
        MlpModel {
            layers,
            num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect()
    }

    /// Class probabilities for a batch of feature rows.
    pub fn forward(&self, batch: &[f64], n: usize) -> Result<Vec<f64>> {
        if batch.len() != n * self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch of {} values does not match {} rows x {} dims",
                batch.len(),
                n,
                self.input_dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input to forward pass".into()));
        }
        let (mut acts, _) = self.forward_internal(batch, n);
        let logits = acts.pop().expect("at least one layer");
        let mut probs = logits;
        softmax_rows(&mut probs, self.num_classes);
        Ok(probs)
    }

    /// Pre-activation outputs of every layer (ReLU applied between layers when
    /// propagating); returns (per-layer outputs post-activation except last,
    /// and the inputs actually fed to each layer).
    fn forward_internal(&self, batch: &[f64], n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = batch.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut out = layer.forward(&cur, n);
            if li + 1 < self.layers.len() {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = out.clone();
            outputs.push(out);
        }
        (outputs, inputs)
    }

    /// Weighted log-loss and gradients for a batch.
    pub fn loss_and_grads(
        &self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        mode: LossMode,
    ) -> Result<(f64, MlpGrads)> {
        let n = labels.len();
        if batch.len() != n * self.input_dim() {
            return Err(Error::Dimension("batch does not match label count".into()));
        }
        let (outputs, inputs) = self.forward_internal(batch, n);
        let mut probs = outputs.last().unwrap().clone();
        softmax_rows(&mut probs, self.num_classes);
        let loss = weighted_log_loss(&probs, labels, self.num_classes, stats, mode)?;

        // delta at the softmax head: (p - onehot) * w_i / N
        let c = self.num_classes;
        let mut delta = probs;
        for (i, &y) in labels.iter().enumerate() {
            let wi = stats.weight(y, mode) / n as f64;
            let row = &mut delta[i * c..(i + 1) * c];
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v *= wi;
            }
        }

        let mut grads = MlpGrads {
            w: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        };
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &inputs[li];
            let gw = &mut grads.w[li];
            let gb = &mut grads.b[li];
            for i in 0..n {
                let di = &delta[i * layer.out_dim..(i + 1) * layer.out_dim];
                let xi = &input[i * layer.in_dim..(i + 1) * layer.in_dim];
                for (o, &dv) in di.iter().enumerate() {
                    gb[o] += dv;
                    let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gv, &xv) in grow.iter_mut().zip(xi) {
                        *gv += dv * xv;
                    }
                }
            }
            if li > 0 {
                // propagate: delta_prev = W^T delta, masked by ReLU
                let prev_out = &outputs[li - 1];
                let mut prev_delta = vec![0.0; n * layer.in_dim];
                for i in 0..n {
                    let di = &delta[i * layer.out_dim..(i + 1) * layer.out_dim];
                    let pd = &mut prev_delta[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (o, &dv) in di.iter().enumerate() {
                        let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, &wv) in pd.iter_mut().zip(wrow) {
                            *p += dv * wv;
                        }
                    }
                    let po = &prev_out[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (p, &a) in pd.iter_mut().zip(po) {
                        if a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
                delta = prev_delta;
            }
        }
        Ok((loss, grads))
    }

    /// One SGD step: w <- w - lr (grad + decay w); biases skip the decay term.
    pub fn sgd_step(
        &mut self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch, labels, stats, cfg.loss_mode)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
        }
        for g in grads.w.iter().chain(grads.b.iter()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(
                    "non-finite gradient; aborting training".into(),
                ));
            }
        }
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.w.iter().zip(grads.b.iter()))
        {
            for (w, &g) in layer.w.iter_mut().zip(gw) {
                *w -= cfg.learning_rate * (g + cfg.weight_decay * *w);
            }
            for (b, &g) in layer.b.iter_mut().zip(gb) {
                *b -= cfg.learning_rate * g;
            }
        }
        Ok(loss)
    }

    pub fn predict(&self, batch: &[f64], n: usize) -> Result<Vec<usize>> {
        let probs = self.forward(batch, n)?;
        Ok(probs
            .chunks_exact(self.num_classes)
            .map(argmax_lowest_tie)
            .collect())
    }
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax_lowest_tie(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

impl Network for MlpModel {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn get_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&params[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&params[i..i + nb]);
            i += nb;
        }
    }

    fn loss_and_grad(
        &self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        mode: LossMode,
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self.loss_and_grads(batch, labels, stats, mode)?;
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads.w.iter().zip(grads.b.iter()) {
            flat.extend_from_slice(gw);
            flat.extend_from_slice(gb);
        }
        Ok((loss, flat))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Shuffled mini-batch SGD over a feature matrix. `features` is `n x dim`
/// row-major f32 (as stored on disk); labels are class ids.
pub fn train_classifier(
    features: &[f32],
    dim: usize,
    labels: &[usize],
    stats: &ClassStats,
    cfg: &TrainConfig,
    hidden: &[usize],
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if features.len() != n * dim {
        return Err(Error::Dimension("feature matrix does not match labels".into()));
    }
    let num_classes = stats.num_classes();
    let mut model = MlpModel::new(dim, hidden, num_classes, cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_x = Vec::new();
    let mut batch_y = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend(features[i * dim..(i + 1) * dim].iter().map(|&v| v as f64));
                batch_y.push(labels[i]);
            }
            epoch_loss += model.sgd_step(&batch_x, &batch_y, stats, cfg)?;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok((model, TrainReport { epoch_losses }))
}
