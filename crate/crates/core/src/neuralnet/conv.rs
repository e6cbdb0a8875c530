//! Small convolutional network: valid 5x5 convolutions, 3x3/stride-2 max
//! pooling, ReLU, dense layers, softmax head. Used for the local superpixel
//! convnet and the built-in distant/global feature providers.

use super::mlp::DenseLayer;
use super::{
    seeded_rng, softmax_rows, weighted_log_loss, ClassStats, LossMode, Network, TrainConfig,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvArch {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    /// per conv stage, whether a pool follows; stages where the map is
    /// smaller than the pooling window skip the pool
    pub pools: Vec<bool>,
    pub dense: Vec<usize>,
    pub num_classes: usize,
}

impl ConvArch {
    /// conv(32)-pool-relu, conv(32)-pool-relu, conv(64)-relu on a 35x35x3
    /// crop, then two 1152-unit dense layers and a softmax head.
    pub fn standard_local(num_classes: usize) -> Self {
        Self::with_defaults((3, 35, 35), vec![32, 32, 64], vec![1152, 1152], num_classes)
    }

    pub fn with_defaults(
        input: (usize, usize, usize),
        filters: Vec<usize>,
        dense: Vec<usize>,
        num_classes: usize,
    ) -> Self {
        let mut arch = ConvArch {
            input,
            filters,
            kernel: 5,
            pool_size: 3,
            pool_stride: 2,
            pools: Vec::new(),
            dense,
            num_classes,
        };
        arch.pools = arch.feasible_pools();
        arch
    }

    fn feasible_pools(&self) -> Vec<bool> {
        let (_, mut h, mut w) = self.input;
        let mut pools = Vec::with_capacity(self.filters.len());
        for _ in &self.filters {
            h -= self.kernel - 1;
            w -= self.kernel - 1;
            let can = h >= self.pool_size && w >= self.pool_size;
            pools.push(can);
            if can {
                h = (h - self.pool_size) / self.pool_stride + 1;
                w = (w - self.pool_size) / self.pool_stride + 1;
            }
        }
        pools
    }

    /// (channels, height, width) after every conv(+pool) stage.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (_, mut h, mut w) = self.input;
        let mut shapes = Vec::new();
        for (i, &f) in self.filters.iter().enumerate() {
            if h < self.kernel || w < self.kernel {
                return Err(Error::Dimension(format!(
                    "stage {i}: {h}x{w} map smaller than {} kernel",
                    self.kernel
                )));
            }
            h -= self.kernel - 1;
            w -= self.kernel - 1;
            if self.pools[i] {
                if h < self.pool_size || w < self.pool_size {
                    return Err(Error::Dimension(format!(
                        "stage {i}: {h}x{w} map smaller than pooling window"
                    )));
                }
                h = (h - self.pool_size) / self.pool_stride + 1;
                w = (w - self.pool_size) / self.pool_stride + 1;
            }
            shapes.push((f, h, w));
        }
        Ok(shapes)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let shapes = self.stage_shapes()?;
        let (c, h, w) = *shapes.last().ok_or_else(|| {
            Error::Data("convnet needs at least one conv stage".into())
        })?;
        Ok(c * h * w)
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub in_c: usize,
    pub out_c: usize,
    /// `out_c x in_c x k x k`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetModel {
    pub arch: ConvArch,
    pub convs: Vec<ConvStage>,
    pub dense: Vec<DenseLayer>,
}

struct ForwardCache {
    /// input to each conv stage (c,h,w flattened)
    conv_inputs: Vec<Vec<f64>>,
    /// conv output pre-pool
    conv_outputs: Vec<Vec<f64>>,
    /// post-pool pre-relu values and the argmax source index per pooled cell
    pool_outputs: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
    /// inputs to each dense layer (post-relu of previous)
    dense_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ConvNetModel {
    pub fn new(arch: ConvArch, seed: u64) -> Result<Self> {
        arch.stage_shapes()?;
        let mut rng = seeded_rng(seed);
        let k2 = arch.kernel * arch.kernel;
        let mut convs = Vec::new();
        let mut in_c = arch.input.0;
        for &out_c in &arch.filters {
            let fan_in = in_c * k2;
            let fan_out = out_c * k2;
            convs.push(ConvStage {
                in_c,
                out_c,
                w: super::init_uniform(&mut rng, out_c * in_c * k2, fan_in, fan_out),
                b: vec![0.0; out_c],
            });
            in_c = out_c;
        }
        let mut dense = Vec::new();
        let mut prev = arch.flat_dim()?;
        for &d in &arch.dense {
            dense.push(DenseLayer::new_seeded(prev, d, &mut rng));
            prev = d;
        }
        dense.push(DenseLayer::new_seeded(prev, arch.num_classes, &mut rng));
        Ok(ConvNetModel { arch, convs, dense })
    }

    fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.arch.input_len() {
            return Err(Error::Dimension(format!(
                "convnet input {} does not match {:?}",
                input.len(),
                self.arch.input
            )));
        }
        let k = self.arch.kernel;
        let (mut c, mut h, mut w) = self.arch.input;
        let mut cur = input.to_vec();
        let mut cache = ForwardCache {
            conv_inputs: Vec::new(),
            conv_outputs: Vec::new(),
            pool_outputs: Vec::new(),
            pool_argmax: Vec::new(),
            dense_inputs: Vec::new(),
            logits: Vec::new(),
        };
        for (si, stage) in self.convs.iter().enumerate() {
            cache.conv_inputs.push(cur.clone());
            let oh = h - k + 1;
            let ow = w - k + 1;
            let mut out = vec![0.0; stage.out_c * oh * ow];
            for oc in 0..stage.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = stage.b[oc];
                        for ic in 0..c {
                            let wbase = ((oc * c + ic) * k) * k;
                            let ibase = ic * h * w;
                            for ky in 0..k {
                                let irow = ibase + (oy + ky) * w + ox;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    acc += stage.w[wrow + kx] * cur[irow + kx];
                                }
                            }
                        }
                        out[oc * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
            cache.conv_outputs.push(out.clone());
            c = stage.out_c;
            h = oh;
            w = ow;
            if self.arch.pools[si] {
                let ps = self.arch.pool_size;
                let st = self.arch.pool_stride;
                let ph = (h - ps) / st + 1;
                let pw = (w - ps) / st + 1;
                let mut pooled = vec![0.0; c * ph * pw];
                let mut argmax = vec![0u32; c * ph * pw];
                for ch in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0u32;
                            for dy in 0..ps {
                                for dx in 0..ps {
                                    let iy = py * st + dy;
                                    let ix = px * st + dx;
                                    let idx = ch * h * w + iy * w + ix;
                                    if out[idx] > best {
                                        best = out[idx];
                                        best_i = idx as u32;
                                    }
                                }
                            }
                            pooled[ch * ph * pw + py * pw + px] = best;
                            argmax[ch * ph * pw + py * pw + px] = best_i;
                        }
                    }
                }
                cache.pool_outputs.push(pooled.clone());
                cache.pool_argmax.push(argmax);
                cur = pooled;
                h = ph;
                w = pw;
            } else {
                cache.pool_outputs.push(out.clone());
                cache.pool_argmax.push(Vec::new());
                cur = out.clone();
            }
            // ReLU after pooling
            for v in &mut cur {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        // dense stack; ReLU between hidden layers, logits at the end
        for (di, layer) in self.dense.iter().enumerate() {
            cache.dense_inputs.push(cur.clone());
            let mut out = layer.forward(&cur, 1);
            if di + 1 < self.dense.len() {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = out;
        }
        cache.logits = cur;
        Ok(cache)
    }

    /// Softmax output for one crop.
    pub fn forward_single(&self, input: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(input)?;
        let mut probs = cache.logits;
        softmax_rows(&mut probs, self.arch.num_classes);
        Ok(probs)
    }

    /// Post-ReLU activations of the last hidden dense layer; the feature
    /// vector emitted by built-in providers.
    pub fn penultimate(&self, input: &[f64]) -> Result<Vec<f64>> {
        if self.dense.len() < 2 {
            return Err(Error::Data(
                "penultimate features need at least one hidden dense layer".into(),
            ));
        }
        let cache = self.forward_cached(input)?;
        Ok(cache.dense_inputs.last().unwrap().clone())
    }

    pub fn penultimate_dim(&self) -> usize {
        self.dense[self.dense.len() - 1].in_dim
    }

    /// Gradient for one example given the softmax-head delta.
    fn backward_single(&self, cache: &ForwardCache, head_delta: &[f64], grad: &mut [f64]) {
        let k = self.arch.kernel;
        // dense backward
        let mut delta = head_delta.to_vec();
        let conv_param_len: usize = self.convs.iter().map(|s| s.w.len() + s.b.len()).sum();
        let mut offset_end = self.num_params();
        for di in (0..self.dense.len()).rev() {
            let layer = &self.dense[di];
            let input = &cache.dense_inputs[di];
            offset_end -= layer.w.len() + layer.b.len();
            let gw = &mut grad[offset_end..offset_end + layer.w.len() + layer.b.len()];
            for (o, &dv) in delta.iter().enumerate() {
                gw[layer.w.len() + o] += dv;
                for (j, &xv) in input.iter().enumerate() {
                    gw[o * layer.in_dim + j] += dv * xv;
                }
            }
            if di > 0 || !self.convs.is_empty() {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &dv) in delta.iter().enumerate() {
                    let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, &wv) in prev.iter_mut().zip(wrow) {
                        *p += dv * wv;
                    }
                }
                // ReLU mask of the layer input (post-relu values)
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        debug_assert_eq!(offset_end, conv_param_len);

        // conv backward
        let shapes = self.arch.stage_shapes().expect("validated at build");
        let mut offset = conv_param_len;
        for si in (0..self.convs.len()).rev() {
            let stage = &self.convs[si];
            offset -= stage.w.len() + stage.b.len();
            let (in_c, in_h, in_w) = if si == 0 {
                self.arch.input
            } else {
                shapes[si - 1]
            };
            let oh = in_h - k + 1;
            let ow = in_w - k + 1;
            // delta currently matches the post-pool map; undo pool
            let conv_out = &cache.conv_outputs[si];
            let mut dconv = vec![0.0; stage.out_c * oh * ow];
            if self.arch.pools[si] {
                let argmax = &cache.pool_argmax[si];
                for (cell, &dv) in delta.iter().enumerate() {
                    dconv[argmax[cell] as usize] += dv;
                }
            } else {
                dconv.copy_from_slice(&delta);
            }
            // the ReLU sits after the pool; mask by the pooled pre-relu value
            // (already applied when delta was built below); here mask against
            // conv/pool output sign for the first iteration
            let _ = conv_out;

            let input = &cache.conv_inputs[si];
            let gslice = &mut grad[offset..offset + stage.w.len() + stage.b.len()];
            let mut dinput = vec![0.0; in_c * in_h * in_w];
            for oc in 0..stage.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dv = dconv[oc * oh * ow + oy * ow + ox];
                        if dv == 0.0 {
                            continue;
                        }
                        gslice[stage.w.len() + oc] += dv;
                        for ic in 0..in_c {
                            let wbase = ((oc * in_c + ic) * k) * k;
                            let ibase = ic * in_h * in_w;
                            for ky in 0..k {
                                let irow = ibase + (oy + ky) * in_w + ox;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    gslice[wrow + kx] += dv * input[irow + kx];
                                    dinput[irow + kx] += stage.w[wrow + kx] * dv;
                                }
                            }
                        }
                    }
                }
            }
            if si > 0 {
                // mask by the previous stage's post-relu output (its input here)
                for (p, &a) in dinput.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = dinput;
            }
        }
    }

    /// Loss and flat gradient for a batch; examples are accumulated in fixed
    /// 32-example chunks so the reduction order does not depend on thread
    /// count.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        mode: LossMode,
    ) -> Result<(f64, Vec<f64>)> {
        let n = labels.len();
        let il = self.arch.input_len();
        if batch.len() != n * il {
            return Err(Error::Dimension("batch does not match label count".into()));
        }
        let c = self.arch.num_classes;
        let chunk = 32usize;
        let idx: Vec<usize> = (0..n).step_by(chunk).collect();
        let partials: Result<Vec<(f64, Vec<f64>, Vec<f64>)>> = idx
            .par_iter()
            .map(|&start| {
                let end = (start + chunk).min(n);
                let mut grad = vec![0.0; self.num_params()];
                let mut probs_all = Vec::with_capacity((end - start) * c);
                for i in start..end {
                    let x = &batch[i * il..(i + 1) * il];
                    let cache = self.forward_cached(x)?;
                    let mut probs = cache.logits.clone();
                    softmax_rows(&mut probs, c);
                    let y = labels[i];
                    let wi = stats.weight(y, mode) / n as f64;
                    let mut head = probs.clone();
                    head[y] -= 1.0;
                    for v in &mut head {
                        *v *= wi;
                    }
                    self.backward_single(&cache, &head, &mut grad);
                    probs_all.extend_from_slice(&probs);
                }
                Ok((0.0, grad, probs_all))
            })
            .collect();
        let partials = partials?;
        let mut grad = vec![0.0; self.num_params()];
        let mut probs = Vec::with_capacity(n * c);
        for (_, g, p) in &partials {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            probs.extend_from_slice(p);
        }
        let loss = weighted_log_loss(&probs, labels, c, stats, mode)?;
        Ok((loss, grad))
    }

    pub fn sgd_step(
        &mut self,
        batch: &[f64],
        labels: &[usize],
        stats: &ClassStats,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let (loss, grad) = self.batch_loss_and_grad(batch, labels, stats, cfg.loss_mode)?;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite convnet gradient".into()));
        }
        self.apply_update(&grad, cfg);
        Ok(loss)
    }

    fn apply_update(&mut self, grad: &[f64], cfg: &TrainConfig) {
        let mut i = 0;
        for stage in &mut self.convs {
            for w in &mut stage.w {
                *w -= cfg.learning_rate * (grad[i] + cfg.weight_decay * *w);
                i += 1;
            }
            for b in &mut stage.b {
                *b -= cfg.learning_rate * grad[i];
                i += 1;
            }
        }
        for layer in &mut self.dense {
            for w in &mut layer.w {
                *w -= cfg.learning_rate * (grad[i] + cfg.weight_decay * *w);
                i += 1;
            }
            for b in &mut layer.b {
                *b -= cfg.learning_rate * grad[i];
                i += 1;
            }
        }
    }
}

impl Network for ConvNetModel {
    fn num_params(&self) -> usize {
        self.convs.iter().map(|s| s.w.len() + s.b.len()).sum::<usize>()
            + self.dense.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>()
    }

    fn get_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in &self.convs {
            out.extend_from_slice(&s.w);
            out.extend_from_slice(&s.b);
        }
        for l in &self.dense {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut i = 0;
        for s in &mut self.convs {
            let nw = s.w.len();
            s.w.copy_from_slice(&params[i..i + nw]);
            i += nw;
            let nb = s.b.len();
            s.b.copy_from_slice(&params[i..i + nb]);
            i += nb;
        }
        for l in &mut self.dense {
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
        self.batch_loss_and_grad(batch, labels, stats, mode)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over flat crops (`n x input_len`, f64).
pub fn train_convnet(
    crops: &[f64],
    labels: &[usize],
    stats: &ClassStats,
    cfg: &TrainConfig,
    arch: ConvArch,
) -> Result<(ConvNetModel, ConvTrainReport)> {
    cfg.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("empty convnet training set".into()));
    }
    let mut model = ConvNetModel::new(arch, cfg.seed)?;
    let il = model.arch.input_len();
    if crops.len() != n * il {
        return Err(Error::Dimension("crop buffer does not match labels".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut bx = Vec::new();
        let mut by = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&crops[i * il..(i + 1) * il]);
                by.push(labels[i]);
            }
            total += model.sgd_step(&bx, &by, stats, cfg)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((model, ConvTrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::gradient_check;

    fn tiny_arch(c: usize) -> ConvArch {
        // 1x9x9 input, one 2-filter conv stage (pool fits: 5x5 -> pool -> 2x2)
        ConvArch::with_defaults((1, 9, 9), vec![2], vec![6], c)
    }

    #[test]
    fn standard_local_shapes() {
        let arch = ConvArch::standard_local(21);
        let shapes = arch.stage_shapes().unwrap();
        // 35 -> conv 31 -> pool 15 -> conv 11 -> pool 5 -> conv 1 (no pool fits)
        assert_eq!(shapes, vec![(32, 15, 15), (32, 5, 5), (64, 1, 1)]);
        assert_eq!(arch.pools, vec![true, true, false]);
        assert_eq!(arch.flat_dim().unwrap(), 64);
    }

    #[test]
    fn softmax_output_normalized_and_uniform_for_zero_weights() {
        let arch = tiny_arch(21);
        let mut m = ConvNetModel::new(arch, 0).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params(&zeros);
        let input: Vec<f64> = (0..81).map(|i| (i % 7) as f64 * 0.1).collect();
        let probs = m.forward_single(&input).unwrap();
        assert_eq!(probs.len(), 21);
        for &p in &probs {
            assert!((p - 1.0 / 21.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_head_two_outputs() {
        let m = ConvNetModel::new(tiny_arch(2), 1).unwrap();
        let input: Vec<f64> = (0..81).map(|i| (i as f64 * 0.01).sin()).collect();
        let probs = m.forward_single(&input).unwrap();
        assert_eq!(probs.len(), 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = ConvNetModel::new(tiny_arch(3), 0).unwrap();
        assert!(m.forward_single(&vec![0.0; 80]).is_err());
    }

    #[test]
    fn gradient_check_small_convnet() {
        let m = ConvNetModel::new(tiny_arch(3), 9).unwrap();
        let mut rng = seeded_rng(4);
        use rand::Rng;
        let batch: Vec<f64> = (0..81 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0usize, 2];
        let stats = ClassStats::from_counts(vec![3, 2, 5]).unwrap();
        for mode in [LossMode::Symmetric, LossMode::Asymmetric] {
            let err = gradient_check(&m, &batch, &labels, &stats, mode, 1e-5).unwrap();
            assert!(err < 1e-4, "max rel err {err} in {mode:?}");
        }
    }

    #[test]
    fn convnet_training_learns_simple_contrast() {
        // class 0: dark crops; class 1: bright crops
        let arch = ConvArch::with_defaults((1, 9, 9), vec![2], vec![4], 2);
        let mut crops = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let bright = i % 2;
            let base = if bright == 1 { 0.8 } else { -0.8 };
            crops.extend((0..81).map(|j| base + ((i * 81 + j) % 5) as f64 * 0.01));
            labels.push(bright);
        }
        let stats = ClassStats::from_counts(vec![20, 20]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 30,
            seed: 3,
            loss_mode: LossMode::Symmetric,
        };
        let (m, _) = train_convnet(&crops, &labels, &stats, &cfg, arch).unwrap();
        let mut correct = 0;
        for i in 0..40 {
            let p = m.forward_single(&crops[i * 81..(i + 1) * 81]).unwrap();
            let pred = if p[1] > p[0] { 1 } else { 0 };
            if pred == labels[i] {
                correct += 1;
            }
        }
        assert!(correct >= 38, "{correct}/40");
    }

    #[test]
    fn penultimate_dim_matches_last_hidden() {
        let m = ConvNetModel::new(tiny_arch(4), 2).unwrap();
        let input: Vec<f64> = (0..81).map(|i| i as f64 * 0.01).collect();
        let f = m.penultimate(&input).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(m.penultimate_dim(), 6);
        assert!(f.iter().all(|&v| v >= 0.0)); // post-ReLU
    }
}
