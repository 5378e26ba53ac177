//! Statistics-pooling embedding network.
//!
//! Two per-frame affine layers with ReLU are shared across channels and
//! frames. Their outputs are pooled into mean and variance, either per channel
//! (modified) or over all channels (baseline), then pass an embedding layer
//! and a softmax classifier. The x-vector is the embedding pre-activation.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::codec::{self, fingerprint, Provenance, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::FeatureSegment;

const XVEC_MAGIC: &[u8; 5] = b"XVEC1";
const VAR_EPS: f64 = 1e-8;
/// Samples per gradient shard; shards are reduced in order for determinism.
const GRAD_SHARD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    /// One mean/variance over all channels' frames.
    Baseline,
    /// Mean/variance per channel, concatenated.
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n_channels: usize,
    pub dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub embed: usize,
    pub n_classes: usize,
}

impl Shape {
    pub fn pooled(&self, mode: PoolMode) -> usize {
        match mode {
            PoolMode::Baseline => 2 * self.h2,
            PoolMode::Modified => 2 * self.n_channels * self.h2,
        }
    }
}

/// Offsets of each tensor inside the flat parameter vector. Matrices are
/// column-major.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    we: usize,
    be: usize,
    wo: usize,
    bo: usize,
    total: usize,
}

impl Layout {
    fn new(s: &Shape, pooled: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + s.h1 * s.dim;
        let w2 = b1 + s.h1;
        let b2 = w2 + s.h2 * s.h1;
        let we = b2 + s.h2;
        let be = we + s.embed * pooled;
        let wo = be + s.embed;
        let bo = wo + s.n_classes * s.embed;
        Layout {
            w1,
            b1,
            w2,
            b2,
            we,
            be,
            wo,
            bo,
            total: bo + s.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            patience: 5,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1
            && self.epochs >= 1;
        if !ok {
            return Err(Error::invalid(format!("invalid x-vector training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct XvecNet {
    pub mode: PoolMode,
    pub shape: Shape,
    /// Subject id of each output unit.
    pub classes: Vec<String>,
    params: Vec<f64>,
    layout: Layout,
    /// Config of the run that produced these weights, if any.
    pub trained_with: Option<TrainConfig>,
    pub provenance: Provenance,
}

impl PartialEq for XvecNet {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.shape == other.shape && self.classes == other.classes && self.params == other.params
    }
}

/// Activations kept for the backward pass.
struct Cache {
    pre1: DMatrix<f64>,
    h1: DMatrix<f64>,
    pre2: DMatrix<f64>,
    h2: DMatrix<f64>,
    means: DMatrix<f64>,
    pool: DVector<f64>,
    z: DVector<f64>,
    a: DVector<f64>,
    logits: DVector<f64>,
}

pub struct Forward {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl XvecNet {
    /// He-initialised weights, zero biases.
    pub fn new(mode: PoolMode, shape: Shape, classes: Vec<String>, seed: u64) -> Result<Self> {
        let s = shape;
        if [s.n_channels, s.dim, s.h1, s.h2, s.embed].contains(&0) {
            return Err(Error::invalid(format!("network dimensions must be positive: {s:?}")));
        }
        if classes.len() != s.n_classes || s.n_classes < 2 {
            return Err(Error::invalid(format!(
                "network needs >= 2 classes and one name per output ({} names for {} outputs)",
                classes.len(),
                s.n_classes
            )));
        }
        let layout = Layout::new(&s, s.pooled(mode));
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for p in &mut params[start..start + len] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.w1, s.h1 * s.dim, s.dim);
        fill(layout.w2, s.h2 * s.h1, s.h1);
        fill(layout.we, s.embed * s.pooled(mode), s.pooled(mode));
        fill(layout.wo, s.n_classes * s.embed, s.embed);
        Ok(XvecNet {
            mode,
            shape: s,
            classes,
            params,
            layout,
            trained_with: None,
            provenance: Provenance::default(),
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter tensors as (name, offset, length).
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize)> {
        let l = &self.layout;
        vec![
            ("layer1.weight", l.w1, l.b1 - l.w1),
            ("layer1.bias", l.b1, l.w2 - l.b1),
            ("layer2.weight", l.w2, l.b2 - l.w2),
            ("layer2.bias", l.b2, l.we - l.b2),
            ("embed.weight", l.we, l.be - l.we),
            ("embed.bias", l.be, l.wo - l.be),
            ("output.weight", l.wo, l.bo - l.wo),
            ("output.bias", l.bo, l.total - l.bo),
        ]
    }

    pub fn fingerprint(&self) -> u64 {
        let mut w = Writer::new(XVEC_MAGIC);
        w.f64s(&self.params);
        fingerprint(w.bytes())
    }

    fn mat(&self, p: &[f64], at: usize, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrixView::from_slice(&p[at..at + rows * cols], rows, cols).into_owned()
    }

    fn vec(&self, p: &[f64], at: usize, len: usize) -> DVector<f64> {
        DVectorView::from_slice(&p[at..at + len], len).into_owned()
    }

    fn check_input(&self, feat: &FeatureSegment) -> Result<()> {
        if feat.dim() != self.shape.dim {
            return Err(Error::mismatch(format!(
                "network expects d={}, features have d={}",
                self.shape.dim,
                feat.dim()
            )));
        }
        if self.mode == PoolMode::Modified && feat.n_channels() != self.shape.n_channels {
            return Err(Error::mismatch(format!(
                "network pools {} channels, segment has {}",
                self.shape.n_channels,
                feat.n_channels()
            )));
        }
        if feat.n_frames() < 2 {
            return Err(Error::invalid("statistics pooling needs at least 2 frames"));
        }
        Ok(())
    }

    /// Column ranges over which statistics are pooled.
    fn groups(&self, n_channels: usize, n_frames: usize) -> Vec<(usize, usize)> {
        match self.mode {
            PoolMode::Baseline => vec![(0, n_channels * n_frames)],
            PoolMode::Modified => (0..n_channels).map(|c| (c * n_frames, n_frames)).collect(),
        }
    }

    fn forward_cached(&self, p: &[f64], feat: &FeatureSegment) -> Cache {
        let s = &self.shape;
        let l = &self.layout;
        let cols = feat.n_channels() * feat.n_frames();
        let x = DMatrixView::from_slice(feat.data(), s.dim, cols);

        let affine = |w: DMatrix<f64>, b: DVector<f64>, input: DMatrixView<f64>| {
            let mut out = w * input;
            for mut col in out.column_iter_mut() {
                col += &b;
            }
            out
        };
        let pre1 = affine(self.mat(p, l.w1, s.h1, s.dim), self.vec(p, l.b1, s.h1), x);
        let h1 = pre1.map(|v| v.max(0.0));
        let pre2 = affine(self.mat(p, l.w2, s.h2, s.h1), self.vec(p, l.b2, s.h2), h1.as_view());
        let h2 = pre2.map(|v| v.max(0.0));

        let groups = self.groups(feat.n_channels(), feat.n_frames());
        let mut means = DMatrix::zeros(s.h2, groups.len());
        let mut pool = DVector::zeros(2 * s.h2 * groups.len());
        for (g, &(start, len)) in groups.iter().enumerate() {
            let block = h2.columns(start, len);
            let mu = block.column_mean();
            let var = block.column_variance();
            means.column_mut(g).copy_from(&mu);
            let base = 2 * s.h2 * g;
            pool.rows_mut(base, s.h2).copy_from(&mu);
            pool.rows_mut(base + s.h2, s.h2).copy_from(&var.add_scalar(VAR_EPS));
        }

        let pooled = pool.len();
        let z = self.mat(p, l.we, s.embed, pooled) * &pool + self.vec(p, l.be, s.embed);
        let a = z.map(|v| v.max(0.0));
        let logits = self.mat(p, l.wo, s.n_classes, s.embed) * &a + self.vec(p, l.bo, s.n_classes);
        Cache {
            pre1,
            h1,
            pre2,
            h2,
            means,
            pool,
            z,
            a,
            logits,
        }
    }

    pub fn forward(&self, feat: &FeatureSegment) -> Result<Forward> {
        self.check_input(feat)?;
        let c = self.forward_cached(&self.params, feat);
        Ok(Forward {
            logits: c.logits.as_slice().to_vec(),
            embedding: c.z.as_slice().to_vec(),
        })
    }

    /// Smallest |input| over every ReLU for this segment.
    pub fn relu_margin(&self, feat: &FeatureSegment) -> Result<f64> {
        self.check_input(feat)?;
        let c = self.forward_cached(&self.params, feat);
        Ok(c.pre1.iter().chain(c.pre2.iter()).chain(c.z.iter()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    /// Cross-entropy of one sample; adds `scale` times its gradient to `grad`.
    fn sample_grad(&self, p: &[f64], feat: &FeatureSegment, label: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let s = &self.shape;
        let l = &self.layout;
        let c = self.forward_cached(p, feat);
        let (loss, probs) = cross_entropy(c.logits.as_slice(), label);

        let mut dlogits = DVector::from_vec(probs);
        dlogits[label] -= 1.0;
        dlogits *= scale;
        let pooled = c.pool.len();

        add_outer(grad, l.wo, &dlogits, &c.a);
        add_vec(grad, l.bo, &dlogits);
        let wo = self.mat(p, l.wo, s.n_classes, s.embed);
        let mut dz = wo.tr_mul(&dlogits);
        dz.zip_apply(&c.z, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        add_outer(grad, l.we, &dz, &c.pool);
        add_vec(grad, l.be, &dz);
        let dpool = self.mat(p, l.we, s.embed, pooled).tr_mul(&dz);

        // d mean_g / dh = 1/M, d var_g / dh = 2 (h - mean_g) / M.
        let groups = self.groups(feat.n_channels(), feat.n_frames());
        let mut dh2 = DMatrix::zeros(s.h2, c.h2.ncols());
        for (g, &(start, len)) in groups.iter().enumerate() {
            let base = 2 * s.h2 * g;
            let dmu = dpool.rows(base, s.h2);
            let dvar = dpool.rows(base + s.h2, s.h2);
            let inv = 1.0 / len as f64;
            for col in start..start + len {
                for i in 0..s.h2 {
                    let centred = c.h2[(i, col)] - c.means[(i, g)];
                    dh2[(i, col)] = inv * (dmu[i] + 2.0 * dvar[i] * centred);
                }
            }
        }
        dh2.zip_apply(&c.pre2, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        add_gemm(grad, l.w2, &dh2, &c.h1);
        add_row_sums(grad, l.b2, &dh2);
        let mut dh1 = self.mat(p, l.w2, s.h2, s.h1).tr_mul(&dh2);
        dh1.zip_apply(&c.pre1, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let x = DMatrixView::from_slice(feat.data(), s.dim, c.h1.ncols());
        let dw1 = &dh1 * x.transpose();
        for (g, v) in grad[l.w1..l.w1 + dw1.len()].iter_mut().zip(dw1.iter()) {
            *g += v;
        }
        add_row_sums(grad, l.b1, &dh1);
        loss
    }

    /// Mean cross-entropy of a batch and its exact gradient.
    pub fn batch_gradient(&self, batch: &[(&FeatureSegment, usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (feat, label) in batch {
            self.check_input(feat)?;
            if *label >= self.shape.n_classes {
                return Err(Error::invalid(format!("label {label} out of range")));
            }
        }
        Ok(self.batch_gradient_unchecked(&self.params, batch))
    }

    fn batch_gradient_unchecked(&self, p: &[f64], batch: &[(&FeatureSegment, usize)]) -> (f64, Vec<f64>) {
        let scale = 1.0 / batch.len() as f64;
        let shards: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_SHARD)
            .map(|chunk| {
                let mut grad = vec![0.0; p.len()];
                let mut loss = 0.0;
                for (feat, label) in chunk {
                    loss += self.sample_grad(p, feat, *label, scale, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut total = vec![0.0; p.len()];
        let mut loss = 0.0;
        for (l, g) in shards {
            loss += l;
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        (loss * scale, total)
    }

    /// Mean cross-entropy over `data` without gradients.
    pub fn mean_loss(&self, data: &[(&FeatureSegment, usize)]) -> Result<f64> {
        let losses: Vec<f64> = data
            .par_iter()
            .map(|(feat, label)| {
                self.check_input(feat)?;
                let c = self.forward_cached(&self.params, feat);
                Ok(cross_entropy(c.logits.as_slice(), *label).0)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn class_index(&self, subject: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == subject)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let mut w = Writer::new(XVEC_MAGIC);
        w.u8(match self.mode {
            PoolMode::Baseline => 0,
            PoolMode::Modified => 1,
        });
        for v in [s.n_channels, s.dim, s.h1, s.h2, s.embed, s.n_classes] {
            w.u32(v as u32);
        }
        for c in &self.classes {
            w.str(c);
        }
        w.f64s(&self.params);
        match &self.trained_with {
            None => w.u8(0),
            Some(cfg) => {
                w.u8(1);
                w.f64(cfg.learning_rate);
                w.f64(cfg.beta1);
                w.f64(cfg.beta2);
                w.f64(cfg.epsilon);
                w.u64(cfg.batch_size as u64);
                w.u64(cfg.epochs as u64);
                w.u64(cfg.seed);
                w.u64(cfg.patience as u64);
            }
        }
        self.provenance.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, XVEC_MAGIC, origin)?;
        let mode = match r.u8()? {
            0 => PoolMode::Baseline,
            1 => PoolMode::Modified,
            _ => return Err(r.corrupt("unknown pooling mode")),
        };
        let mut dims = [0usize; 6];
        for v in &mut dims {
            *v = r.u32()? as usize;
        }
        let shape = Shape {
            n_channels: dims[0],
            dim: dims[1],
            h1: dims[2],
            h2: dims[3],
            embed: dims[4],
            n_classes: dims[5],
        };
        let classes = (0..shape.n_classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let mut net = XvecNet::new(mode, shape, classes, 0).map_err(|e| Error::artifact(origin, e.to_string()))?;
        net.params = r.f64s(net.layout.total)?;
        net.trained_with = match r.u8()? {
            0 => None,
            _ => Some(TrainConfig {
                learning_rate: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
                batch_size: r.u64()? as usize,
                epochs: r.u64()? as usize,
                seed: r.u64()?,
                patience: r.u64()? as usize,
            }),
        };
        net.provenance = Provenance::read(&mut r)?;
        r.finish()?;
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::artifact(origin, "non-finite network weights"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        XvecNet::from_bytes(&codec::read_file(path)?, path)
    }
}

/// Loss and softmax probabilities.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exp.iter().map(|e| e / sum).collect())
}

fn add_vec(grad: &mut [f64], at: usize, v: &DVector<f64>) {
    for (g, x) in grad[at..at + v.len()].iter_mut().zip(v.iter()) {
        *g += x;
    }
}

/// grad[at..] (column-major rows x cols) += u vᵗ.
fn add_outer(grad: &mut [f64], at: usize, u: &DVector<f64>, v: &DVector<f64>) {
    let rows = u.len();
    for (j, vj) in v.iter().enumerate() {
        let col = &mut grad[at + j * rows..at + (j + 1) * rows];
        for (g, ui) in col.iter_mut().zip(u.iter()) {
            *g += ui * vj;
        }
    }
}

fn add_gemm(grad: &mut [f64], at: usize, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let prod = a * b.transpose();
    for (g, v) in grad[at..at + prod.len()].iter_mut().zip(prod.iter()) {
        *g += v;
    }
}

fn add_row_sums(grad: &mut [f64], at: usize, m: &DMatrix<f64>) {
    for (i, g) in grad[at..at + m.nrows()].iter_mut().enumerate() {
        *g += m.row(i).sum();
    }
}

#[derive(Debug, Clone)]
pub struct XvecFit {
    pub net: XvecNet,
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn labelled<'a>(net: &XvecNet, feats: &[&'a FeatureSegment]) -> Result<Vec<(&'a FeatureSegment, usize)>> {
    feats
        .iter()
        .map(|f| {
            net.class_index(&f.labels.subject_id)
                .map(|k| (*f, k))
                .ok_or_else(|| Error::invalid(format!("subject {} is not a network class", f.labels.subject_id)))
        })
        .collect()
}

/// Mini-batch Adam on mean cross-entropy, keeping the weights with the best
/// validation loss. Input order does not matter: examples are put in a
/// canonical order before the seeded per-epoch shuffle.
pub fn train(mut net: XvecNet, train_set: &[&FeatureSegment], val_set: &[&FeatureSegment], cfg: &TrainConfig) -> Result<XvecFit> {
    cfg.validate()?;
    let mut train_data = labelled(&net, train_set)?;
    let val_data = labelled(&net, val_set)?;
    let distinct: std::collections::BTreeSet<usize> = train_data.iter().map(|(_, k)| *k).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("x-vector training needs at least 2 subjects"));
    }
    for (f, _) in train_data.iter().chain(&val_data) {
        net.check_input(f)?;
    }
    train_data.sort_by(|a, b| (&a.0.labels, a.0.index).cmp(&(&b.0.labels, b.0.index)));
    if val_data.is_empty() {
        log::warn!("no validation segments; early stopping on training loss");
    }

    let n_params = net.params.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut best = (f64::INFINITY, net.params.clone(), 0usize);
    let mut stale = 0;
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&FeatureSegment, usize)> = idx.iter().map(|&i| train_data[i]).collect();
            let (loss, grad) = net.batch_gradient_unchecked(&net.params, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("mini-batch loss became {loss}"),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for i in 0..n_params {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let update = cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
                net.params[i] -= update;
            }
        }
        let tl = epoch_loss / train_data.len() as f64;
        train_loss.push(tl);
        let vl = if val_data.is_empty() { tl } else { net.mean_loss(&val_data)? };
        if !vl.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("validation loss became {vl}"),
            });
        }
        val_loss.push(vl);
        log::debug!("x-vector epoch {epoch}: train {tl:.4} val {vl:.4}");
        if vl < best.0 {
            best = (vl, net.params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.params = best.1;
    net.trained_with = Some(cfg.clone());
    Ok(XvecFit {
        net,
        train_loss,
        val_loss,
        best_epoch: best.2,
    })
}

/// The embedding-layer pre-activation for one segment.
pub fn extract_xvector(net: &XvecNet, feat: &FeatureSegment) -> Result<Vec<f64>> {
    Ok(net.forward(feat)?.embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Labels;
    use rand::Rng;

    fn tiny(mode: PoolMode, c: usize) -> XvecNet {
        let shape = Shape {
            n_channels: c,
            dim: 4,
            h1: 6,
            h2: 5,
            embed: 3,
            n_classes: 2,
        };
        XvecNet::new(mode, shape, vec!["a".into(), "b".into()], 11).unwrap()
    }

    fn random_feat(subject: &str, c: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSegment {
        let data = (0..c * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSegment::from_parts(Labels::new(subject, "e", "t"), c, n, d, data).unwrap()
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let mut net = tiny(PoolMode::Modified, 2);
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let feat = FeatureSegment::from_parts(Labels::new("a", "e", "t"), 2, 5, 4, vec![0.0; 40]).unwrap();
        let out = net.forward(&feat).unwrap();
        assert_eq!(out.embedding, vec![0.0; 3]);
        assert_eq!(out.logits, vec![0.0; 2]);
        let (_, p) = cross_entropy(&out.logits, 0);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn full_sized_modified_pooling_width() {
        let shape = Shape {
            n_channels: 9,
            dim: 9,
            h1: 1024,
            h2: 512,
            embed: 160,
            n_classes: 30,
        };
        assert_eq!(shape.pooled(PoolMode::Modified), 9216);
        assert_eq!(shape.pooled(PoolMode::Baseline), 1024);
    }

    #[test]
    fn duplicated_sample_has_same_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = tiny(PoolMode::Modified, 2);
        let f = random_feat("a", 2, 5, 4, &mut rng);
        let (l1, g1) = net.batch_gradient(&[(&f, 1)]).unwrap();
        let (l2, g2) = net.batch_gradient(&[(&f, 1), (&f, 1)]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn saturated_correct_logit_has_vanishing_loss() {
        let (loss, p) = cross_entropy(&[800.0, 0.0, -3.0], 0);
        assert!(loss < 1e-300 || loss == 0.0);
        assert!((p[0] - 1.0).abs() < 1e-300 || p[0] == 1.0);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn short_or_mismatched_segments_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny(PoolMode::Modified, 2);
        assert!(net.forward(&random_feat("a", 2, 1, 4, &mut rng)).is_err());
        assert!(net.forward(&random_feat("a", 3, 5, 4, &mut rng)).is_err());
        assert!(net.forward(&random_feat("a", 2, 5, 3, &mut rng)).is_err());
        // Baseline pooling accepts any channel count and any N >= 2.
        let base = tiny(PoolMode::Baseline, 2);
        assert_eq!(base.forward(&random_feat("a", 3, 40, 4, &mut rng)).unwrap().embedding.len(), 3);
    }

    fn toy_sets(rng: &mut ChaCha8Rng) -> (Vec<FeatureSegment>, Vec<FeatureSegment>) {
        let make = |subject: &str, shift: f64, i: usize, rng: &mut ChaCha8Rng| {
            let mut f = random_feat(subject, 2, 6, 4, rng);
            f = FeatureSegment::from_parts(
                f.labels.clone(),
                2,
                6,
                4,
                f.data().iter().enumerate().map(|(j, v)| v + if j % 4 == 0 { shift } else { 0.0 }).collect(),
            )
            .unwrap();
            f.index = i;
            f
        };
        let train: Vec<_> = (0..40).map(|i| make(if i % 2 == 0 { "a" } else { "b" }, (i % 2) as f64 * 2.0, i, rng)).collect();
        let val: Vec<_> = (0..10).map(|i| make(if i % 2 == 0 { "a" } else { "b" }, (i % 2) as f64 * 2.0, i, rng)).collect();
        (train, val)
    }

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (train_set, val_set) = toy_sets(&mut rng);
        let net = tiny(PoolMode::Modified, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let t: Vec<_> = train_set.iter().collect();
        let v: Vec<_> = val_set.iter().collect();
        let fit = train(net.clone(), &t, &v, &cfg).unwrap();
        assert_eq!(fit.net.params(), net.params());
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train_set, val_set) = toy_sets(&mut rng);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let t: Vec<_> = train_set.iter().collect();
        let v: Vec<_> = val_set.iter().collect();
        let a = train(tiny(PoolMode::Modified, 2), &t, &v, &cfg).unwrap();
        let mut reversed = t.clone();
        reversed.reverse();
        let b = train(tiny(PoolMode::Modified, 2), &reversed, &v, &cfg).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert!(a.val_loss.iter().copied().fold(f64::INFINITY, f64::min) < a.val_loss[0] + 1e-12);
        assert!(a.train_loss.last().unwrap() < &a.train_loss[0]);
    }

    #[test]
    fn one_class_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_feat("a", 2, 5, 4, &mut rng);
        assert!(train(tiny(PoolMode::Modified, 2), &[&f], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (train_set, _) = toy_sets(&mut rng);
        let t: Vec<_> = train_set.iter().collect();
        let cfg = TrainConfig {
            learning_rate: f64::INFINITY,
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        match train(tiny(PoolMode::Modified, 2), &t, &[], &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch <= 1),
            other => panic!("expected divergence, got {:?}", other.map(|f| f.train_loss)),
        }
    }

    fn finite_difference_error(mode: PoolMode) -> Vec<(&'static str, f64)> {
        // Central differences are only meaningful where the loss is smooth
        // within one step, so draw until every ReLU input clears the kink.
        let (mut net, a, b) = (0..)
            .find_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut net = tiny(mode, 2);
                for p in net.params_mut() {
                    *p += rng.gen_range(-0.1..0.1);
                }
                let a = random_feat("a", 2, 5, 4, &mut rng);
                let b = random_feat("b", 2, 5, 4, &mut rng);
                let clear = net.relu_margin(&a).unwrap().min(net.relu_margin(&b).unwrap()) > 0.02;
                clear.then_some((net, a, b))
            })
            .unwrap();
        let batch = [(&a, 0), (&b, 1)];
        let (_, grad) = net.batch_gradient(&batch).unwrap();
        let h = 1e-3;
        net.tensors()
            .into_iter()
            .map(|(name, at, len)| {
                let mut worst: f64 = 0.0;
                for i in at..at + len {
                    let orig = net.params()[i];
                    net.params_mut()[i] = orig + h;
                    let up = net.batch_gradient(&batch).unwrap().0;
                    net.params_mut()[i] = orig - h;
                    let down = net.batch_gradient(&batch).unwrap().0;
                    net.params_mut()[i] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
                    worst = worst.max(err);
                }
                (name, worst)
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        for mode in [PoolMode::Modified, PoolMode::Baseline] {
            for (name, err) in finite_difference_error(mode) {
                assert!(err < 1e-4, "{mode:?} {name}: relative error {err}");
            }
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = tiny(PoolMode::Baseline, 2);
        net.trained_with = Some(TrainConfig::default());
        let back = XvecNet::from_bytes(&net.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.trained_with, net.trained_with);
        let f = random_feat("a", 2, 9, 4, &mut rng);
        assert_eq!(extract_xvector(&back, &f).unwrap(), extract_xvector(&net, &f).unwrap());
    }
}
