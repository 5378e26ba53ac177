//! Diagonal-covariance Gaussian mixtures: the universal background model,
//! mean-only MAP adaptation and log-likelihood-ratio scoring.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{self, fingerprint, Provenance, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::FeatureSegment;

const UBM_MAGIC: &[u8; 5] = b"GMMM1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Frames per E-step shard. Fixed so reductions are order-stable.
const SHARD: usize = 2048;
/// A mixture whose soft count falls below this is treated as empty.
const EMPTY_MASS: f64 = 1e-3;
pub const DEFAULT_RELEVANCE: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct UbmTraining {
    pub seed: u64,
    pub iters: u32,
    /// Per-dimension variance floor.
    pub floor: Vec<f64>,
    pub reseeded: u32,
}

/// A K-mixture diagonal GMM over d-dimensional frames.
#[derive(Debug, Clone)]
pub struct Ubm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    pub training: UbmTraining,
    pub provenance: Provenance,
    // log w_k - ½ Σ_j log(2π σ²_kj)
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl PartialEq for Ubm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.variances == other.variances
            && self.dim == other.dim
    }
}

impl Ubm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(Error::invalid("mixture needs K >= 1 and d >= 1"));
        }
        if means.len() != k * dim || variances.len() != k * dim {
            return Err(Error::invalid(format!(
                "means/variances must be {k}x{dim}, got {} and {}",
                means.len(),
                variances.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights must lie on the simplex (sum {total})")));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("means must be finite and variances positive"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut ubm = Ubm {
            weights,
            means,
            variances,
            dim,
            training: UbmTraining {
                seed: 0,
                iters: 0,
                floor: vec![0.0; dim],
                reseeded: 0,
            },
            provenance: Provenance::default(),
            log_norm: Vec::new(),
            inv_var: Vec::new(),
        };
        ubm.refresh();
        Ok(ubm)
    }

    fn refresh(&mut self) {
        let d = self.dim;
        self.inv_var = self.variances.iter().map(|v| 1.0 / v).collect();
        self.log_norm = (0..self.n_mixtures())
            .map(|k| {
                let logdet: f64 = self.variances[k * d..(k + 1) * d].iter().map(|v| v.ln()).sum();
                self.weights[k].ln() - 0.5 * (d as f64 * LN_2PI + logdet)
            })
            .collect();
    }

    pub fn n_mixtures(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    /// Hash of the parameters; downstream artifacts record it to detect a
    /// swapped background model.
    pub fn fingerprint(&self) -> u64 {
        let mut w = Writer::new(UBM_MAGIC);
        w.u32(self.n_mixtures() as u32);
        w.u32(self.dim as u32);
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        fingerprint(w.bytes())
    }

    /// `log w_k + log N(x; m_k, Σ_k)` for every k, written into `out`.
    fn joint_log_densities(&self, means: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let m = &means[k * d..(k + 1) * d];
            let iv = &self.inv_var[k * d..(k + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let z = x[j] - m[j];
                q += z * z * iv[j];
            }
            *o = self.log_norm[k] - 0.5 * q;
        }
    }

    /// Overwrites `post` with P(k | x) and returns log p(x).
    pub fn posteriors_into(&self, x: &[f64], post: &mut [f64]) -> f64 {
        self.joint_log_densities(&self.means, x, post);
        normalize_log(post)
    }

    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_mixtures()];
        self.posteriors_into(x, &mut p);
        p
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut p = vec![0.0; self.n_mixtures()];
        self.posteriors_into(x, &mut p)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::mismatch(format!(
                "background model has d={}, features have d={d}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(UBM_MAGIC);
        w.u32(self.n_mixtures() as u32);
        w.u32(self.dim as u32);
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        w.u64(self.training.seed);
        w.u32(self.training.iters);
        w.f64s(&self.training.floor);
        w.u32(self.training.reseeded);
        self.provenance.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, UBM_MAGIC, origin)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let weights = r.f64s(k)?;
        let means = r.f64s(k * d)?;
        let variances = r.f64s(k * d)?;
        let training = UbmTraining {
            seed: r.u64()?,
            iters: r.u32()?,
            floor: r.f64s(d)?,
            reseeded: r.u32()?,
        };
        let provenance = Provenance::read(&mut r)?;
        r.finish()?;
        let mut ubm = Ubm::new(weights.clone(), means, variances, d).map_err(|e| Error::artifact(origin, e.to_string()))?;
        // Stored weights are already normalised; keep them bit-exact.
        ubm.weights = weights;
        ubm.refresh();
        ubm.training = training;
        ubm.provenance = provenance;
        Ok(ubm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ubm::from_bytes(&codec::read_file(path)?, path)
    }
}

/// In-place softmax of log values; returns their log-sum-exp.
fn normalize_log(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

#[derive(Debug, Clone)]
pub struct UbmConfig {
    pub n_mixtures: usize,
    pub max_iters: usize,
    /// Stop once the per-frame log-likelihood gains less than this.
    pub tol: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            n_mixtures: 64,
            max_iters: 50,
            tol: 1e-4,
            seed: 0,
            kmeans_iters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UbmFit {
    pub ubm: Ubm,
    /// Mean per-frame log-likelihood of the parameters entering each EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub reseeded: usize,
}

/// Sufficient statistics of a diagonal GMM; mergeable by addition.
#[derive(Debug, Clone)]
struct EmAccumulator {
    counts: Vec<f64>,
    sums: Vec<f64>,
    squares: Vec<f64>,
    log_likelihood: f64,
}

impl EmAccumulator {
    fn zeros(k: usize, d: usize) -> Self {
        EmAccumulator {
            counts: vec![0.0; k],
            sums: vec![0.0; k * d],
            squares: vec![0.0; k * d],
            log_likelihood: 0.0,
        }
    }

    fn merge(&mut self, other: &EmAccumulator) {
        self.log_likelihood += other.log_likelihood;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.squares.iter_mut().zip(&other.squares) {
            *a += b;
        }
    }
}

fn e_step(ubm: &Ubm, frames: &[f64]) -> EmAccumulator {
    let k = ubm.n_mixtures();
    let d = ubm.dim;
    let shards: Vec<EmAccumulator> = frames
        .par_chunks(SHARD * d)
        .map(|shard| {
            let mut acc = EmAccumulator::zeros(k, d);
            let mut post = vec![0.0; k];
            for x in shard.chunks_exact(d) {
                acc.log_likelihood += ubm.posteriors_into(x, &mut post);
                for (m, &g) in post.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    acc.counts[m] += g;
                    let s = &mut acc.sums[m * d..(m + 1) * d];
                    let q = &mut acc.squares[m * d..(m + 1) * d];
                    for j in 0..d {
                        s[j] += g * x[j];
                        q[j] += g * x[j] * x[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = EmAccumulator::zeros(k, d);
    for s in &shards {
        total.merge(s);
    }
    total
}

fn global_variance(frames: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (frames.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for x in frames.chunks_exact(d) {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in frames.chunks_exact(d) {
        for j in 0..d {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd iterations. Returns centroids
/// and hard assignments.
fn kmeans(frames: &[f64], d: usize, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let n = frames.len() / d;
    let row = |i: usize| &frames[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }

    let assign = |centroids: &[f64]| -> Vec<usize> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let x = row(i);
                (0..k)
                    .map(|c| (c, sq_dist(x, &centroids[c * d..(c + 1) * d])))
                    .fold((0, f64::INFINITY), |b, (c, dist)| if dist < b.1 { (c, dist) } else { b })
                    .0
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        labels = assign(&centroids);
    }
    (centroids, labels)
}

/// Fits a diagonal GMM to `frames` (row-major, `dim` columns) by k-means++
/// initialisation followed by EM.
pub fn train_ubm(frames: &[f64], dim: usize, cfg: &UbmConfig) -> Result<UbmFit> {
    let k = cfg.n_mixtures;
    if k == 0 || dim == 0 {
        return Err(Error::invalid("UBM needs K >= 1 and d >= 1"));
    }
    if frames.len() % dim != 0 {
        return Err(Error::invalid("frame buffer length is not a multiple of d"));
    }
    let n = frames.len() / dim;
    if n < 10 * k {
        return Err(Error::invalid(format!(
            "{n} frames are too few for {k} mixtures (need >= {})",
            10 * k
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training frames contain non-finite values"));
    }

    let (_, global_var) = global_variance(frames, dim);
    let floor: Vec<f64> = global_var.iter().map(|v| (1e-4 * v).max(1e-10)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (centroids, labels) = kmeans(frames, dim, k, cfg.kmeans_iters, &mut rng);

    // Hard-assignment moments seed the EM.
    let mut counts = vec![0.0; k];
    let mut var = vec![0.0; k * dim];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1.0;
        for j in 0..dim {
            var[c * dim + j] += (frames[i * dim + j] - centroids[c * dim + j]).powi(2);
        }
    }
    for c in 0..k {
        for j in 0..dim {
            let v = if counts[c] > 0.0 { var[c * dim + j] / counts[c] } else { global_var[j] };
            var[c * dim + j] = v.max(floor[j]);
        }
    }
    let weights: Vec<f64> = counts.iter().map(|c| (c + 1e-3) / (n as f64 + 1e-3 * k as f64)).collect();
    let mut ubm = Ubm::new(weights, centroids, var, dim)?;

    let mut lls = Vec::new();
    let mut reseeded = 0usize;
    let mut iters = 0;
    for _ in 0..cfg.max_iters {
        let acc = e_step(&ubm, frames);
        let ll = acc.log_likelihood / n as f64;
        let converged = lls.last().is_some_and(|prev: &f64| ll - prev < cfg.tol);
        lls.push(ll);
        if converged {
            break;
        }
        reseeded += m_step(&mut ubm, &acc, &floor, n);
        iters += 1;
    }
    if reseeded > 0 {
        log::warn!("UBM training re-seeded {reseeded} empty mixture(s)");
    }
    ubm.training = UbmTraining {
        seed: cfg.seed,
        iters,
        floor,
        reseeded: reseeded as u32,
    };
    Ok(UbmFit {
        ubm,
        log_likelihoods: lls,
        reseeded,
    })
}

/// Maximum-likelihood update with variance flooring. Returns how many empty
/// mixtures were re-seeded by splitting the broadest one.
fn m_step(ubm: &mut Ubm, acc: &EmAccumulator, floor: &[f64], n: usize) -> usize {
    let k = ubm.n_mixtures();
    let d = ubm.dim;
    let mut empty = Vec::new();
    for m in 0..k {
        let c = acc.counts[m];
        if c < EMPTY_MASS {
            empty.push(m);
            continue;
        }
        ubm.weights[m] = c / n as f64;
        for j in 0..d {
            let mu = acc.sums[m * d + j] / c;
            let v = acc.squares[m * d + j] / c - mu * mu;
            ubm.means[m * d + j] = mu;
            ubm.variances[m * d + j] = v.max(floor[j]);
        }
    }
    for &m in &empty {
        let donor = (0..k)
            .filter(|c| !empty.contains(c))
            .max_by(|&a, &b| {
                let spread = |c: usize| ubm.weights[c] * ubm.variance(c).iter().sum::<f64>();
                spread(a).total_cmp(&spread(b))
            })
            .expect("at least one mixture holds mass");
        let widest = (0..d)
            .max_by(|&a, &b| ubm.variances[donor * d + a].total_cmp(&ubm.variances[donor * d + b]))
            .unwrap();
        let shift = 0.5 * ubm.variances[donor * d + widest].sqrt();
        for j in 0..d {
            ubm.means[m * d + j] = ubm.means[donor * d + j];
            ubm.variances[m * d + j] = ubm.variances[donor * d + j];
        }
        ubm.means[m * d + widest] += shift;
        ubm.means[donor * d + widest] -= shift;
        ubm.weights[donor] /= 2.0;
        ubm.weights[m] = ubm.weights[donor];
    }
    let total: f64 = ubm.weights.iter().sum();
    ubm.weights.iter_mut().for_each(|w| *w /= total);
    ubm.refresh();
    empty.len()
}

/// A subject model: the background mixture with MAP-adapted means.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub subject_id: String,
    pub means: Vec<f64>,
    pub ubm_fingerprint: u64,
}

/// Mean-only MAP adaptation: `m̂_k = (n_k x̄_k + r m_k) / (n_k + r)`.
pub fn map_adapt<'a>(
    ubm: &Ubm,
    subject_id: &str,
    frames: impl IntoIterator<Item = &'a [f64]>,
    relevance: f64,
) -> Result<AdaptedModel> {
    if !(relevance >= 0.0) {
        return Err(Error::invalid(format!("relevance factor must be >= 0, got {relevance}")));
    }
    let k = ubm.n_mixtures();
    let d = ubm.dim;
    let mut counts = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    let mut post = vec![0.0; k];
    for x in frames {
        ubm.check_dim(x.len())?;
        ubm.posteriors_into(x, &mut post);
        for (m, &g) in post.iter().enumerate() {
            counts[m] += g;
            for j in 0..d {
                sums[m * d + j] += g * x[j];
            }
        }
    }
    let mut means = ubm.means.clone();
    for m in 0..k {
        let denom = counts[m] + relevance;
        if denom > 0.0 {
            for j in 0..d {
                means[m * d + j] = (sums[m * d + j] + relevance * ubm.means[m * d + j]) / denom;
            }
        }
    }
    Ok(AdaptedModel {
        subject_id: subject_id.to_string(),
        means,
        ubm_fingerprint: ubm.fingerprint(),
    })
}

/// Mean over every frame of every channel of
/// `log p(x | adapted) - log p(x | ubm)`.
pub fn llr_score(ubm: &Ubm, model: &AdaptedModel, feat: &FeatureSegment) -> Result<f64> {
    ubm.check_dim(feat.dim())?;
    if model.ubm_fingerprint != ubm.fingerprint() || model.means.len() != ubm.means.len() {
        return Err(Error::mismatch(format!(
            "model for {} was adapted from a different background model",
            model.subject_id
        )));
    }
    let k = ubm.n_mixtures();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    let mut count = 0usize;
    for x in feat.frames() {
        ubm.joint_log_densities(&model.means, x, &mut buf);
        let target = normalize_log(&mut buf);
        ubm.joint_log_densities(&ubm.means, x, &mut buf);
        let background = normalize_log(&mut buf);
        total += target - background;
        count += 1;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Labels;
    use rand_distr::{Distribution, Normal};

    fn gaussian_frames(centers: &[(f64, f64)], per: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut out = Vec::new();
        for &(a, b) in centers {
            for _ in 0..per {
                out.push(a + noise.sample(&mut rng));
                out.push(b + noise.sample(&mut rng));
            }
        }
        out
    }

    /// Posterior straight from the density formula, no log-domain tricks.
    fn direct_posterior(ubm: &Ubm, x: &[f64]) -> Vec<f64> {
        let dens: Vec<f64> = (0..ubm.n_mixtures())
            .map(|k| {
                let mut p = ubm.weights()[k];
                for j in 0..ubm.dim() {
                    let v = ubm.variance(k)[j];
                    let z = x[j] - ubm.mean(k)[j];
                    p *= (-(z * z) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .collect();
        let s: f64 = dens.iter().sum();
        dens.iter().map(|p| p / s).collect()
    }

    #[test]
    fn single_mixture_is_the_sample_moments() {
        let frames = gaussian_frames(&[(1.0, -2.0)], 500, 0.7, 1);
        let fit = train_ubm(&frames, 2, &UbmConfig { n_mixtures: 1, ..Default::default() }).unwrap();
        let (mean, var) = {
            let n = 500.0;
            let m: Vec<f64> = (0..2).map(|j| frames.iter().skip(j).step_by(2).sum::<f64>() / n).collect();
            let v: Vec<f64> = (0..2)
                .map(|j| frames.iter().skip(j).step_by(2).map(|x| (x - m[j]).powi(2)).sum::<f64>() / n)
                .collect();
            (m, v)
        };
        assert_eq!(fit.ubm.weights(), &[1.0]);
        for j in 0..2 {
            assert!((fit.ubm.mean(0)[j] - mean[j]).abs() < 1e-10);
            assert!((fit.ubm.variance(0)[j] - var[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn two_clusters_posteriors_match_direct_bayes() {
        let frames = gaussian_frames(&[(-5.0, 0.0), (5.0, 1.0)], 300, 1.0, 2);
        let fit = train_ubm(&frames, 2, &UbmConfig { n_mixtures: 2, seed: 4, ..Default::default() }).unwrap();
        for x in frames.chunks_exact(2).step_by(7) {
            let got = fit.ubm.posteriors(x);
            let want = direct_posterior(&fit.ubm, x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
        // The two mixtures split the two clusters.
        let mut m0: Vec<f64> = (0..2).map(|k| fit.ubm.mean(k)[0]).collect();
        m0.sort_by(f64::total_cmp);
        assert!((m0[0] + 5.0).abs() < 0.3 && (m0[1] - 5.0).abs() < 0.3);
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let frames = gaussian_frames(&[(0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (3.0, 3.0)], 500, 0.8, 3);
        let fit = train_ubm(
            &frames,
            2,
            &UbmConfig {
                n_mixtures: 4,
                max_iters: 30,
                tol: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] - w[0] >= -1e-8, "{:?}", fit.log_likelihoods);
        }
        for k in 0..4 {
            for j in 0..2 {
                assert!(fit.ubm.variance(k)[j] >= fit.ubm.training.floor[j]);
            }
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let frames = gaussian_frames(&[(0.0, 0.0)], 30, 1.0, 0);
        assert!(train_ubm(&frames, 2, &UbmConfig { n_mixtures: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn posterior_cases() {
        let ubm = Ubm::new(vec![0.5, 0.5], vec![0.0, 0.0, 50.0, 50.0], vec![1.0; 4], 2).unwrap();
        assert!(ubm.posteriors(&[0.0, 0.0])[0] > 0.999);

        let same = Ubm::new(vec![1.0 / 3.0; 3], vec![1.0; 6], vec![2.0; 6], 2).unwrap();
        for p in same.posteriors(&[4.0, -1.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let means: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let vars: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
        let random = Ubm::new(vec![0.2, 0.3, 0.5], means, vars, 2).unwrap();
        for _ in 0..50 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let got = random.posteriors(&x);
            let want = direct_posterior(&random, &x);
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    fn toy_ubm() -> Ubm {
        Ubm::new(vec![0.4, 0.6], vec![0.0, 1.0, 2.0, -1.0], vec![1.0, 0.5, 2.0, 1.5], 2).unwrap()
    }

    #[test]
    fn map_limits_and_formula() {
        let ubm = toy_ubm();
        let frames = gaussian_frames(&[(0.5, 0.5), (2.5, -0.5)], 20, 0.5, 5);
        let rows = || frames.chunks_exact(2);

        let prior = map_adapt(&ubm, "s", rows(), 1e12).unwrap();
        for (a, b) in prior.means.iter().zip(ubm.means()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Hand-rolled oracle for r = 16 and r = 0.
        let mut n = [0.0; 2];
        let mut f = [0.0; 4];
        for x in rows() {
            let p = direct_posterior(&ubm, x);
            for k in 0..2 {
                n[k] += p[k];
                f[2 * k] += p[k] * x[0];
                f[2 * k + 1] += p[k] * x[1];
            }
        }
        let data = map_adapt(&ubm, "s", rows(), 0.0).unwrap();
        let adapted = map_adapt(&ubm, "s", rows(), DEFAULT_RELEVANCE).unwrap();
        for k in 0..2 {
            for j in 0..2 {
                let xbar = f[2 * k + j] / n[k];
                let m = ubm.mean(k)[j];
                let want = (n[k] * xbar + 16.0 * m) / (n[k] + 16.0);
                assert!((adapted.means[2 * k + j] - want).abs() < 1e-12);
                assert!((data.means[2 * k + j] - xbar).abs() < 1e-12);
                // Interpolation stays between prior and data mean.
                let a = adapted.means[2 * k + j];
                assert!(a >= m.min(xbar) - 1e-12 && a <= m.max(xbar) + 1e-12);
            }
        }
        assert!(map_adapt(&ubm, "s", rows(), -1.0).is_err());
    }

    fn feature(frames: Vec<f64>, d: usize) -> FeatureSegment {
        let n = frames.len() / d;
        FeatureSegment::from_parts(Labels::new("s", "e", "t"), 1, n, d, frames).unwrap()
    }

    #[test]
    fn llr_zero_for_unadapted_and_positive_for_own_data() {
        let ubm = toy_ubm();
        let frames = gaussian_frames(&[(1.5, 1.5)], 1000, 0.5, 6);
        let feat = feature(frames.clone(), 2);
        let same = AdaptedModel {
            subject_id: "s".into(),
            means: ubm.means().to_vec(),
            ubm_fingerprint: ubm.fingerprint(),
        };
        assert_eq!(llr_score(&ubm, &same, &feat).unwrap(), 0.0);

        let enrolled = map_adapt(&ubm, "s", frames[..1000].chunks_exact(2), DEFAULT_RELEVANCE).unwrap();
        let held_out = feature(frames[1000..].to_vec(), 2);
        assert!(llr_score(&ubm, &enrolled, &held_out).unwrap() > 0.0);

        let other = Ubm::new(vec![1.0], vec![0.0, 0.0], vec![1.0, 1.0], 2).unwrap();
        assert!(llr_score(&other, &enrolled, &held_out).is_err());
        assert!(llr_score(&ubm, &enrolled, &feature(vec![0.0; 3], 3)).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let frames = gaussian_frames(&[(0.0, 0.0), (4.0, 4.0)], 100, 1.0, 8);
        let mut fit = train_ubm(&frames, 2, &UbmConfig { n_mixtures: 2, seed: 3, ..Default::default() }).unwrap();
        fit.ubm.provenance = Provenance::new(77, 3);
        let bytes = fit.ubm.to_bytes();
        let back = Ubm::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, fit.ubm);
        assert_eq!(back.training, fit.ubm.training);
        assert_eq!(back.provenance.config_hash, 77);
        assert_eq!(back.fingerprint(), fit.ubm.fingerprint());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn reload_keeps_likelihoods_bit_exact() {
        let frames = gaussian_frames(&[(0.0, 0.0), (3.0, -1.0), (-2.0, 4.0)], 333, 0.7, 21);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for (k, seed) in (3..9).flat_map(|k| (0..4).map(move |s| (k, s))) {
            let fit = train_ubm(&frames, 2, &UbmConfig { n_mixtures: k, seed, ..Default::default() }).unwrap();
            let back = Ubm::from_bytes(&fit.ubm.to_bytes(), Path::new("mem")).unwrap();
            assert_eq!(bits(back.weights()), bits(fit.ubm.weights()), "K={k} seed={seed}");
            let (mut a, mut b) = (vec![0.0; k], vec![0.0; k]);
            for x in frames.chunks_exact(2) {
                assert_eq!(fit.ubm.posteriors_into(x, &mut a).to_bits(), back.posteriors_into(x, &mut b).to_bits());
                assert_eq!(bits(&a), bits(&b));
            }
        }
    }
}
