//! Baum-Welch statistics, total-variability training and i-vector extraction.
//!
//! Statistics are grouped into blocks of `d` rows. Baseline mode has one block
//! per mixture with channels pooled; modified mode has one block per
//! (mixture, channel) pair at index `k * C + c`, so that `C = 1` reproduces
//! the baseline layout exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codec::{self, Provenance, Reader, Writer};
use crate::dataio::Labels;
use crate::error::{Error, Result};
use crate::features::FeatureSegment;
use crate::gmm::Ubm;

const TV_MAGIC: &[u8; 5] = b"TVMX1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatsMode {
    /// Channels pooled into one statistic per mixture.
    Baseline,
    /// One statistic per (mixture, channel).
    Modified,
}

impl StatsMode {
    fn code(self) -> u8 {
        match self {
            StatsMode::Baseline => 0,
            StatsMode::Modified => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StatsMode::Baseline),
            1 => Some(StatsMode::Modified),
            _ => None,
        }
    }

    fn blocks(self, k: usize, c: usize) -> usize {
        match self {
            StatsMode::Baseline => k,
            StatsMode::Modified => k * c,
        }
    }
}

/// Zeroth- and first-order statistics of one segment, the latter centred at
/// the UBM means.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub labels: Labels,
    pub mode: StatsMode,
    pub n_mixtures: usize,
    pub n_channels: usize,
    pub dim: usize,
    pub zeroth: Vec<f64>,
    pub first: Vec<f64>,
}

impl SuffStats {
    pub fn n_blocks(&self) -> usize {
        self.zeroth.len()
    }

    /// Adds another segment's statistics, e.g. to enroll from pooled data.
    pub fn merge(&mut self, other: &SuffStats) -> Result<()> {
        if (self.mode, self.n_mixtures, self.n_channels, self.dim)
            != (other.mode, other.n_mixtures, other.n_channels, other.dim)
        {
            return Err(Error::mismatch("cannot merge statistics of different layouts"));
        }
        for (a, b) in self.zeroth.iter_mut().zip(&other.zeroth) {
            *a += b;
        }
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate_stats(ubm: &Ubm, feat: &FeatureSegment, mode: StatsMode) -> Result<SuffStats> {
    let d = ubm.dim();
    if feat.dim() != d {
        return Err(Error::mismatch(format!(
            "background model has d={d}, features have d={}",
            feat.dim()
        )));
    }
    let k_total = ubm.n_mixtures();
    let c_total = feat.n_channels();
    let blocks = mode.blocks(k_total, c_total);
    let mut zeroth = vec![0.0; blocks];
    let mut first = vec![0.0; blocks * d];
    let mut post = vec![0.0; k_total];
    for c in 0..c_total {
        for n in 0..feat.n_frames() {
            let x = feat.frame(c, n);
            ubm.posteriors_into(x, &mut post);
            for (k, &g) in post.iter().enumerate() {
                let b = match mode {
                    StatsMode::Baseline => k,
                    StatsMode::Modified => k * c_total + c,
                };
                zeroth[b] += g;
                let f = &mut first[b * d..(b + 1) * d];
                for j in 0..d {
                    f[j] += g * x[j];
                }
            }
        }
    }
    // Centre: F_b -= N_b m_k.
    for b in 0..blocks {
        let k = match mode {
            StatsMode::Baseline => b,
            StatsMode::Modified => b / c_total,
        };
        let m = ubm.mean(k);
        for j in 0..d {
            first[b * d + j] -= zeroth[b] * m[j];
        }
    }
    Ok(SuffStats {
        labels: feat.labels.clone(),
        mode,
        n_mixtures: k_total,
        n_channels: c_total,
        dim: d,
        zeroth,
        first,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub labels: Labels,
    pub w: Vec<f64>,
}

/// The total-variability subspace `T` (D x R) with its per-row variances.
#[derive(Debug, Clone)]
pub struct TotalVariability {
    pub mode: StatsMode,
    pub n_mixtures: usize,
    pub n_channels: usize,
    pub dim: usize,
    t: DMatrix<f64>,
    sigma: Vec<f64>,
    pub ubm_fingerprint: u64,
    pub provenance: Provenance,
    // Tᵗ Σ⁻¹ (R x D) and per-block T_bᵗ Σ_b⁻¹ T_b.
    t_sigma_inv: DMatrix<f64>,
    precision: Vec<DMatrix<f64>>,
}

impl PartialEq for TotalVariability {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.n_mixtures == other.n_mixtures
            && self.n_channels == other.n_channels
            && self.dim == other.dim
            && self.t == other.t
            && self.sigma == other.sigma
            && self.ubm_fingerprint == other.ubm_fingerprint
    }
}

impl TotalVariability {
    /// `t` is row-major D x R with D = blocks * d.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: StatsMode,
        n_mixtures: usize,
        n_channels: usize,
        dim: usize,
        rank: usize,
        t: &[f64],
        sigma: Vec<f64>,
        ubm_fingerprint: u64,
    ) -> Result<Self> {
        if rank == 0 || n_mixtures == 0 || n_channels == 0 || dim == 0 {
            return Err(Error::invalid("subspace needs R, K, C, d >= 1"));
        }
        let rows = mode.blocks(n_mixtures, n_channels) * dim;
        if t.len() != rows * rank || sigma.len() != rows {
            return Err(Error::invalid(format!(
                "T must be {rows}x{rank} and sigma {rows} long, got {} and {}",
                t.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("T must be finite and sigma positive"));
        }
        let mut tv = TotalVariability {
            mode,
            n_mixtures,
            n_channels,
            dim,
            t: DMatrix::from_row_slice(rows, rank, t),
            sigma,
            ubm_fingerprint,
            provenance: Provenance::default(),
            t_sigma_inv: DMatrix::zeros(0, 0),
            precision: Vec::new(),
        };
        tv.refresh();
        Ok(tv)
    }

    fn refresh(&mut self) {
        let mut tsi = self.t.transpose();
        for (i, s) in self.sigma.iter().enumerate() {
            tsi.column_mut(i).scale_mut(1.0 / s);
        }
        let d = self.dim;
        self.precision = (0..self.n_blocks())
            .into_par_iter()
            .map(|b| {
                let rows = b * d..(b + 1) * d;
                tsi.columns(rows.start, d) * self.t.rows(rows.start, d)
            })
            .collect();
        self.t_sigma_inv = tsi;
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn n_blocks(&self) -> usize {
        self.mode.blocks(self.n_mixtures, self.n_channels)
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// `T` in row-major order.
    pub fn t_row_major(&self) -> Vec<f64> {
        self.t.transpose().as_slice().to_vec()
    }

    fn check(&self, stats: &SuffStats) -> Result<()> {
        let channels_ok = self.mode == StatsMode::Baseline || stats.n_channels == self.n_channels;
        if stats.mode != self.mode || stats.n_mixtures != self.n_mixtures || stats.dim != self.dim || !channels_ok {
            return Err(Error::mismatch(format!(
                "statistics ({:?}, K={}, C={}, d={}) do not fit the subspace ({:?}, K={}, C={}, d={})",
                stats.mode,
                stats.n_mixtures,
                stats.n_channels,
                stats.dim,
                self.mode,
                self.n_mixtures,
                self.n_channels,
                self.dim
            )));
        }
        Ok(())
    }

    /// Posterior precision `L = I + Σ_b N_b T_bᵗ Σ_b⁻¹ T_b` and the linear
    /// term `Tᵗ Σ⁻¹ F`.
    fn posterior_system(&self, stats: &SuffStats) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.rank();
        let mut l = DMatrix::identity(r, r);
        for (n, p) in stats.zeroth.iter().zip(&self.precision) {
            if *n != 0.0 {
                l.zip_apply(p, |a, b| *a += n * b);
            }
        }
        let rhs = &self.t_sigma_inv * DVector::from_column_slice(&stats.first);
        (l, rhs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TV_MAGIC);
        w.u8(self.mode.code());
        w.u32(self.n_mixtures as u32);
        w.u32(self.n_channels as u32);
        w.u32(self.dim as u32);
        w.u32(self.rank() as u32);
        w.f64s(&self.t_row_major());
        w.f64s(&self.sigma);
        w.u64(self.ubm_fingerprint);
        self.provenance.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, TV_MAGIC, origin)?;
        let mode = StatsMode::from_code(r.u8()?).ok_or_else(|| r.corrupt("unknown statistics mode"))?;
        let k = r.u32()? as usize;
        let c = r.u32()? as usize;
        let d = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let rows = mode.blocks(k, c) * d;
        let t = r.f64s(rows * rank)?;
        let sigma = r.f64s(rows)?;
        let fp = r.u64()?;
        let provenance = Provenance::read(&mut r)?;
        r.finish()?;
        let mut tv = TotalVariability::new(mode, k, c, d, rank, &t, sigma, fp)
            .map_err(|e| Error::artifact(origin, e.to_string()))?;
        tv.provenance = provenance;
        Ok(tv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TotalVariability::from_bytes(&codec::read_file(path)?, path)
    }
}

/// `w = (I + Tᵗ Σ⁻¹ N T)⁻¹ Tᵗ Σ⁻¹ F`, solved as an R x R SPD system.
pub fn extract_ivector(tv: &TotalVariability, stats: &SuffStats) -> Result<IVector> {
    tv.check(stats)?;
    let (l, rhs) = tv.posterior_system(stats);
    let chol = l
        .cholesky()
        .ok_or_else(|| Error::Numerical("i-vector posterior precision is not positive definite".into()))?;
    Ok(IVector {
        labels: stats.labels.clone(),
        w: chol.solve(&rhs).as_slice().to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct TmatConfig {
    pub rank: usize,
    pub n_iters: usize,
    pub seed: u64,
}

impl Default for TmatConfig {
    fn default() -> Self {
        TmatConfig {
            rank: 160,
            n_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TmatFit {
    pub tv: TotalVariability,
    /// Mean per-segment `½ bᵗL⁻¹b - ½ log|L|` before each iteration and after
    /// the last one. This is the T-dependent part of the data log-likelihood.
    pub objective: Vec<f64>,
}

struct Posterior {
    mean: DVector<f64>,
    second: DMatrix<f64>,
    objective: f64,
}

fn posterior(tv: &TotalVariability, stats: &SuffStats) -> Result<Posterior> {
    let (l, rhs) = tv.posterior_system(stats);
    let chol = l
        .cholesky()
        .ok_or_else(|| Error::Numerical("posterior precision lost definiteness during T training".into()))?;
    let mean = chol.solve(&rhs);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let objective = 0.5 * rhs.dot(&mean) - 0.5 * logdet;
    let mut second = chol.inverse();
    second.ger(1.0, &mean, &mean, 1.0);
    Ok(Posterior {
        mean,
        second,
        objective,
    })
}

fn e_step(tv: &TotalVariability, stats: &[SuffStats]) -> Result<(Vec<Posterior>, f64)> {
    let post: Vec<Posterior> = stats.par_iter().map(|s| posterior(tv, s)).collect::<Result<_>>()?;
    let objective = post.iter().map(|p| p.objective).sum::<f64>() / stats.len() as f64;
    Ok((post, objective))
}

/// Trains `T` by EM on per-segment statistics. Block variances are the UBM's.
pub fn train_tmatrix(ubm: &Ubm, stats: &[SuffStats], cfg: &TmatConfig) -> Result<TmatFit> {
    let first = stats.first().ok_or_else(|| Error::invalid("T training needs at least one segment"))?;
    if cfg.n_iters == 0 || cfg.rank == 0 {
        return Err(Error::invalid("T training needs n_iters >= 1 and R >= 1"));
    }
    let (mode, k, c, d) = (first.mode, first.n_mixtures, first.n_channels, first.dim);
    if k != ubm.n_mixtures() || d != ubm.dim() {
        return Err(Error::mismatch("statistics were not computed with this background model"));
    }
    if stats.len() < cfg.rank {
        log::warn!("training a rank-{} subspace on only {} segments", cfg.rank, stats.len());
    }
    let blocks = mode.blocks(k, c);
    let rows = blocks * d;
    let sigma: Vec<f64> = (0..blocks)
        .flat_map(|b| {
            let mix = if mode == StatsMode::Modified { b / c } else { b };
            ubm.variance(mix).to_vec()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = vec![0.0; rows * cfg.rank];
    for (i, v) in init.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = 0.01 * sigma[i / cfg.rank].sqrt() * z;
    }
    let mut tv = TotalVariability::new(mode, k, c, d, cfg.rank, &init, sigma, ubm.fingerprint())?;
    for s in stats {
        tv.check(s)?;
    }

    let r = cfg.rank;
    let mut objective = Vec::with_capacity(cfg.n_iters + 1);
    for iter in 0..cfg.n_iters {
        let (post, obj) = e_step(&tv, stats)?;
        objective.push(obj);
        log::debug!("T iteration {iter}: objective {obj}");

        let new_blocks: Vec<DMatrix<f64>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut a = DMatrix::<f64>::zeros(r, r);
                let mut cross = DMatrix::<f64>::zeros(d, r);
                for (s, p) in stats.iter().zip(&post) {
                    let n = s.zeroth[b];
                    if n != 0.0 {
                        a.zip_apply(&p.second, |x, y| *x += n * y);
                    }
                    let f = DVector::from_column_slice(&s.first[b * d..(b + 1) * d]);
                    cross.ger(1.0, &f, &p.mean, 1.0);
                }
                solve_block(a, cross, b)
            })
            .collect();
        for (b, block) in new_blocks.into_iter().enumerate() {
            tv.t.rows_mut(b * d, d).copy_from(&block);
        }
        tv.refresh();
    }
    objective.push(e_step(&tv, stats)?.1);
    Ok(TmatFit { tv, objective })
}

/// `T_b = C A⁻¹` for SPD `A`, regularising a singular system.
fn solve_block(a: DMatrix<f64>, cross: DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let ct = cross.transpose();
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(&ct).transpose();
    }
    log::warn!("T block {block}: singular M-step system, adding 1e-8 I");
    let r = a.nrows();
    let reg = a + DMatrix::identity(r, r) * 1e-8;
    match reg.clone().cholesky() {
        Some(chol) => chol.solve(&ct).transpose(),
        None => reg.lu().solve(&ct).map(|m| m.transpose()).unwrap_or_else(|| cross * 0.0),
    }
}

/// Flattens the channels of each frame into one vector of length C·d, for the
/// early-concatenation comparison system.
pub fn variant_feature_concat(feat: &FeatureSegment) -> Result<FeatureSegment> {
    let (c_total, n_total, d) = (feat.n_channels(), feat.n_frames(), feat.dim());
    let mut data = Vec::with_capacity(c_total * n_total * d);
    for n in 0..n_total {
        for c in 0..c_total {
            data.extend_from_slice(feat.frame(c, n));
        }
    }
    let mut out = FeatureSegment::from_parts(feat.labels.clone(), 1, n_total, c_total * d, data)?;
    out.index = feat.index;
    out.span_s = feat.span_s;
    out.frame_len_ms = feat.frame_len_ms;
    out.band_hz = feat.band_hz;
    Ok(out)
}

/// Unweighted mean over channels of a C x S score matrix.
pub fn variant_score_fusion(per_channel: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_channel.first().ok_or_else(|| Error::invalid("no channel scores to fuse"))?;
    let s = first.len();
    if per_channel.iter().any(|row| row.len() != s) {
        return Err(Error::invalid("channel score rows differ in length"));
    }
    if per_channel.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("channel scores must be finite"));
    }
    let c = per_channel.len() as f64;
    Ok((0..s).map(|j| per_channel.iter().map(|row| row[j]).sum::<f64>() / c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_ubm(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Ubm {
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let means = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vars = (0..k * d).map(|_| rng.gen_range(0.5..2.0)).collect();
        Ubm::new(w, means, vars, d).unwrap()
    }

    fn random_feat(c: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureSegment {
        let data = (0..c * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FeatureSegment::from_parts(Labels::new("s", "e", "t"), c, n, d, data).unwrap()
    }

    #[test]
    fn stats_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ubm = random_ubm(2, 3, &mut rng);
        let feat = random_feat(2, 3, 3, &mut rng);
        let got = accumulate_stats(&ubm, &feat, StatsMode::Modified).unwrap();
        let base = accumulate_stats(&ubm, &feat, StatsMode::Baseline).unwrap();
        for k in 0..2 {
            let mut nk = 0.0;
            let mut fk = [0.0; 3];
            for c in 0..2 {
                let mut n = 0.0;
                let mut f = [0.0; 3];
                for t in 0..3 {
                    let x = feat.frame(c, t);
                    let g = ubm.posteriors(x)[k];
                    n += g;
                    for j in 0..3 {
                        f[j] += g * (x[j] - ubm.mean(k)[j]);
                    }
                }
                let b = k * 2 + c;
                assert!((got.zeroth[b] - n).abs() < 1e-12);
                for j in 0..3 {
                    assert!((got.first[b * 3 + j] - f[j]).abs() < 1e-12);
                    fk[j] += f[j];
                }
                nk += n;
            }
            assert!((base.zeroth[k] - nk).abs() < 1e-12);
            for j in 0..3 {
                assert!((base.first[k * 3 + j] - fk[j]).abs() < 1e-12);
            }
        }
        assert!((base.zeroth.iter().sum::<f64>() - 6.0).abs() < 1e-9);
        assert!((got.zeroth.iter().sum::<f64>() - base.zeroth.iter().sum::<f64>()).abs() < 1e-9);
        for c in 0..2 {
            let per: f64 = (0..2).map(|k| got.zeroth[k * 2 + c]).sum();
            assert!((per - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_channel_stats_collapse_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ubm = random_ubm(3, 2, &mut rng);
        let feat = random_feat(1, 7, 2, &mut rng);
        let a = accumulate_stats(&ubm, &feat, StatsMode::Baseline).unwrap();
        let b = accumulate_stats(&ubm, &feat, StatsMode::Modified).unwrap();
        assert_eq!(a.zeroth, b.zeroth);
        assert_eq!(a.first, b.first);
    }

    #[test]
    fn zero_subspace_gives_zero_ivector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ubm = random_ubm(2, 2, &mut rng);
        let feat = random_feat(2, 4, 2, &mut rng);
        let stats = accumulate_stats(&ubm, &feat, StatsMode::Modified).unwrap();
        let tv = TotalVariability::new(StatsMode::Modified, 2, 2, 2, 3, &[0.0; 24], vec![1.0; 8], 0).unwrap();
        assert_eq!(extract_ivector(&tv, &stats).unwrap().w, vec![0.0; 3]);
    }

    #[test]
    fn full_sized_modified_subspace_shape() {
        let tv = TotalVariability::new(
            StatsMode::Modified,
            7,
            9,
            10,
            160,
            &vec![0.0; 630 * 160],
            vec![1.0; 630],
            0,
        )
        .unwrap();
        assert_eq!((tv.t().nrows(), tv.t().ncols()), (630, 160));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ubm = random_ubm(2, 2, &mut rng);
        let feat = random_feat(2, 4, 2, &mut rng);
        let stats = accumulate_stats(&ubm, &feat, StatsMode::Baseline).unwrap();
        let tv = TotalVariability::new(StatsMode::Modified, 2, 2, 2, 1, &[0.0; 8], vec![1.0; 8], 0).unwrap();
        assert!(extract_ivector(&tv, &stats).is_err());
        let other = random_feat(2, 4, 3, &mut rng);
        assert!(accumulate_stats(&ubm, &other, StatsMode::Baseline).is_err());
    }

    #[test]
    fn tmatrix_objective_rises_and_file_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ubm = random_ubm(3, 2, &mut rng);
        let stats: Vec<SuffStats> = (0..30)
            .map(|i| {
                let shift = (i % 3) as f64;
                let mut f = random_feat(2, 20, 2, &mut rng);
                f = FeatureSegment::from_parts(
                    f.labels.clone(),
                    2,
                    20,
                    2,
                    f.data().iter().map(|v| v + shift).collect(),
                )
                .unwrap();
                accumulate_stats(&ubm, &f, StatsMode::Modified).unwrap()
            })
            .collect();
        let fit = train_tmatrix(&ubm, &stats, &TmatConfig { rank: 2, n_iters: 8, seed: 1 }).unwrap();
        for w in fit.objective.windows(2) {
            assert!(w[1] - w[0] >= -1e-6 * w[0].abs(), "{:?}", fit.objective);
        }
        assert!(fit.objective.last().unwrap() > &fit.objective[0]);

        let again = train_tmatrix(&ubm, &stats, &TmatConfig { rank: 2, n_iters: 8, seed: 1 }).unwrap();
        assert_eq!(again.tv, fit.tv);

        let back = TotalVariability::from_bytes(&fit.tv.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, fit.tv);
        for s in &stats {
            assert_eq!(extract_ivector(&back, s).unwrap(), extract_ivector(&fit.tv, s).unwrap());
        }
    }

    #[test]
    fn feature_concat_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = random_feat(2, 5, 10, &mut rng);
        let cat = variant_feature_concat(&feat).unwrap();
        assert_eq!((cat.n_channels(), cat.n_frames(), cat.dim()), (1, 5, 20));
        assert_eq!(&cat.frame(0, 3)[10..], feat.frame(1, 3));
        let one = random_feat(1, 5, 10, &mut rng);
        assert_eq!(variant_feature_concat(&one).unwrap(), one);
    }

    #[test]
    fn score_fusion_is_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let fused = variant_score_fusion(&m).unwrap();
        for j in 0..6 {
            assert_eq!(fused[j], (m[0][j] + m[1][j] + m[2][j] + m[3][j]) / 4.0);
        }
        assert_eq!(variant_score_fusion(&m[..1]).unwrap(), m[0]);
        let agree = vec![vec![0.1, 0.9, 0.2], vec![0.3, 0.5, 0.4]];
        let f = variant_score_fusion(&agree).unwrap();
        assert!(f[1] > f[0] && f[1] > f[2]);
    }
}
