//! The identification systems the protocols compare, assembled from the
//! model components: training, segment embedding, enrollment, scoring and
//! on-disk persistence as a directory of component artifacts.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, Embedding, EmbeddingKind, LdaModel};
use crate::codec::{self, fingerprint, Provenance};
use crate::config::{EnrollMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{Exposure, ScoreTable};
use crate::features::FeatureSegment;
use crate::gmm::{self, AdaptedModel, Ubm, UbmConfig};
use crate::ivector::{self, StatsMode, SuffStats, TmatConfig, TotalVariability};
use crate::xvector::{self, PoolMode, Shape, TrainConfig, XvecNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemKind {
    /// MAP-adapted GMMs scored by log-likelihood ratio.
    Gmm,
    /// i-vectors from statistics pooled over channels.
    IvectorBaseline,
    /// i-vectors from per-channel statistics stacked into one supervector.
    Ivector,
    XvectorBaseline,
    Xvector,
    /// Modified i-vector and x-vector, fused.
    Ix,
    /// Baseline i-vector over frames with all channels concatenated.
    IvectorConcat,
    /// One single-channel i-vector system per channel, cosine scores averaged.
    IvectorScoreFusion,
}

impl SystemKind {
    pub const ALL: [SystemKind; 8] = [
        SystemKind::Gmm,
        SystemKind::IvectorBaseline,
        SystemKind::Ivector,
        SystemKind::XvectorBaseline,
        SystemKind::Xvector,
        SystemKind::Ix,
        SystemKind::IvectorConcat,
        SystemKind::IvectorScoreFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Gmm => "ubm-gmm",
            SystemKind::IvectorBaseline => "ivector-baseline",
            SystemKind::Ivector => "ivector",
            SystemKind::XvectorBaseline => "xvector-baseline",
            SystemKind::Xvector => "xvector",
            SystemKind::Ix => "ix",
            SystemKind::IvectorConcat => "ivector-concat",
            SystemKind::IvectorScoreFusion => "ivector-score-fusion",
        }
    }

    /// The i-vector extractor this system needs, if any.
    pub fn ivector_spec(self, cfg: &PipelineConfig) -> Option<IvectorSpec> {
        let (mode, concat, mixtures) = match self {
            SystemKind::IvectorBaseline => (StatsMode::Baseline, false, cfg.ubm.baseline_mixtures),
            SystemKind::Ivector | SystemKind::Ix => (StatsMode::Modified, false, cfg.ubm.modified_mixtures),
            SystemKind::IvectorConcat => (StatsMode::Baseline, true, cfg.ubm.modified_mixtures),
            SystemKind::IvectorScoreFusion => (StatsMode::Baseline, false, cfg.ubm.modified_mixtures),
            _ => return None,
        };
        Some(IvectorSpec { mode, concat, mixtures })
    }

    pub fn pool_mode(self) -> Option<PoolMode> {
        match self {
            SystemKind::XvectorBaseline => Some(PoolMode::Baseline),
            SystemKind::Xvector | SystemKind::Ix => Some(PoolMode::Modified),
            _ => None,
        }
    }

    /// Whether every channel gets its own sub-system.
    pub fn per_channel(self) -> bool {
        self == SystemKind::IvectorScoreFusion
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let alias = match s.as_str() {
            "gmm" => "ubm-gmm",
            "ixvector" | "ix-vector" => "ix",
            "modified-ivector" => "ivector",
            "modified-xvector" => "xvector",
            other => other,
        };
        SystemKind::ALL.into_iter().find(|k| k.name() == alias).ok_or_else(|| {
            let names: Vec<&str> = SystemKind::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown system `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// How segments are turned into statistics for one i-vector extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvectorSpec {
    pub mode: StatsMode,
    pub concat: bool,
    pub mixtures: usize,
}

impl IvectorSpec {
    pub fn input<'a>(&self, feat: &'a FeatureSegment) -> Result<Cow<'a, FeatureSegment>> {
        if self.concat {
            Ok(Cow::Owned(ivector::variant_feature_concat(feat)?))
        } else {
            Ok(Cow::Borrowed(feat))
        }
    }
}

/// Seed for one training stage, derived from the run seed and a stage tag.
pub fn stage_seed(seed: u64, tag: &str) -> u64 {
    fingerprint(format!("{seed}/{tag}").as_bytes())
}

fn channel_tag(tag: &str, channel: Option<usize>) -> String {
    match channel {
        Some(c) => format!("{tag}/ch{c}"),
        None => tag.to_string(),
    }
}

/// Views of `segs` restricted to one channel.
pub fn channel_views(segs: &[&FeatureSegment], channel: usize) -> Result<Vec<FeatureSegment>> {
    segs.iter().map(|f| f.select_channels(&[channel])).collect()
}

fn flat_frames(feats: &[Cow<'_, FeatureSegment>]) -> (Vec<f64>, usize) {
    let dim = feats.first().map_or(0, |f| f.dim());
    let mut frames = Vec::with_capacity(feats.iter().map(|f| f.data().len()).sum());
    for f in feats {
        frames.extend_from_slice(f.data());
    }
    (frames, dim)
}

fn require_segments(segs: &[&FeatureSegment], what: &str) -> Result<()> {
    if segs.is_empty() {
        return Err(Error::Protocol(format!("no segments available to train the {what}")));
    }
    Ok(())
}

/// Background model for `kind`. `channel` tags the seed of per-channel
/// sub-systems.
pub fn fit_ubm(kind: SystemKind, cfg: &PipelineConfig, segs: &[&FeatureSegment], channel: Option<usize>) -> Result<Ubm> {
    require_segments(segs, "background model")?;
    let (mixtures, inputs) = match kind.ivector_spec(cfg) {
        Some(spec) => (spec.mixtures, segs.iter().map(|f| spec.input(f)).collect::<Result<Vec<_>>>()?),
        None if kind == SystemKind::Gmm => (cfg.ubm.gmm_mixtures, segs.iter().map(|f| Cow::Borrowed(*f)).collect()),
        None => return Err(Error::invalid(format!("system {kind} has no background model"))),
    };
    let (frames, dim) = flat_frames(&inputs);
    let seed = stage_seed(cfg.seed, &channel_tag("ubm", channel));
    let ucfg = UbmConfig {
        n_mixtures: mixtures,
        max_iters: cfg.ubm.max_iters,
        tol: cfg.ubm.tol,
        seed,
        ..UbmConfig::default()
    };
    let mut ubm = gmm::train_ubm(&frames, dim, &ucfg)?.ubm;
    ubm.provenance = Provenance::new(cfg.hash(), seed);
    Ok(ubm)
}

pub fn segment_stats(spec: &IvectorSpec, ubm: &Ubm, segs: &[&FeatureSegment]) -> Result<Vec<SuffStats>> {
    segs.par_iter()
        .map(|f| ivector::accumulate_stats(ubm, &*spec.input(f)?, spec.mode))
        .collect()
}

pub fn fit_tmatrix(
    kind: SystemKind,
    cfg: &PipelineConfig,
    ubm: &Ubm,
    segs: &[&FeatureSegment],
    channel: Option<usize>,
) -> Result<TotalVariability> {
    require_segments(segs, "total-variability matrix")?;
    let spec = kind
        .ivector_spec(cfg)
        .ok_or_else(|| Error::invalid(format!("system {kind} has no i-vector extractor")))?;
    let stats = segment_stats(&spec, ubm, segs)?;
    let seed = stage_seed(cfg.seed, &channel_tag("tmatrix", channel));
    let tcfg = TmatConfig {
        rank: cfg.ivector.rank,
        n_iters: cfg.ivector.n_iters,
        seed,
    };
    let mut tv = ivector::train_tmatrix(ubm, &stats, &tcfg)?.tv;
    tv.provenance = Provenance::new(cfg.hash(), seed);
    Ok(tv)
}

pub fn fit_xvector(
    kind: SystemKind,
    cfg: &PipelineConfig,
    train: &[&FeatureSegment],
    val: &[&FeatureSegment],
) -> Result<XvecNet> {
    require_segments(train, "x-vector network")?;
    let mode = kind
        .pool_mode()
        .ok_or_else(|| Error::invalid(format!("system {kind} has no x-vector network")))?;
    let mut classes: Vec<String> = train.iter().map(|f| f.labels.subject_id.clone()).collect();
    classes.sort();
    classes.dedup();
    let x = &cfg.xvector;
    let (h1, h2) = match mode {
        PoolMode::Baseline => (x.baseline_h1, x.baseline_h2),
        PoolMode::Modified => (x.h1, x.h2),
    };
    let shape = Shape {
        n_channels: train[0].n_channels(),
        dim: train[0].dim(),
        h1,
        h2,
        embed: x.embed,
        n_classes: classes.len(),
    };
    let seed = stage_seed(cfg.seed, "xvector");
    let net = XvecNet::new(mode, shape, classes, seed)?;
    let tcfg = TrainConfig {
        learning_rate: x.learning_rate,
        batch_size: x.batch_size,
        epochs: x.epochs,
        patience: x.patience,
        seed,
        ..TrainConfig::default()
    };
    let fit = xvector::train(net, train, val, &tcfg)?;
    log::info!(
        "{kind}: best epoch {} of {}, validation loss {:.4}",
        fit.best_epoch + 1,
        fit.val_loss.len(),
        fit.val_loss[fit.best_epoch]
    );
    let mut net = fit.net;
    net.provenance = Provenance::new(cfg.hash(), seed);
    Ok(net)
}

fn fit_lda_on(cfg: &PipelineConfig, raw: Vec<Embedding>) -> Result<LdaModel> {
    let mut lda = backend::fit_lda(&raw, cfg.lda.dim)?;
    lda.provenance = Provenance::new(cfg.hash(), cfg.seed);
    Ok(lda)
}

/// Unprojected i-vectors of `segs`.
pub fn raw_ivectors(spec: &IvectorSpec, ubm: &Ubm, tv: &TotalVariability, segs: &[&FeatureSegment]) -> Result<Vec<Embedding>> {
    segs.par_iter()
        .map(|f| {
            let stats = ivector::accumulate_stats(ubm, &*spec.input(f)?, spec.mode)?;
            let w = ivector::extract_ivector(tv, &stats)?.w;
            Embedding::new(EmbeddingKind::IVector, f.labels.clone(), f.index, w)
        })
        .collect()
}

pub fn raw_xvectors(net: &XvecNet, segs: &[&FeatureSegment]) -> Result<Vec<Embedding>> {
    segs.par_iter()
        .map(|f| Embedding::new(EmbeddingKind::XVector, f.labels.clone(), f.index, xvector::extract_xvector(net, f)?))
        .collect()
}

/// An i-vector extractor with its LDA back-end.
#[derive(Debug, Clone, PartialEq)]
pub struct IvectorSystem {
    pub spec: IvectorSpec,
    pub ubm: Ubm,
    pub tv: TotalVariability,
    pub lda: LdaModel,
}

impl IvectorSystem {
    pub fn train(kind: SystemKind, cfg: &PipelineConfig, segs: &[&FeatureSegment], channel: Option<usize>) -> Result<Self> {
        let spec = kind
            .ivector_spec(cfg)
            .ok_or_else(|| Error::invalid(format!("system {kind} has no i-vector extractor")))?;
        let ubm = fit_ubm(kind, cfg, segs, channel)?;
        let tv = fit_tmatrix(kind, cfg, &ubm, segs, channel)?;
        let lda = fit_lda_on(cfg, raw_ivectors(&spec, &ubm, &tv, segs)?)?;
        Ok(IvectorSystem { spec, ubm, tv, lda })
    }

    pub fn stats(&self, feat: &FeatureSegment) -> Result<SuffStats> {
        ivector::accumulate_stats(&self.ubm, &*self.spec.input(feat)?, self.spec.mode)
    }

    fn project_stats(&self, stats: &SuffStats, index: usize) -> Result<Embedding> {
        let w = ivector::extract_ivector(&self.tv, stats)?.w;
        Embedding::new(EmbeddingKind::IVector, stats.labels.clone(), index, self.lda.project_vec(&w)?)
    }

    /// LDA-projected i-vector of one segment.
    pub fn embed(&self, feat: &FeatureSegment) -> Result<Embedding> {
        self.project_stats(&self.stats(feat)?, feat.index)
    }

    /// One subject's reference: the mean of projected segment i-vectors, or
    /// the projected i-vector of the summed statistics.
    pub fn reference(&self, segs: &[&FeatureSegment], mode: EnrollMode) -> Result<Embedding> {
        match mode {
            EnrollMode::Mean => {
                let embs = segs.iter().map(|f| self.embed(f)).collect::<Result<Vec<_>>>()?;
                backend::enroll(&embs)
            }
            EnrollMode::Pooled => {
                let first = segs.first().ok_or_else(|| Error::invalid("enrollment needs at least one segment"))?;
                let mut total = self.stats(first)?;
                for f in &segs[1..] {
                    total.merge(&self.stats(f)?)?;
                }
                let mut e = self.project_stats(&total, 0)?;
                e.labels = crate::dataio::Labels::new(&first.labels.subject_id, "", "");
                Ok(e)
            }
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.ubm.save(&dir.join(UBM_FILE))?;
        self.tv.save(&dir.join(TV_FILE))?;
        self.lda.save(&dir.join(LDA_I_FILE))
    }

    fn load(kind: SystemKind, cfg: &PipelineConfig, dir: &Path) -> Result<Self> {
        let spec = kind.ivector_spec(cfg).expect("caller checked the kind");
        let ubm = Ubm::load(&dir.join(UBM_FILE))?;
        let tv = TotalVariability::load(&dir.join(TV_FILE))?;
        let lda = LdaModel::load(&dir.join(LDA_I_FILE))?;
        if tv.ubm_fingerprint != ubm.fingerprint() {
            return Err(Error::artifact(dir.join(TV_FILE), "T matrix was trained on a different background model"));
        }
        if tv.mode != spec.mode {
            return Err(Error::artifact(dir.join(TV_FILE), format!("T matrix is {:?}, system {kind} needs {:?}", tv.mode, spec.mode)));
        }
        if lda.input_dim() != tv.rank() {
            return Err(Error::artifact(dir.join(LDA_I_FILE), format!("LDA expects {}-dim input, T has rank {}", lda.input_dim(), tv.rank())));
        }
        Ok(IvectorSystem { spec, ubm, tv, lda })
    }
}

/// An x-vector network with its LDA back-end.
#[derive(Debug, Clone, PartialEq)]
pub struct XvectorSystem {
    pub net: XvecNet,
    pub lda: LdaModel,
}

impl XvectorSystem {
    pub fn train(kind: SystemKind, cfg: &PipelineConfig, train: &[&FeatureSegment], val: &[&FeatureSegment]) -> Result<Self> {
        let net = fit_xvector(kind, cfg, train, val)?;
        let lda = fit_lda_on(cfg, raw_xvectors(&net, train)?)?;
        Ok(XvectorSystem { net, lda })
    }

    pub fn embed(&self, feat: &FeatureSegment) -> Result<Embedding> {
        let z = xvector::extract_xvector(&self.net, feat)?;
        Embedding::new(EmbeddingKind::XVector, feat.labels.clone(), feat.index, self.lda.project_vec(&z)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(&dir.join(NET_FILE))?;
        self.lda.save(&dir.join(LDA_X_FILE))
    }

    fn load(dir: &Path) -> Result<Self> {
        let net = XvecNet::load(&dir.join(NET_FILE))?;
        let lda = LdaModel::load(&dir.join(LDA_X_FILE))?;
        if lda.input_dim() != net.shape.embed {
            return Err(Error::artifact(
                dir.join(LDA_X_FILE),
                format!("LDA expects {}-dim input, network embeds {}", lda.input_dim(), net.shape.embed),
            ));
        }
        Ok(XvectorSystem { net, lda })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gmm { ubm: Ubm, relevance: f64 },
    Ivector(IvectorSystem),
    Xvector(XvectorSystem),
    Ix { iv: IvectorSystem, xv: XvectorSystem },
    /// Sub-systems in channel order.
    PerChannel(Vec<IvectorSystem>),
}

/// A trained system ready to enroll and score.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub kind: SystemKind,
    pub model: Model,
}

/// Subject references produced by [`System::enroll`]. For per-channel
/// systems `index` holds the channel; for GMM systems `v` holds the adapted
/// means.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub references: Vec<Embedding>,
}

impl Enrollment {
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.references.iter().map(|e| e.labels.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn save(&self, path: &Path, prov: &Provenance) -> Result<()> {
        backend::write_embeddings(path, &self.references, prov)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let (references, prov) = backend::read_embeddings(path)?;
        Ok((Enrollment { references }, prov))
    }
}

fn by_subject<'a>(segs: &[&'a FeatureSegment]) -> BTreeMap<String, Vec<&'a FeatureSegment>> {
    let mut groups: BTreeMap<String, Vec<&FeatureSegment>> = BTreeMap::new();
    for f in segs {
        groups.entry(f.labels.subject_id.clone()).or_default().push(f);
    }
    groups
}

/// Components already trained on one (train, val) pair, so that systems
/// sharing an extractor train it once.
#[derive(Default)]
pub struct TrainCache {
    ivector: Vec<(IvectorSpec, IvectorSystem)>,
    xvector: Vec<(PoolMode, XvectorSystem)>,
}

impl TrainCache {
    fn ivector(&mut self, kind: SystemKind, cfg: &PipelineConfig, train: &[&FeatureSegment]) -> Result<IvectorSystem> {
        let spec = kind.ivector_spec(cfg).expect("i-vector kind");
        if let Some((_, sys)) = self.ivector.iter().find(|(s, _)| *s == spec) {
            return Ok(sys.clone());
        }
        let sys = IvectorSystem::train(kind, cfg, train, None)?;
        self.ivector.push((spec, sys.clone()));
        Ok(sys)
    }

    fn xvector(&mut self, kind: SystemKind, cfg: &PipelineConfig, train: &[&FeatureSegment], val: &[&FeatureSegment]) -> Result<XvectorSystem> {
        let mode = kind.pool_mode().expect("x-vector kind");
        if let Some((_, sys)) = self.xvector.iter().find(|(m, _)| *m == mode) {
            return Ok(sys.clone());
        }
        let sys = XvectorSystem::train(kind, cfg, train, val)?;
        self.xvector.push((mode, sys.clone()));
        Ok(sys)
    }
}

/// Trains `kind` on `train`, with `val` for x-vector early stopping. The
/// returned exposure lists every segment each component saw.
pub fn train_system(
    kind: SystemKind,
    cfg: &PipelineConfig,
    train: &[&FeatureSegment],
    val: &[&FeatureSegment],
) -> Result<(System, Exposure)> {
    train_system_cached(kind, cfg, train, val, &mut TrainCache::default())
}

/// [`train_system`] reusing components from `cache`, which must only ever
/// see the same `cfg`, `train` and `val`.
pub fn train_system_cached(
    kind: SystemKind,
    cfg: &PipelineConfig,
    train: &[&FeatureSegment],
    val: &[&FeatureSegment],
    cache: &mut TrainCache,
) -> Result<(System, Exposure)> {
    let mut exposure = Exposure::default();
    let model = match kind {
        SystemKind::Gmm => {
            exposure.record_ubm(train);
            Model::Gmm {
                ubm: fit_ubm(kind, cfg, train, None)?,
                relevance: cfg.ubm.relevance,
            }
        }
        SystemKind::IvectorBaseline | SystemKind::Ivector | SystemKind::IvectorConcat => {
            exposure.record_ivector(train);
            Model::Ivector(cache.ivector(kind, cfg, train)?)
        }
        SystemKind::XvectorBaseline | SystemKind::Xvector => {
            exposure.record_xvector(train, val);
            Model::Xvector(cache.xvector(kind, cfg, train, val)?)
        }
        SystemKind::Ix => {
            exposure.record_ivector(train);
            exposure.record_xvector(train, val);
            Model::Ix {
                iv: cache.ivector(kind, cfg, train)?,
                xv: cache.xvector(kind, cfg, train, val)?,
            }
        }
        SystemKind::IvectorScoreFusion => {
            require_segments(train, "per-channel i-vector systems")?;
            exposure.record_ivector(train);
            let subs = (0..train[0].n_channels())
                .map(|c| {
                    let views = channel_views(train, c)?;
                    let refs: Vec<&FeatureSegment> = views.iter().collect();
                    IvectorSystem::train(kind, cfg, &refs, Some(c))
                })
                .collect::<Result<Vec<_>>>()?;
            Model::PerChannel(subs)
        }
    };
    Ok((System { kind, model }, exposure))
}

pub const SYSTEM_FILE: &str = "system.toml";
pub const UBM_FILE: &str = "ubm.gmm";
pub const TV_FILE: &str = "tv.tvm";
pub const NET_FILE: &str = "net.xvec";
pub const LDA_I_FILE: &str = "lda-i.lda";
pub const LDA_X_FILE: &str = "lda-x.lda";

#[derive(Serialize, Deserialize)]
struct SystemHeader {
    kind: String,
    relevance: Option<f64>,
    channels: Option<usize>,
}

/// Directory of the `c`-th sub-system of a per-channel system.
pub fn channel_dir(dir: &Path, c: usize) -> std::path::PathBuf {
    dir.join(format!("ch{c}"))
}

impl System {
    /// LDA-projected embedding of a test segment. Not defined for GMM or
    /// per-channel systems.
    pub fn embed(&self, feat: &FeatureSegment) -> Result<Embedding> {
        match &self.model {
            Model::Ivector(iv) => iv.embed(feat),
            Model::Xvector(xv) => xv.embed(feat),
            Model::Ix { iv, xv } => backend::fuse_ix(&iv.embed(feat)?, &xv.embed(feat)?),
            Model::Gmm { .. } | Model::PerChannel(_) => {
                Err(Error::invalid(format!("system {} has no single segment embedding", self.kind)))
            }
        }
    }

    pub fn enroll(&self, segs: &[&FeatureSegment], mode: EnrollMode) -> Result<Enrollment> {
        let groups = by_subject(segs);
        if groups.len() < 2 {
            return Err(Error::Protocol(format!("enrollment found {} subject(s); at least 2 are needed", groups.len())));
        }
        let groups: Vec<(String, Vec<&FeatureSegment>)> = groups.into_iter().collect();
        let per_subject = |(subject, fs): &(String, Vec<&FeatureSegment>)| -> Result<Vec<Embedding>> {
            let reference = match &self.model {
                Model::Gmm { ubm, relevance } => {
                    let frames = fs.iter().flat_map(|f| f.frames());
                    let m = gmm::map_adapt(ubm, subject, frames, *relevance)?;
                    Embedding::new(EmbeddingKind::Gmm, crate::dataio::Labels::new(subject, "", ""), 0, m.means)?
                }
                Model::Ivector(iv) => iv.reference(fs, mode)?,
                Model::Xvector(_) | Model::Ix { .. } => {
                    let embs = fs.iter().map(|f| self.embed(f)).collect::<Result<Vec<_>>>()?;
                    backend::enroll(&embs)?
                }
                Model::PerChannel(subs) => {
                    return subs
                        .iter()
                        .enumerate()
                        .map(|(c, iv)| {
                            let views = channel_views(fs, c)?;
                            let refs: Vec<&FeatureSegment> = views.iter().collect();
                            let mut e = iv.reference(&refs, mode)?;
                            e.index = c;
                            Ok(e)
                        })
                        .collect();
                }
            };
            Ok(vec![reference])
        };
        let refs: Vec<Vec<Embedding>> = groups.par_iter().map(per_subject).collect::<Result<_>>()?;
        Ok(Enrollment {
            references: refs.into_iter().flatten().collect(),
        })
    }

    /// Scores every test segment against every enrolled subject.
    pub fn score(&self, enrollment: &Enrollment, tests: &[&FeatureSegment]) -> Result<ScoreTable> {
        let (subjects, rows) = self.score_rows(enrollment, tests)?;
        let mut table = ScoreTable::new(subjects);
        for (f, row) in tests.iter().zip(rows) {
            table.push(f.labels.clone(), f.index, row)?;
        }
        Ok(table)
    }

    /// Enrolled subjects (sorted) and one score row per segment, in that
    /// column order. Segment labels are not consulted.
    pub fn score_rows(&self, enrollment: &Enrollment, tests: &[&FeatureSegment]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let subjects = enrollment.subjects();
        let expected_kind = match &self.model {
            Model::Gmm { .. } => EmbeddingKind::Gmm,
            Model::Ivector(_) | Model::PerChannel(_) => EmbeddingKind::IVector,
            Model::Xvector(_) => EmbeddingKind::XVector,
            Model::Ix { .. } => EmbeddingKind::IxVector,
        };
        if let Some(e) = enrollment.references.iter().find(|e| e.kind != expected_kind) {
            return Err(Error::mismatch(format!(
                "system {} cannot score {} references (subject {})",
                self.kind, e.kind, e.labels.subject_id
            )));
        }
        // references[channel][subject column]
        let n_parts = match &self.model {
            Model::PerChannel(subs) => subs.len(),
            _ => 1,
        };
        let mut table_refs: Vec<Vec<Option<&Embedding>>> = vec![vec![None; subjects.len()]; n_parts];
        for e in &enrollment.references {
            let part = if n_parts > 1 { e.index } else { 0 };
            let col = subjects.binary_search(&e.labels.subject_id).expect("subject listed");
            let slot = table_refs
                .get_mut(part)
                .ok_or_else(|| Error::mismatch(format!("reference for channel {part} but the system has {n_parts}")))?;
            if slot[col].replace(e).is_some() {
                return Err(Error::invalid(format!("subject {} enrolled twice", e.labels.subject_id)));
            }
        }
        let table_refs: Vec<Vec<&Embedding>> = table_refs
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .zip(&subjects)
                    .map(|(e, s)| e.ok_or_else(|| Error::invalid(format!("subject {s} lacks a reference for some channel"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let cosines = |refs: &[&Embedding], e: &Embedding| -> Result<Vec<f64>> {
            refs.iter().map(|r| backend::cosine_score(&r.v, &e.v)).collect()
        };
        let adapted: Vec<AdaptedModel> = match &self.model {
            Model::Gmm { ubm, .. } => table_refs[0]
                .iter()
                .map(|r| AdaptedModel {
                    subject_id: r.labels.subject_id.clone(),
                    means: r.v.clone(),
                    ubm_fingerprint: ubm.fingerprint(),
                })
                .collect(),
            _ => Vec::new(),
        };
        let rows: Vec<Vec<f64>> = tests
            .par_iter()
            .map(|f| match &self.model {
                Model::Gmm { ubm, .. } => adapted.iter().map(|m| gmm::llr_score(ubm, m, f)).collect(),
                Model::PerChannel(subs) => {
                    let per_channel = subs
                        .iter()
                        .enumerate()
                        .map(|(c, iv)| cosines(&table_refs[c], &iv.embed(&f.select_channels(&[c])?)?))
                        .collect::<Result<Vec<_>>>()?;
                    ivector::variant_score_fusion(&per_channel)
                }
                _ => cosines(&table_refs[0], &self.embed(f)?),
            })
            .collect::<Result<_>>()?;
        Ok((subjects, rows))
    }

    /// Writes the component artifacts of this system into `dir`.
    pub fn save(&self, dir: &Path, prov: &Provenance) -> Result<()> {
        let mut header = SystemHeader {
            kind: self.kind.name().to_string(),
            relevance: None,
            channels: None,
        };
        match &self.model {
            Model::Gmm { ubm, relevance } => {
                header.relevance = Some(*relevance);
                ubm.save(&dir.join(UBM_FILE))?;
            }
            Model::Ivector(iv) => iv.save(dir)?,
            Model::Xvector(xv) => xv.save(dir)?,
            Model::Ix { iv, xv } => {
                iv.save(dir)?;
                xv.save(dir)?;
            }
            Model::PerChannel(subs) => {
                header.channels = Some(subs.len());
                for (c, iv) in subs.iter().enumerate() {
                    iv.save(&channel_dir(dir, c))?;
                }
            }
        }
        write_header(dir, &header, prov)
    }

    /// Loads a system directory. The config supplies the statistics layout of
    /// i-vector systems; artifacts are cross-checked against each other.
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<(Self, Provenance)> {
        let (header, prov) = read_header(dir)?;
        let kind: SystemKind = header.kind.parse()?;
        let model = match kind {
            SystemKind::Gmm => Model::Gmm {
                ubm: Ubm::load(&dir.join(UBM_FILE))?,
                relevance: header.relevance.unwrap_or(cfg.ubm.relevance),
            },
            SystemKind::IvectorBaseline | SystemKind::Ivector | SystemKind::IvectorConcat => {
                Model::Ivector(IvectorSystem::load(kind, cfg, dir)?)
            }
            SystemKind::XvectorBaseline | SystemKind::Xvector => Model::Xvector(XvectorSystem::load(dir)?),
            SystemKind::Ix => Model::Ix {
                iv: IvectorSystem::load(kind, cfg, dir)?,
                xv: XvectorSystem::load(dir)?,
            },
            SystemKind::IvectorScoreFusion => {
                let n = header
                    .channels
                    .ok_or_else(|| Error::artifact(dir.join(SYSTEM_FILE), "per-channel system without a channel count"))?;
                Model::PerChannel((0..n).map(|c| IvectorSystem::load(kind, cfg, &channel_dir(dir, c))).collect::<Result<_>>()?)
            }
        };
        Ok((System { kind, model }, prov))
    }
}

fn write_header(dir: &Path, header: &SystemHeader, prov: &Provenance) -> Result<()> {
    let text = toml::to_string(header).map_err(|e| Error::Config(e.to_string()))?;
    codec::write_text_with(&dir.join(SYSTEM_FILE), prov, text.as_bytes())
}

fn read_header(dir: &Path) -> Result<(SystemHeader, Provenance)> {
    let path = dir.join(SYSTEM_FILE);
    let (prov, body) = codec::read_text_with(&path)?;
    let text = String::from_utf8(body).map_err(|_| Error::artifact(&path, "not UTF-8"))?;
    let header = toml::from_str(&text).map_err(|e| Error::artifact(&path, e.to_string()))?;
    Ok((header, prov))
}

/// Records `kind` in `dir` so that staged training can fill in components.
pub fn init_system_dir(dir: &Path, kind: SystemKind, cfg: &PipelineConfig, channels: Option<usize>) -> Result<()> {
    let header = SystemHeader {
        kind: kind.name().to_string(),
        relevance: (kind == SystemKind::Gmm).then_some(cfg.ubm.relevance),
        channels: if kind.per_channel() { channels } else { None },
    };
    write_header(dir, &header, &Provenance::new(cfg.hash(), cfg.seed))
}

/// Kind and provenance recorded in a system directory.
pub fn system_dir_kind(dir: &Path) -> Result<(SystemKind, Provenance)> {
    let (header, prov) = read_header(dir)?;
    Ok((header.kind.parse()?, prov))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_names() {
        for k in SystemKind::ALL {
            assert_eq!(k.name().parse::<SystemKind>().unwrap(), k);
        }
        assert_eq!("ixvector".parse::<SystemKind>().unwrap(), SystemKind::Ix);
        assert!("plda".parse::<SystemKind>().is_err());
    }

    #[test]
    fn stage_seeds_differ_by_tag() {
        assert_ne!(stage_seed(1, "ubm"), stage_seed(1, "tmatrix"));
        assert_ne!(stage_seed(1, "ubm"), stage_seed(2, "ubm"));
        assert_eq!(stage_seed(5, "x"), stage_seed(5, "x"));
    }
}
