//! Train/enroll/test orchestration for the experimental protocols, with
//! bookkeeping of which segments every trained component saw.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EvalReport, ScoreTable};
use crate::config::{resolve_channels, PipelineConfig};
use crate::dataio::{segment_recording_from, Labels, Manifest, Recording, SessionRole, Split};
use crate::error::{Error, Result};
use crate::features::{compute_psd_with, FeatureSegment, PsdPlan};
use crate::systems::{stage_seed, train_system_cached, SystemKind, TrainCache};

/// A segment identified by its recording and time span in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentKey {
    pub labels: Labels,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl SegmentKey {
    pub fn of(f: &FeatureSegment) -> Self {
        SegmentKey {
            labels: f.labels.clone(),
            start_ms: (f.span_s.0 * 1000.0).round() as u64,
            end_ms: (f.span_s.1 * 1000.0).round() as u64,
        }
    }

    fn overlaps(&self, other: &SegmentKey) -> bool {
        self.labels == other.labels && self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }
}

/// Segments seen by each trained component of a system.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exposure {
    pub ubm: BTreeSet<SegmentKey>,
    pub tmatrix: BTreeSet<SegmentKey>,
    pub xvector: BTreeSet<SegmentKey>,
    pub lda: BTreeSet<SegmentKey>,
}

fn keys<'a>(segs: &'a [&'a FeatureSegment]) -> impl Iterator<Item = SegmentKey> + 'a {
    segs.iter().map(|f| SegmentKey::of(f))
}

impl Exposure {
    pub fn record_ubm(&mut self, segs: &[&FeatureSegment]) {
        self.ubm.extend(keys(segs));
    }

    /// UBM, T matrix and LDA all see the training segments.
    pub fn record_ivector(&mut self, segs: &[&FeatureSegment]) {
        self.ubm.extend(keys(segs));
        self.tmatrix.extend(keys(segs));
        self.lda.extend(keys(segs));
    }

    /// The network also sees the validation segments through early stopping.
    pub fn record_xvector(&mut self, train: &[&FeatureSegment], val: &[&FeatureSegment]) {
        self.xvector.extend(keys(train).chain(keys(val)));
        self.lda.extend(keys(train));
    }

    pub fn merge(&mut self, other: &Exposure) {
        self.ubm.extend(other.ubm.iter().cloned());
        self.tmatrix.extend(other.tmatrix.iter().cloned());
        self.xvector.extend(other.xvector.iter().cloned());
        self.lda.extend(other.lda.iter().cloned());
    }

    pub fn components(&self) -> [(&'static str, &BTreeSet<SegmentKey>); 4] {
        [("UBM", &self.ubm), ("T matrix", &self.tmatrix), ("x-vector network", &self.xvector), ("LDA", &self.lda)]
    }

    pub fn is_empty(&self) -> bool {
        self.components().iter().all(|(_, s)| s.is_empty())
    }
}

/// What a protocol withholds from subspace training beyond the test segments.
#[derive(Debug, Clone, PartialEq)]
pub enum Holdout {
    None,
    Task(String),
    Subjects(BTreeSet<String>),
}

/// Fails if any component saw a test segment (overlapping span of the same
/// recording) or anything the holdout withholds.
pub fn check_hygiene(exposure: &Exposure, tests: &[SegmentKey], holdout: &Holdout) -> Result<()> {
    for (component, seen) in exposure.components() {
        for key in seen {
            let withheld = match holdout {
                Holdout::None => false,
                Holdout::Task(t) => key.labels.task_id == *t,
                Holdout::Subjects(s) => s.contains(&key.labels.subject_id),
            };
            if withheld {
                return Err(Error::Hygiene(format!(
                    "{component} training saw {:?} [{}, {}) ms, which the protocol withholds ({holdout:?})",
                    key.labels, key.start_ms, key.end_ms
                )));
            }
        }
        // Both sets are sorted by labels first; scan each test key's recording range.
        for t in tests {
            let lo = SegmentKey {
                labels: t.labels.clone(),
                start_ms: 0,
                end_ms: 0,
            };
            if let Some(k) = seen.range(lo..).take_while(|k| k.labels == t.labels).find(|k| k.overlaps(t)) {
                return Err(Error::Hygiene(format!(
                    "{component} training saw [{}, {}) ms of test recording {:?}, overlapping test span [{}, {}) ms",
                    k.start_ms, k.end_ms, t.labels, t.start_ms, t.end_ms
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Case {
    /// Subspace trained on everything outside the test segments.
    One,
    /// Subspace also blind to the held-out task or subjects.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    SessionDisjoint,
    LeaveTaskOut(Case),
    LeaveSubjectOut(Case),
    ChannelSubsets,
    SegmentLength,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::SessionDisjoint,
        Protocol::LeaveTaskOut(Case::One),
        Protocol::LeaveTaskOut(Case::Two),
        Protocol::LeaveSubjectOut(Case::One),
        Protocol::LeaveSubjectOut(Case::Two),
        Protocol::ChannelSubsets,
        Protocol::SegmentLength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::SessionDisjoint => "session-disjoint",
            Protocol::LeaveTaskOut(Case::One) => "leave-task-out-1",
            Protocol::LeaveTaskOut(Case::Two) => "leave-task-out-2",
            Protocol::LeaveSubjectOut(Case::One) => "leave-subject-out-1",
            Protocol::LeaveSubjectOut(Case::Two) => "leave-subject-out-2",
            Protocol::ChannelSubsets => "channel-subsets",
            Protocol::SegmentLength => "segment-length",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Protocol::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Protocol::ALL.iter().map(|p| p.name()).collect();
            Error::invalid(format!("unknown protocol `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Recordings with the session role of each.
pub struct Corpus<'a> {
    pub recordings: &'a [Recording],
    roles: BTreeMap<(String, String), SessionRole>,
}

impl<'a> Corpus<'a> {
    pub fn new(recordings: &'a [Recording], manifest: &Manifest) -> Result<Self> {
        let roles = manifest.session_roles();
        for r in recordings {
            let key = (r.labels.subject_id.clone(), r.labels.session_id.clone());
            if !roles.contains_key(&key) {
                return Err(Error::Protocol(format!("recording {:?} is not listed in the manifest", r.labels)));
            }
        }
        if recordings.is_empty() {
            return Err(Error::Protocol("corpus has no recordings".into()));
        }
        Ok(Corpus { recordings, roles })
    }

    pub fn role(&self, labels: &Labels) -> SessionRole {
        self.roles[&(labels.subject_id.clone(), labels.session_id.clone())]
    }
}

/// Feature segments of `rec` tiling `[start_s, end)` at `duration_s`, with
/// every recording channel kept.
pub fn recording_features(rec: &Recording, cfg: &PipelineConfig, start_s: f64, duration_s: f64) -> Result<Vec<FeatureSegment>> {
    let f = &cfg.features;
    if rec.n_channels() != f.montage.len() {
        return Err(Error::Config(format!(
            "recording {:?} has {} channels but the montage names {}",
            rec.labels,
            rec.n_channels(),
            f.montage.len()
        )));
    }
    let band = (f.band_hz[0], f.band_hz[1]);
    let plan = PsdPlan::new(rec.sample_rate_hz, f.frame_len_ms, band)?;
    segment_recording_from(rec, start_s, duration_s)?
        .iter()
        .map(|s| compute_psd_with(&plan, s, f.frame_len_ms, band))
        .collect()
}

/// Features of every split, all montage channels, before channel selection.
pub struct Pools {
    pub train: Vec<FeatureSegment>,
    pub val: Vec<FeatureSegment>,
    /// Test segments at each requested length.
    pub test: Vec<(f64, Vec<FeatureSegment>)>,
}

/// Cuts every recording at the configured length, assigns the segments to
/// splits by session role, and re-cuts each test region at `test_lengths`.
/// In a shared session the test region starts after the validation segments.
pub fn build_pools(corpus: &Corpus<'_>, cfg: &PipelineConfig, test_lengths: &[f64]) -> Result<Pools> {
    let base = cfg.features.segment_s;
    let per_rec: Vec<(Vec<FeatureSegment>, Vec<FeatureSegment>, Vec<Vec<FeatureSegment>>)> = corpus
        .recordings
        .par_iter()
        .map(|rec| {
            let role = corpus.role(&rec.labels);
            let segs = recording_features(rec, cfg, 0.0, base)?;
            let n = segs.len();
            let (mut train, mut val) = (Vec::new(), Vec::new());
            let mut test_start = None;
            for (i, s) in segs.into_iter().enumerate() {
                match role.split_for(i, n) {
                    Split::Train => train.push(s),
                    Split::Validation => val.push(s),
                    Split::Test => {
                        test_start.get_or_insert(i as f64 * base);
                    }
                }
            }
            let tests = match test_start {
                Some(start) => test_lengths
                    .iter()
                    .map(|&len| recording_features(rec, cfg, start, len))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![Vec::new(); test_lengths.len()],
            };
            Ok((train, val, tests))
        })
        .collect::<Result<_>>()?;
    let mut pools = Pools {
        train: Vec::new(),
        val: Vec::new(),
        test: test_lengths.iter().map(|&l| (l, Vec::new())).collect(),
    };
    for (train, val, tests) in per_rec {
        pools.train.extend(train);
        pools.val.extend(val);
        for (slot, t) in pools.test.iter_mut().zip(tests) {
            slot.1.extend(t);
        }
    }
    if pools.train.is_empty() {
        return Err(Error::Protocol("no training segments: recordings may be shorter than one segment".into()));
    }
    Ok(pools)
}

fn select(segs: &[FeatureSegment], channels: &[usize], standardize: bool) -> Result<Vec<FeatureSegment>> {
    segs.par_iter()
        .map(|f| {
            let v = f.select_channels(channels)?;
            Ok(if standardize { v.standardized() } else { v })
        })
        .collect()
}

/// Scores of one system in one protocol condition.
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub condition: String,
    pub system: SystemKind,
    pub table: ScoreTable,
    /// One entry per trained fold, each already checked.
    pub hygiene: Vec<HygieneRecord>,
}

#[derive(Debug, Clone)]
pub struct HygieneRecord {
    pub exposure: Exposure,
    pub tests: Vec<SegmentKey>,
    pub holdout: Holdout,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub protocol: Protocol,
    pub reports: Vec<EvalReport>,
    pub results: Vec<ConditionResult>,
}

struct Fold<'a> {
    train: Vec<&'a FeatureSegment>,
    val: Vec<&'a FeatureSegment>,
    enroll: Vec<&'a FeatureSegment>,
    /// Test sets, each labelled with its condition.
    tests: Vec<(String, Vec<&'a FeatureSegment>)>,
    holdout: Holdout,
}

/// Trains every system on the fold, checks hygiene, enrolls and scores each
/// test set. Returns (condition, system, table, record) tuples.
fn run_fold(
    fold: &Fold<'_>,
    systems: &[SystemKind],
    cfg: &PipelineConfig,
) -> Result<Vec<(String, SystemKind, ScoreTable, HygieneRecord)>> {
    let mut cache = TrainCache::default();
    let mut out = Vec::new();
    let test_keys: Vec<SegmentKey> = {
        let mut k: Vec<SegmentKey> = fold.tests.iter().flat_map(|(_, t)| t.iter().map(|f| SegmentKey::of(f))).collect();
        k.sort();
        k.dedup();
        k
    };
    for &kind in systems {
        let (system, exposure) = train_system_cached(kind, cfg, &fold.train, &fold.val, &mut cache)?;
        check_hygiene(&exposure, &test_keys, &fold.holdout)?;
        let enrollment = system.enroll(&fold.enroll, cfg.ivector.enroll)?;
        let record = HygieneRecord {
            exposure,
            tests: test_keys.clone(),
            holdout: fold.holdout.clone(),
        };
        for (condition, tests) in &fold.tests {
            if tests.is_empty() {
                return Err(Error::Protocol(format!("no test segments for condition {condition}")));
            }
            let table = system.score(&enrollment, tests)?;
            out.push((condition.clone(), kind, table, record.clone()));
        }
        log::info!("{kind}: scored {} test set(s)", fold.tests.len());
    }
    Ok(out)
}

fn refs(segs: &[FeatureSegment]) -> Vec<&FeatureSegment> {
    segs.iter().collect()
}

fn channel_label(names: &[String]) -> String {
    format!("channels={}", names.join("+"))
}

/// Subjects withheld by the leave-subject-out protocols: a seeded choice of
/// round(fraction · S), at least 2, leaving at least 2 to train on.
pub fn held_out_subjects(subjects: &[String], fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    let s = subjects.len();
    let n = ((fraction * s as f64).round() as usize).max(2);
    if s < n + 2 {
        return Err(Error::Protocol(format!(
            "leave-subject-out needs at least {} subjects to hold out {n} and train on 2, corpus has {s}",
            n + 2
        )));
    }
    let mut sorted = subjects.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "held-out-subjects"));
    sorted.shuffle(&mut rng);
    Ok(sorted.into_iter().take(n).collect())
}

/// Runs `protocol` for every system in `systems`, producing one report per
/// (condition, system).
pub fn run_protocol(protocol: Protocol, systems: &[SystemKind], corpus: &Corpus<'_>, cfg: &PipelineConfig) -> Result<ProtocolRun> {
    cfg.validate()?;
    if systems.is_empty() {
        return Err(Error::invalid("no systems to run"));
    }
    let base = cfg.features.segment_s;
    let lengths: Vec<f64> = match protocol {
        Protocol::SegmentLength => cfg.protocol.test_lengths_s.clone(),
        _ => vec![base],
    };
    if lengths.is_empty() {
        return Err(Error::Config("protocol.test_lengths_s is empty".into()));
    }
    let pools = build_pools(corpus, cfg, &lengths)?;
    let std = cfg.features.standardize;
    let montage = &cfg.features.montage;

    // Channel selections: the configured one, or each configured subset.
    let selections: Vec<(String, Vec<usize>)> = match protocol {
        Protocol::ChannelSubsets => cfg
            .protocol
            .channel_subsets
            .iter()
            .map(|names| Ok((channel_label(names), resolve_channels(montage, names)?)))
            .collect::<Result<_>>()?,
        _ => vec![(String::new(), cfg.features.channel_indices()?)],
    };

    let mut rows = Vec::new();
    for (sel_label, channels) in &selections {
        let train = select(&pools.train, channels, std)?;
        let val = select(&pools.val, channels, std)?;
        let tests: Vec<(f64, Vec<FeatureSegment>)> = pools
            .test
            .iter()
            .map(|(l, t)| Ok((*l, select(t, channels, std)?)))
            .collect::<Result<_>>()?;
        let test_base = &tests[0].1;

        match protocol {
            Protocol::SessionDisjoint | Protocol::ChannelSubsets => {
                let label = if sel_label.is_empty() { protocol.name().to_string() } else { sel_label.clone() };
                let fold = Fold {
                    train: refs(&train),
                    val: refs(&val),
                    enroll: refs(&train),
                    tests: vec![(label, refs(test_base))],
                    holdout: Holdout::None,
                };
                rows.extend(run_fold(&fold, systems, cfg)?);
            }
            Protocol::SegmentLength => {
                let fold = Fold {
                    train: refs(&train),
                    val: refs(&val),
                    enroll: refs(&train),
                    tests: tests.iter().map(|(l, t)| (format!("test={l}s"), refs(t))).collect(),
                    holdout: Holdout::None,
                };
                rows.extend(run_fold(&fold, systems, cfg)?);
            }
            Protocol::LeaveTaskOut(case) => {
                let tasks: BTreeSet<&str> = train.iter().chain(test_base).map(|f| f.labels.task_id.as_str()).collect();
                if tasks.len() < 2 {
                    return Err(Error::Protocol(format!(
                        "leave-task-out needs at least 2 tasks, corpus has {}",
                        tasks.len()
                    )));
                }
                for task in tasks {
                    let is_task = |f: &&FeatureSegment| f.labels.task_id == task;
                    let fold = Fold {
                        train: train.iter().filter(|f| case == Case::One || !is_task(f)).collect(),
                        val: val.iter().filter(|f| case == Case::One || !is_task(f)).collect(),
                        enroll: train.iter().filter(|f| !is_task(f)).collect(),
                        tests: vec![(protocol.name().to_string(), test_base.iter().filter(is_task).collect())],
                        holdout: match case {
                            Case::One => Holdout::None,
                            Case::Two => Holdout::Task(task.to_string()),
                        },
                    };
                    log::info!("{protocol}: held-out task {task}");
                    rows.extend(run_fold(&fold, systems, cfg)?);
                }
            }
            Protocol::LeaveSubjectOut(case) => {
                let mut subjects: Vec<String> = train.iter().map(|f| f.labels.subject_id.clone()).collect();
                subjects.sort();
                subjects.dedup();
                let held = held_out_subjects(&subjects, cfg.protocol.held_out_fraction, cfg.seed)?;
                let is_held = |f: &&FeatureSegment| held.contains(&f.labels.subject_id);
                log::info!("{protocol}: held-out subjects {held:?}");
                let fold = Fold {
                    train: train.iter().filter(|f| case == Case::One || !is_held(f)).collect(),
                    val: val.iter().filter(|f| case == Case::One || !is_held(f)).collect(),
                    enroll: train.iter().filter(is_held).collect(),
                    tests: vec![(protocol.name().to_string(), test_base.iter().filter(is_held).collect())],
                    holdout: match case {
                        Case::One => Holdout::None,
                        Case::Two => Holdout::Subjects(held.clone()),
                    },
                };
                rows.extend(run_fold(&fold, systems, cfg)?);
            }
        }
    }

    // Concatenate folds sharing a (condition, system), keeping first-seen order.
    let mut results: Vec<ConditionResult> = Vec::new();
    for (condition, system, table, record) in rows {
        match results.iter_mut().find(|r| r.condition == condition && r.system == system) {
            Some(r) => {
                r.table.extend(table)?;
                r.hygiene.push(record);
            }
            None => results.push(ConditionResult {
                condition,
                system,
                table,
                hygiene: vec![record],
            }),
        }
    }
    let reports = results
        .iter()
        .map(|r| EvalReport::from_table(&r.condition, r.system.name(), &r.table, cfg.seed))
        .collect::<Result<_>>()?;
    Ok(ProtocolRun {
        protocol,
        reports,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(subject: &str, task: &str, start: u64, end: u64) -> SegmentKey {
        SegmentKey {
            labels: Labels::new(subject, "e2", task),
            start_ms: start,
            end_ms: end,
        }
    }

    #[test]
    fn overlapping_test_span_is_a_violation() {
        let mut e = Exposure::default();
        e.xvector.insert(key("s1", "t1", 0, 15_000));
        e.xvector.insert(key("s1", "t1", 15_000, 30_000));
        let clean = [key("s1", "t1", 30_000, 60_000), key("s2", "t1", 0, 15_000)];
        check_hygiene(&e, &clean, &Holdout::None).unwrap();
        let dirty = [key("s1", "t1", 20_000, 50_000)];
        assert!(matches!(check_hygiene(&e, &dirty, &Holdout::None), Err(Error::Hygiene(_))));
    }

    #[test]
    fn withheld_task_or_subject_is_a_violation() {
        let mut e = Exposure::default();
        e.tmatrix.insert(key("s1", "t2", 0, 15_000));
        assert!(check_hygiene(&e, &[], &Holdout::Task("t1".into())).is_ok());
        assert!(matches!(check_hygiene(&e, &[], &Holdout::Task("t2".into())), Err(Error::Hygiene(_))));
        let held: BTreeSet<String> = ["s1".to_string()].into();
        assert!(matches!(check_hygiene(&e, &[], &Holdout::Subjects(held)), Err(Error::Hygiene(_))));
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("leave-one-out".parse::<Protocol>().is_err());
    }

    #[test]
    fn held_out_subjects_are_seeded_and_sized() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = held_out_subjects(&subjects, 0.2, 1).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, held_out_subjects(&subjects, 0.2, 1).unwrap());
        assert!(held_out_subjects(&subjects[..3], 0.2, 1).is_err());
    }
}
