//! Closed-set identification metrics, reports and the experimental protocols.

mod protocol;

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{self, Provenance};
use crate::dataio::Labels;
use crate::error::{Error, Result};

pub use protocol::{
    build_pools, check_hygiene, held_out_subjects, recording_features, run_protocol, Case, ConditionResult, Corpus,
    Exposure, HygieneRecord, Holdout, Pools, Protocol, ProtocolRun, SegmentKey,
};

/// Test segments (rows) scored against enrolled subjects (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub subjects: Vec<String>,
    pub rows: Vec<Labels>,
    pub indices: Vec<usize>,
    /// Column of each row's true subject.
    pub truth: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(subjects: Vec<String>) -> Self {
        ScoreTable {
            subjects,
            rows: Vec::new(),
            indices: Vec::new(),
            truth: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn push(&mut self, labels: Labels, index: usize, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.subjects.len() {
            return Err(Error::invalid(format!(
                "score row has {} entries for {} subjects",
                scores.len(),
                self.subjects.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite score for {:?}", labels)));
        }
        let truth = self
            .subjects
            .iter()
            .position(|s| *s == labels.subject_id)
            .ok_or_else(|| Error::invalid(format!("test subject {} is not enrolled", labels.subject_id)))?;
        self.rows.push(labels);
        self.indices.push(index);
        self.truth.push(truth);
        self.scores.push(scores);
        Ok(())
    }

    /// Appends another table over the same subjects.
    pub fn extend(&mut self, other: ScoreTable) -> Result<()> {
        if other.subjects != self.subjects {
            return Err(Error::mismatch("score tables enroll different subjects"));
        }
        self.rows.extend(other.rows);
        self.indices.extend(other.indices);
        self.truth.extend(other.truth);
        self.scores.extend(other.scores);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn save_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["subject_id".to_string(), "session_id".into(), "task_id".into(), "index".into()];
        header.extend(self.subjects.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let l = &self.rows[i];
            let mut rec = vec![l.subject_id.clone(), l.session_id.clone(), l.task_id.clone(), self.indices[i].to_string()];
            rec.extend(self.scores[i].iter().map(|s| format!("{s:?}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        codec::write_text_with(path, prov, &bytes)
    }

    pub fn load_csv(path: &Path) -> Result<(Self, Provenance)> {
        let (prov, body) = codec::read_text_with(path)?;
        let mut rdr = csv::Reader::from_reader(body.as_slice());
        let header = rdr.headers()?.clone();
        if header.len() < 5 || header.iter().take(4).ne(["subject_id", "session_id", "task_id", "index"]) {
            return Err(Error::artifact(path, "not a score table (bad header)"));
        }
        let mut table = ScoreTable::new(header.iter().skip(4).map(String::from).collect());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 3,
                msg,
            };
            let index = rec[3].parse().map_err(|_| bad(format!("bad index `{}`", &rec[3])))?;
            let scores = rec
                .iter()
                .skip(4)
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad score `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            table
                .push(Labels::new(&rec[0], &rec[1], &rec[2]), index, scores)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok((table, prov))
    }
}

/// Fraction of rows whose top-scoring column is the true subject. Ties go to
/// the lowest column index.
pub fn rank1_accuracy(table: &ScoreTable) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::invalid("accuracy of an empty score table"));
    }
    let correct = table
        .scores
        .iter()
        .zip(&table.truth)
        .filter(|(row, truth)| argmax(row) == **truth)
        .count();
    Ok(correct as f64 / table.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, s) in row.iter().enumerate() {
        if *s > row[best] {
            best = j;
        }
    }
    best
}

/// Target and non-target scores of a table.
pub fn split_scores(table: &ScoreTable) -> (Vec<f64>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (row, &truth) in table.scores.iter().zip(&table.truth) {
        for (j, &s) in row.iter().enumerate() {
            if j == truth {
                targets.push(s);
            } else {
                nontargets.push(s);
            }
        }
    }
    (targets, nontargets)
}

/// Equal error rate over every (segment, subject) score.
pub fn eer(table: &ScoreTable) -> Result<f64> {
    let (t, n) = split_scores(table);
    eer_from_scores(&t, &n)
}

/// Equal error rate from target and non-target scores.
///
/// Thresholds are every distinct score plus +inf, with
/// `FAR(θ) = #{non-target ≥ θ} / n` and `FRR(θ) = #{target < θ} / n`. The
/// result is linearly interpolated between the two adjacent thresholds where
/// `FAR - FRR` changes sign.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid("EER needs at least one target and one non-target score"));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::invalid("EER scores must be finite"));
    }
    let mut all: Vec<(f64, bool)> = targets.iter().map(|&s| (s, true)).chain(nontargets.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;

    // Walk thresholds upwards; before threshold all[i].0, everything below it
    // has been counted.
    let mut below_t = 0usize;
    let mut below_n = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let (far, frr) = ((nn - below_n as f64) / nn, below_t as f64 / nt);
        if let Some(crossed) = crossing(prev, (far, frr)) {
            return Ok(crossed);
        }
        prev = Some((far, frr));
        if i == all.len() {
            break;
        }
        let value = all[i].0;
        while i < all.len() && all[i].0 == value {
            if all[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    unreachable!("FAR - FRR ends at -1, so a crossing always exists")
}

/// EER if the FAR/FRR curves meet at or before `cur`.
fn crossing(prev: Option<(f64, f64)>, cur: (f64, f64)) -> Option<f64> {
    let d = cur.0 - cur.1;
    if d == 0.0 {
        return Some(cur.0);
    }
    if d > 0.0 {
        return None;
    }
    let (pf, pr) = prev?;
    let dp = pf - pr;
    let a = dp / (dp - d);
    Some(pf + a * (cur.0 - pf))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub system: String,
    pub rank1_accuracy: f64,
    pub eer: f64,
    pub n_trials: usize,
    pub n_subjects: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_table(protocol: &str, system: &str, table: &ScoreTable, seed: u64) -> Result<Self> {
        Ok(EvalReport {
            protocol: protocol.into(),
            system: system.into(),
            rank1_accuracy: rank1_accuracy(table)?,
            eer: eer(table)?,
            n_trials: table.len(),
            n_subjects: table.subjects.len(),
            seed,
        })
    }
}

pub fn format_reports(reports: &[EvalReport]) -> String {
    let pw = reports.iter().map(|r| r.protocol.len()).max().unwrap_or(0).max(8);
    let sw = reports.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<pw$}  {:<sw$}  {:>8}  {:>7}  {:>6}  {:>8}", "protocol", "system", "accuracy", "EER", "trials", "subjects");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<pw$}  {:<sw$}  {:>7.2}%  {:>6.2}%  {:>6}  {:>8}",
            r.protocol,
            r.system,
            100.0 * r.rank1_accuracy,
            100.0 * r.eer,
            r.n_trials,
            r.n_subjects
        );
    }
    out
}

pub fn reports_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["protocol", "system", "accuracy", "eer", "n_trials", "seed"])?;
    for r in reports {
        w.write_record([
            r.protocol.clone(),
            r.system.clone(),
            format!("{:.6}", r.rank1_accuracy),
            format!("{:.6}", r.eer),
            r.n_trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
