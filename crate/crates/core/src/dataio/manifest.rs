use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["subject_id", "session_id", "task_id", "path"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub session_id: String,
    pub task_id: String,
    pub path: PathBuf,
}

/// Which split a whole session feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionRole {
    Train,
    Validation,
    Test,
    /// In each recording of the session, the leading 20% of segments
    /// validate and the rest test.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl SessionRole {
    /// Split of the `position`-th of `total` segments of a session in this role.
    pub fn split_for(self, position: usize, total: usize) -> Split {
        match self {
            SessionRole::Train => Split::Train,
            SessionRole::Validation => Split::Validation,
            SessionRole::Test => Split::Test,
            SessionRole::Shared => {
                if position < round_half_up(total, 2) {
                    Split::Validation
                } else {
                    Split::Test
                }
            }
        }
    }
}

/// `round(n * tenths / 10)` with halves rounded up, in exact integer arithmetic.
fn round_half_up(n: usize, tenths: usize) -> usize {
    (n * tenths + 5) / 10
}

/// Rows listing which recording file holds which (subject, session, task).
///
/// Sessions are taken to be chronological in the order they first appear for
/// each subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            rows,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert((&row.subject_id, &row.session_id, &row.path)) {
                return Err(Error::invalid(format!(
                    "duplicate manifest row: subject {} session {} path {}",
                    row.subject_id,
                    row.session_id,
                    row.path.display()
                )));
            }
        }
        for subject in self.subjects() {
            let n = self.sessions_of(&subject).len();
            if n < 2 {
                return Err(Error::invalid(format!(
                    "subject {subject} has {n} session(s); at least 2 are required for session-disjoint splits"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::artifact(path, format!("cannot open manifest: {e}")))?;
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).ne(HEADER) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("header must be `{}`", HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Parse {
                path: path.into(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != 4 || record.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!("expected 4 non-empty fields, got {:?}", record.iter().collect::<Vec<_>>()),
                });
            }
            rows.push(ManifestRow {
                subject_id: record[0].trim().to_string(),
                session_id: record[1].trim().to_string(),
                task_id: record[2].trim().to_string(),
                path: PathBuf::from(record[3].trim()),
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(rows, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.as_str(),
                r.session_id.as_str(),
                r.task_id.as_str(),
                &r.path.to_string_lossy(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::codec::write_file(path, &bytes)
    }

    /// Re-anchors relative row paths at `dir`.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    /// Location of a row's recording, relative paths resolved against the
    /// manifest's directory.
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// Subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.subject_id) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    /// Sessions of `subject`, chronologically.
    pub fn sessions_of(&self, subject: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.rows.iter().filter(|r| r.subject_id == subject) {
            if !out.contains(&r.session_id) {
                out.push(r.session_id.clone());
            }
        }
        out
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.task_id) {
                out.push(r.task_id.clone());
            }
        }
        out
    }

    /// Assigns every (subject, session) a role.
    ///
    /// The first 60% of each subject's sessions (half rounded up) train. Of
    /// the rest, 20% (rounded the same way) validate when that leaves at least
    /// one whole test session; otherwise every remaining session is
    /// [`SessionRole::Shared`] and validation is carved out by segment count.
    pub fn session_roles(&self) -> BTreeMap<(String, String), SessionRole> {
        let mut roles = BTreeMap::new();
        for subject in self.subjects() {
            let sessions = self.sessions_of(&subject);
            let n = sessions.len();
            let n_train = round_half_up(n, 6).clamp(1, n - 1);
            let rest = n - n_train;
            let n_val = round_half_up(rest, 2);
            let by_session = n_val >= 1 && rest - n_val >= 1;
            for (i, session) in sessions.into_iter().enumerate() {
                let role = if i < n_train {
                    SessionRole::Train
                } else if !by_session {
                    SessionRole::Shared
                } else if i < n_train + n_val {
                    SessionRole::Validation
                } else {
                    SessionRole::Test
                };
                roles.insert((subject.clone(), session), role);
            }
        }
        roles
    }
}
