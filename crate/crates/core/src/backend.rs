//! LDA projection, enrollment, cosine scoring and ix-vector fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::codec::{self, Provenance, Reader, Writer};
use crate::dataio::Labels;
use crate::error::{Error, Result};

const LDA_MAGIC: &[u8; 5] = b"LDAX1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbeddingKind {
    IVector,
    XVector,
    IxVector,
    /// MAP-adapted GMM mean supervector.
    Gmm,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::IVector => "ivector",
            EmbeddingKind::XVector => "xvector",
            EmbeddingKind::IxVector => "ixvector",
            EmbeddingKind::Gmm => "gmm",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ivector" => Ok(EmbeddingKind::IVector),
            "xvector" => Ok(EmbeddingKind::XVector),
            "ixvector" => Ok(EmbeddingKind::IxVector),
            "gmm" => Ok(EmbeddingKind::Gmm),
            other => Err(Error::invalid(format!("unknown embedding kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub kind: EmbeddingKind,
    pub labels: Labels,
    /// Segment position within its recording.
    pub index: usize,
    pub v: Vec<f64>,
}

impl Embedding {
    pub fn new(kind: EmbeddingKind, labels: Labels, index: usize, v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "{kind} embedding for {} must be non-empty and finite",
                labels.subject_id
            )));
        }
        Ok(Embedding { kind, labels, index, v })
    }
}

/// Fisher LDA: maps `x` to `Wᵗ (x - mean)`, with `Wᵗ S_w W = I`.
#[derive(Debug, Clone)]
pub struct LdaModel {
    projection: DMatrix<f64>,
    mean: Vec<f64>,
    /// Subjects the projection was fit on.
    pub classes: Vec<String>,
    /// Generalised eigenvalue of each kept direction.
    pub eigenvalues: Vec<f64>,
    pub provenance: Provenance,
}

impl PartialEq for LdaModel {
    fn eq(&self, other: &Self) -> bool {
        self.projection == other.projection && self.mean == other.mean && self.classes == other.classes
    }
}

impl LdaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn project_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::mismatch(format!(
                "LDA expects {}-dimensional input, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centred = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok(self.projection.tr_mul(&centred).as_slice().to_vec())
    }

    pub fn project(&self, e: &Embedding) -> Result<Embedding> {
        Ok(Embedding {
            v: self.project_vec(&e.v)?,
            ..e.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(LDA_MAGIC);
        w.u32(self.input_dim() as u32);
        w.u32(self.output_dim() as u32);
        w.f64s(self.projection.transpose().as_slice());
        w.f64s(&self.mean);
        w.f64s(&self.eigenvalues);
        w.u32(self.classes.len() as u32);
        for c in &self.classes {
            w.str(c);
        }
        self.provenance.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, LDA_MAGIC, origin)?;
        let p = r.u32()? as usize;
        let q = r.u32()? as usize;
        let projection = DMatrix::from_row_slice(p, q, &r.f64s(p * q)?);
        let mean = r.f64s(p)?;
        let eigenvalues = r.f64s(q)?;
        let n = r.u32()? as usize;
        let classes = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let provenance = Provenance::read(&mut r)?;
        r.finish()?;
        Ok(LdaModel {
            projection,
            mean,
            classes,
            eigenvalues,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LdaModel::from_bytes(&codec::read_file(path)?, path)
    }
}

/// Global mean, between-class and within-class scatter (each divided by the
/// sample count), and the sorted class names.
pub fn scatter(data: &[Embedding]) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>, Vec<String>)> {
    let first = data.first().ok_or_else(|| Error::invalid("LDA needs training embeddings"))?;
    let p = first.v.len();
    if data.iter().any(|e| e.v.len() != p) {
        return Err(Error::invalid("LDA training embeddings differ in length"));
    }
    let mut groups: BTreeMap<&str, Vec<&Embedding>> = BTreeMap::new();
    for e in data {
        groups.entry(e.labels.subject_id.as_str()).or_default().push(e);
    }
    let n = data.len() as f64;
    let mean = data.iter().fold(DVector::zeros(p), |acc, e| acc + DVector::from_column_slice(&e.v)) / n;
    let mut sb = DMatrix::zeros(p, p);
    let mut sw = DMatrix::zeros(p, p);
    for members in groups.values() {
        let mk = members.iter().fold(DVector::zeros(p), |acc, e| acc + DVector::from_column_slice(&e.v))
            / members.len() as f64;
        let diff = &mk - &mean;
        sb.ger(members.len() as f64 / n, &diff, &diff, 1.0);
        for e in members {
            let dev = DVector::from_column_slice(&e.v) - &mk;
            sw.ger(1.0 / n, &dev, &dev, 1.0);
        }
    }
    let classes = groups.keys().map(|s| s.to_string()).collect();
    Ok((mean, sb, sw, classes))
}

/// Regularised within-class scatter: `S_w + 1e-6 · tr(S_w)/p · I`.
pub fn regularized(sw: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sw.nrows();
    let tr = sw.trace();
    let eps = if tr > 0.0 { 1e-6 * tr / p as f64 } else { 1e-6 };
    sw + DMatrix::identity(p, p) * eps
}

/// Fits LDA with `q` output directions (default `min(p, S-1)`).
pub fn fit_lda(data: &[Embedding], q: Option<usize>) -> Result<LdaModel> {
    let (mean, sb, sw, classes) = scatter(data)?;
    let p = mean.len();
    let s = classes.len();
    if s < 2 {
        return Err(Error::invalid("LDA needs at least 2 classes"));
    }
    let q = q.unwrap_or(p.min(s - 1));
    if q == 0 || q > s - 1 || q > p {
        return Err(Error::invalid(format!(
            "LDA can keep at most min(p={p}, S-1={}) directions, {q} requested",
            s - 1
        )));
    }
    let chol = regularized(&sw)
        .cholesky()
        .ok_or_else(|| Error::Numerical("within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    // M = L⁻¹ S_b L⁻ᵗ
    let linv_sb = l.solve_lower_triangular(&sb).expect("triangular factor is invertible");
    let m = l
        .solve_lower_triangular(&linv_sb.transpose())
        .expect("triangular factor is invertible");
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v = DMatrix::zeros(p, q);
    for (j, &i) in order.iter().take(q).enumerate() {
        v.set_column(j, &eig.eigenvectors.column(i));
    }
    // W = L⁻ᵗ V
    let mut w = l.transpose().solve_upper_triangular(&v).expect("triangular factor is invertible");
    orient_columns(&mut w, data, &mean, &classes);
    Ok(LdaModel {
        projection: w,
        mean: mean.as_slice().to_vec(),
        classes,
        eigenvalues: order.iter().take(q).map(|&i| eig.eigenvalues[i]).collect(),
        provenance: Provenance::default(),
    })
}

/// Fixes each column's sign so that the largest-magnitude projected class mean
/// is positive. This depends only on the data, not on the eigen-solver.
pub fn orient_columns(w: &mut DMatrix<f64>, data: &[Embedding], mean: &DVector<f64>, classes: &[String]) {
    let p = mean.len();
    let class_means: Vec<DVector<f64>> = classes
        .iter()
        .map(|c| {
            let members: Vec<&Embedding> = data.iter().filter(|e| &e.labels.subject_id == c).collect();
            members.iter().fold(DVector::zeros(p), |acc, e| acc + DVector::from_column_slice(&e.v)) / members.len() as f64
                - mean
        })
        .collect();
    for mut col in w.column_iter_mut() {
        let mut best = 0.0f64;
        for mk in &class_means {
            let proj = col.dot(mk);
            if proj.abs() > best.abs() {
                best = proj;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Mean of a subject's projected segment embeddings.
pub fn enroll(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or_else(|| Error::invalid("enrollment needs at least one embedding"))?;
    let n = first.v.len();
    if embeddings.iter().any(|e| e.v.len() != n || e.kind != first.kind) {
        return Err(Error::invalid("enrollment embeddings differ in kind or length"));
    }
    if embeddings.iter().any(|e| e.labels.subject_id != first.labels.subject_id) {
        return Err(Error::invalid("enrollment embeddings belong to different subjects"));
    }
    let mut v = vec![0.0; n];
    for e in embeddings {
        for (a, b) in v.iter_mut().zip(&e.v) {
            *a += b;
        }
    }
    let count = embeddings.len() as f64;
    v.iter_mut().for_each(|a| *a /= count);
    Ok(Embedding {
        kind: first.kind,
        labels: Labels::new(&first.labels.subject_id, "", ""),
        index: 0,
        v,
    })
}

/// Inner product over the product of norms.
pub fn cosine_score(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::mismatch(format!(
            "cannot score vectors of length {} and {}",
            reference.len(),
            test.len()
        )));
    }
    let na = norm(reference);
    let nb = norm(test);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero vector"));
    }
    let dot: f64 = reference.iter().zip(test).map(|(a, b)| a * b).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit-normalises each part (zero parts stay zero) and concatenates them.
pub fn fuse_ix(iv: &Embedding, xv: &Embedding) -> Result<Embedding> {
    if iv.labels != xv.labels || iv.index != xv.index {
        return Err(Error::mismatch(format!(
            "cannot fuse embeddings of different segments ({:?}#{} vs {:?}#{})",
            iv.labels, iv.index, xv.labels, xv.index
        )));
    }
    let unit = |v: &[f64]| {
        let n = norm(v);
        v.iter().map(|x| if n > 0.0 { x / n } else { *x }).collect::<Vec<f64>>()
    };
    let mut v = unit(&iv.v);
    v.extend(unit(&xv.v));
    Ok(Embedding {
        kind: EmbeddingKind::IxVector,
        labels: iv.labels.clone(),
        index: iv.index,
        v,
    })
}

const CSV_FIXED: [&str; 5] = ["kind", "subject_id", "session_id", "task_id", "index"];

/// Writes embeddings as CSV: kind, labels, index, then one column per value.
pub fn write_embeddings(path: &Path, embeddings: &[Embedding], prov: &Provenance) -> Result<()> {
    let width = embeddings.first().map_or(0, |e| e.v.len());
    if embeddings.iter().any(|e| e.v.len() != width) {
        return Err(Error::invalid("embeddings in one file must share a length"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for e in embeddings {
        let mut row = vec![
            e.kind.to_string(),
            e.labels.subject_id.clone(),
            e.labels.session_id.clone(),
            e.labels.task_id.clone(),
            e.index.to_string(),
        ];
        // `{:?}` prints the shortest string that parses back to the same f64.
        row.extend(e.v.iter().map(|x| format!("{x:?}")));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    codec::write_text_with(path, prov, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<Embedding>, Provenance)> {
    let (prov, body) = codec::read_text_with(path)?;
    let mut rdr = csv::Reader::from_reader(body.as_slice());
    let header = rdr.headers()?.clone();
    if header.len() < CSV_FIXED.len() || header.iter().take(5).ne(CSV_FIXED) {
        return Err(Error::artifact(path, "not an embedding file (bad header)"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 3;
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let kind: EmbeddingKind = rec[0].parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let index = rec[4].parse().map_err(|_| parse_err(format!("bad index `{}`", &rec[4])))?;
        let v = rec
            .iter()
            .skip(5)
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Embedding::new(kind, Labels::new(&rec[1], &rec[2], &rec[3]), index, v).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok((out, prov))
}
