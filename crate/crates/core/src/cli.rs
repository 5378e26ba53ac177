//! Command-line front end: one subcommand per pipeline stage plus whole
//! protocol runs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{self, Provenance};
use crate::config::PipelineConfig;
use crate::dataio::{generate_synthetic_corpus, Labels, Manifest, Recording, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{self, build_pools, format_reports, reports_csv, run_protocol, Corpus, EvalReport, Protocol, ScoreTable};
use crate::features::FeatureSegment;
use crate::gmm::Ubm;
use crate::ivector::TotalVariability;
use crate::systems::{
    self, channel_dir, channel_views, init_system_dir, system_dir_kind, Enrollment, System, SystemKind, LDA_I_FILE,
    LDA_X_FILE, NET_FILE, TV_FILE, UBM_FILE,
};
use crate::xvector::XvecNet;

#[derive(Parser, Debug)]
#[command(name = "ixvector", version, about = "Subject identification from multichannel EEG")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalOpts {
    /// TOML pipeline config; unset keys take the preset's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base values: `desk` (small, fast) or `full` (large model sizes).
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Override one config key, e.g. `--set ubm.modified_mixtures=8`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Accept inputs produced under a different config hash.
    #[arg(long, global = true)]
    pub force: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic multi-session corpus and its manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        subject_sd: Option<f64>,
        #[arg(long)]
        session_sd: Option<f64>,
    },
    /// Segment every manifest recording and store its PSD features by split.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra test segment lengths in seconds, stored as `test-<L>s` splits.
        #[arg(long, value_delimiter = ',')]
        test_lengths: Vec<f64>,
    },
    /// Train the background model(s) of a system from the training split.
    TrainUbm(StageArgs),
    /// Train the total-variability matrix (needs train-ubm).
    TrainTmatrix(StageArgs),
    /// Train the x-vector network on the training and validation splits.
    TrainXvector(StageArgs),
    /// Fit the LDA back-end(s) on training-split embeddings.
    FitLda(StageArgs),
    /// Build one reference per subject.
    Enroll {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score segments against an enrollment.
    Score {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        enrollment: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank-1 accuracy and EER of score tables.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        /// Also write the machine-readable report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train, enroll, score and evaluate systems under one protocol.
    RunProtocol {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `protocol.name` from the config.
        #[arg(long)]
        protocol: Option<String>,
        /// Comma-separated system names.
        #[arg(long, value_delimiter = ',', default_value = "ix")]
        system: Vec<String>,
        /// Directory for the report and score tables.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct StageArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// System directory; created by the first stage.
    #[arg(long)]
    pub model: PathBuf,
    /// System kind; required when the directory does not exist yet.
    #[arg(long)]
    pub system: Option<String>,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.global.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    } else {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(g: &GlobalOpts) -> Result<PipelineConfig> {
    let base = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::preset(&g.preset)?,
    };
    let cfg = base.with_overrides(&g.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    let work = || -> Result<()> {
        match &cli.command {
            Command::GenSynth {
                out,
                seed,
                subjects,
                sessions,
                tasks,
                duration_s,
                subject_sd,
                session_sd,
            } => {
                let d = SynthSpec::default();
                let spec = SynthSpec {
                    n_subjects: subjects.unwrap_or(d.n_subjects),
                    n_sessions: sessions.unwrap_or(d.n_sessions),
                    n_tasks: tasks.unwrap_or(d.n_tasks),
                    duration_s: duration_s.unwrap_or(d.duration_s),
                    n_channels: cfg.features.montage.len(),
                    subject_sd: subject_sd.unwrap_or(d.subject_sd),
                    session_sd: session_sd.unwrap_or(d.session_sd),
                    ..d
                };
                gen_synth(&spec, *seed, out)
            }
            Command::ExtractFeatures {
                manifest,
                out,
                test_lengths,
            } => extract_features(&cfg, manifest, out, test_lengths),
            Command::TrainUbm(a) => train_stage(&cfg, g.force, a, Stage::Ubm),
            Command::TrainTmatrix(a) => train_stage(&cfg, g.force, a, Stage::Tmatrix),
            Command::TrainXvector(a) => train_stage(&cfg, g.force, a, Stage::Xvector),
            Command::FitLda(a) => train_stage(&cfg, g.force, a, Stage::Lda),
            Command::Enroll {
                features,
                model,
                split,
                out,
            } => {
                let (system, prov) = load_system(&cfg, g.force, model)?;
                let segs = FeatureStore::open(features, &cfg, g.force)?.split(split)?;
                let refs: Vec<&FeatureSegment> = segs.iter().collect();
                let enrollment = system.enroll(&refs, cfg.ivector.enroll)?;
                enrollment.save(out, &Provenance::new(prov.config_hash, cfg.seed))
            }
            Command::Score {
                features,
                model,
                enrollment,
                split,
                out,
            } => {
                let (system, prov) = load_system(&cfg, g.force, model)?;
                let (enr, eprov) = Enrollment::load(enrollment)?;
                check_hash(eprov.config_hash, prov.config_hash, enrollment, g.force)?;
                let segs = FeatureStore::open(features, &cfg, g.force)?.split(split)?;
                let refs: Vec<&FeatureSegment> = segs.iter().collect();
                let table = system.score(&enr, &refs)?;
                table.save_csv(out, &Provenance::new(prov.config_hash, cfg.seed))
            }
            Command::Evaluate { scores, csv } => evaluate(scores, csv.as_deref(), g.force),
            Command::RunProtocol {
                manifest,
                protocol,
                system,
                out,
            } => {
                let protocol: Protocol = protocol.as_deref().unwrap_or(&cfg.protocol.name).parse()?;
                let kinds = system.iter().map(|s| s.parse()).collect::<Result<Vec<SystemKind>>>()?;
                let (recordings, manifest) = load_corpus(manifest)?;
                let corpus = Corpus::new(&recordings, &manifest)?;
                let run = run_protocol(protocol, &kinds, &corpus, &cfg)?;
                print!("{}", format_reports(&run.reports));
                if let Some(dir) = out {
                    let prov = Provenance::new(cfg.hash(), cfg.seed);
                    for r in &run.results {
                        let name = format!("{}_{}.csv", sanitize(&r.condition), r.system);
                        r.table.save_csv(&dir.join("scores").join(name), &prov)?;
                    }
                    codec::write_file(&dir.join("report.txt"), format_reports(&run.reports).as_bytes())?;
                    codec::write_file(&dir.join("report.csv"), &reports_csv(&run.reports)?)?;
                }
                Ok(())
            }
        }
    };
    match g.workers {
        Some(n) => {
            if n == 0 {
                return Err(Error::Config("--workers must be at least 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            pool.install(work)
        }
        None => work(),
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn check_hash(found: u64, expected: u64, path: &Path, force: bool) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    let msg = format!(
        "{} was produced under config hash {found:016x}, expected {expected:016x}; \
         regenerate it with the same config or pass --force",
        path.display()
    );
    if force {
        log::warn!("{msg}");
        Ok(())
    } else {
        Err(Error::mismatch(msg))
    }
}

pub fn gen_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    let (recordings, manifest) = generate_synthetic_corpus(spec, seed)?;
    let manifest = manifest.with_base_dir(out);
    for (row, rec) in manifest.rows().iter().zip(&recordings) {
        rec.save(&manifest.resolve(row))?;
    }
    manifest.save(&out.join("manifest.csv"))
}

pub fn load_corpus(manifest: &Path) -> Result<(Vec<Recording>, Manifest)> {
    let manifest = Manifest::load(manifest)?;
    let recordings = manifest
        .rows()
        .iter()
        .map(|row| {
            let rec = Recording::load(&manifest.resolve(row))?;
            let expected = Labels::new(&row.subject_id, &row.session_id, &row.task_id);
            if rec.labels != expected {
                return Err(Error::artifact(
                    manifest.resolve(row),
                    format!("file holds {:?} but the manifest lists {:?}", rec.labels, expected),
                ));
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((recordings, manifest))
}

const FEATURE_INDEX: &str = "features.csv";
const INDEX_HEADER: [&str; 8] = ["split", "subject_id", "session_id", "task_id", "index", "start_s", "end_s", "file"];

pub fn extract_features(cfg: &PipelineConfig, manifest: &Path, out: &Path, extra_lengths: &[f64]) -> Result<()> {
    let (recordings, manifest) = load_corpus(manifest)?;
    let corpus = Corpus::new(&recordings, &manifest)?;
    let mut lengths = vec![cfg.features.segment_s];
    lengths.extend(extra_lengths.iter().copied().filter(|l| *l != cfg.features.segment_s));
    let pools = build_pools(&corpus, cfg, &lengths)?;
    let channels = cfg.features.channel_indices()?;
    let mut splits: Vec<(String, &[FeatureSegment])> = vec![("train".into(), &pools.train), ("val".into(), &pools.val)];
    for (i, (len, segs)) in pools.test.iter().enumerate() {
        let name = if i == 0 { "test".to_string() } else { format!("test-{len}s") };
        splits.push((name, segs));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(INDEX_HEADER)?;
    for (split, segs) in splits {
        for f in segs {
            let mut f = f.select_channels(&channels)?;
            if cfg.features.standardize {
                f = f.standardized();
            }
            let l = &f.labels;
            let file = format!(
                "{split}/{}_{}_{}_{}.mcft",
                l.subject_id,
                l.session_id,
                l.task_id,
                (f.span_s.0 * 1000.0).round() as u64
            );
            f.save(&out.join(&file))?;
            w.write_record([
                split.clone(),
                l.subject_id.clone(),
                l.session_id.clone(),
                l.task_id.clone(),
                f.index.to_string(),
                format!("{:?}", f.span_s.0),
                format!("{:?}", f.span_s.1),
                file,
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    codec::write_text_with(&out.join(FEATURE_INDEX), &Provenance::new(cfg.hash(), cfg.seed), &bytes)
}

/// A directory written by `extract-features`.
pub struct FeatureStore {
    dir: PathBuf,
    rows: Vec<(String, String)>,
}

impl FeatureStore {
    pub fn open(dir: &Path, cfg: &PipelineConfig, force: bool) -> Result<Self> {
        let path = dir.join(FEATURE_INDEX);
        let (prov, body) = codec::read_text_with(&path)?;
        if prov.config_hash != cfg.hash() {
            // Features depend on the feature section only; other changes are harmless.
            log::info!("{} was extracted under config hash {:016x}", path.display(), prov.config_hash);
        }
        let mut rdr = csv::Reader::from_reader(body.as_slice());
        if rdr.headers()?.iter().ne(INDEX_HEADER) {
            return Err(Error::artifact(&path, "not a feature index (bad header)"));
        }
        let rows = rdr
            .records()
            .map(|r| {
                let r = r?;
                Ok((r[0].to_string(), r[7].to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let store = FeatureStore { dir: dir.into(), rows };
        if let Some(first) = store.rows.first() {
            let f = FeatureSegment::load(&dir.join(&first.1))?;
            let want = cfg.features.channels.len();
            if f.n_channels() != want || (f.frame_len_ms - cfg.features.frame_len_ms).abs() > 1e-9 {
                let msg = format!(
                    "features in {} have {} channels at {} ms frames, config selects {want} channels at {} ms",
                    dir.display(),
                    f.n_channels(),
                    f.frame_len_ms,
                    cfg.features.frame_len_ms
                );
                if force {
                    log::warn!("{msg}");
                } else {
                    return Err(Error::mismatch(msg));
                }
            }
        }
        Ok(store)
    }

    pub fn split(&self, name: &str) -> Result<Vec<FeatureSegment>> {
        let segs: Vec<FeatureSegment> = self
            .rows
            .iter()
            .filter(|(s, _)| s == name)
            .map(|(_, file)| FeatureSegment::load(&self.dir.join(file)))
            .collect::<Result<_>>()?;
        if segs.is_empty() {
            let mut names: Vec<&str> = self.rows.iter().map(|(s, _)| s.as_str()).collect();
            names.dedup();
            return Err(Error::invalid(format!("no `{name}` segments in {}; splits present: {names:?}", self.dir.display())));
        }
        Ok(segs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Ubm,
    Tmatrix,
    Xvector,
    Lda,
}

/// Where the i-vector components of sub-system `c` (or the only one) live.
fn part_dirs(kind: SystemKind, dir: &Path, n_channels: usize) -> Vec<(Option<usize>, PathBuf)> {
    if kind.per_channel() {
        (0..n_channels).map(|c| (Some(c), channel_dir(dir, c))).collect()
    } else {
        vec![(None, dir.to_path_buf())]
    }
}

fn load_checked<T>(path: &Path, load: impl Fn(&Path) -> Result<T>, prov: impl Fn(&T) -> &Provenance, hash: u64, force: bool) -> Result<T> {
    if !path.exists() {
        return Err(Error::artifact(path, "missing; run the upstream stage first"));
    }
    let v = load(path)?;
    check_hash(prov(&v).config_hash, hash, path, force)?;
    Ok(v)
}

fn train_stage(cfg: &PipelineConfig, force: bool, a: &StageArgs, stage: Stage) -> Result<()> {
    let store = FeatureStore::open(&a.features, cfg, force)?;
    let train = store.split("train")?;
    let train_refs: Vec<&FeatureSegment> = train.iter().collect();
    let n_channels = train[0].n_channels();
    let kind = match (system_dir_kind(&a.model), &a.system) {
        (Ok((kind, prov)), requested) => {
            if let Some(r) = requested {
                let r: SystemKind = r.parse()?;
                if r != kind {
                    return Err(Error::mismatch(format!("{} holds a {kind} system, not {r}", a.model.display())));
                }
            }
            check_hash(prov.config_hash, cfg.hash(), &a.model, force)?;
            kind
        }
        (Err(_), Some(r)) => {
            let kind: SystemKind = r.parse()?;
            init_system_dir(&a.model, kind, cfg, Some(n_channels))?;
            kind
        }
        (Err(e), None) => return Err(e),
    };
    let hash = cfg.hash();
    let no_stage = |what: &str| Err(Error::invalid(format!("system {kind} has no {what}")));
    match stage {
        Stage::Ubm => {
            if kind.ivector_spec(cfg).is_none() && kind != SystemKind::Gmm {
                return no_stage("background model");
            }
            for (c, dir) in part_dirs(kind, &a.model, n_channels) {
                let views;
                let segs: Vec<&FeatureSegment> = match c {
                    Some(c) => {
                        views = channel_views(&train_refs, c)?;
                        views.iter().collect()
                    }
                    None => train_refs.clone(),
                };
                systems::fit_ubm(kind, cfg, &segs, c)?.save(&dir.join(UBM_FILE))?;
            }
        }
        Stage::Tmatrix => {
            if kind.ivector_spec(cfg).is_none() {
                return no_stage("T matrix");
            }
            for (c, dir) in part_dirs(kind, &a.model, n_channels) {
                let ubm = load_checked(&dir.join(UBM_FILE), Ubm::load, |u| &u.provenance, hash, force)?;
                let views;
                let segs: Vec<&FeatureSegment> = match c {
                    Some(c) => {
                        views = channel_views(&train_refs, c)?;
                        views.iter().collect()
                    }
                    None => train_refs.clone(),
                };
                systems::fit_tmatrix(kind, cfg, &ubm, &segs, c)?.save(&dir.join(TV_FILE))?;
            }
        }
        Stage::Xvector => {
            if kind.pool_mode().is_none() {
                return no_stage("x-vector network");
            }
            let val = store.split("val").unwrap_or_default();
            let val_refs: Vec<&FeatureSegment> = val.iter().collect();
            systems::fit_xvector(kind, cfg, &train_refs, &val_refs)?.save(&a.model.join(NET_FILE))?;
        }
        Stage::Lda => {
            if kind == SystemKind::Gmm {
                return no_stage("LDA back-end");
            }
            if let Some(spec) = kind.ivector_spec(cfg) {
                for (c, dir) in part_dirs(kind, &a.model, n_channels) {
                    let ubm = load_checked(&dir.join(UBM_FILE), Ubm::load, |u| &u.provenance, hash, force)?;
                    let tv = load_checked(&dir.join(TV_FILE), TotalVariability::load, |t| &t.provenance, hash, force)?;
                    let views;
                    let segs: Vec<&FeatureSegment> = match c {
                        Some(c) => {
                            views = channel_views(&train_refs, c)?;
                            views.iter().collect()
                        }
                        None => train_refs.clone(),
                    };
                    let raw = systems::raw_ivectors(&spec, &ubm, &tv, &segs)?;
                    let mut lda = crate::backend::fit_lda(&raw, cfg.lda.dim)?;
                    lda.provenance = Provenance::new(hash, cfg.seed);
                    lda.save(&dir.join(LDA_I_FILE))?;
                }
            }
            if kind.pool_mode().is_some() {
                let net = load_checked(&a.model.join(NET_FILE), XvecNet::load, |n| &n.provenance, hash, force)?;
                let raw = systems::raw_xvectors(&net, &train_refs)?;
                let mut lda = crate::backend::fit_lda(&raw, cfg.lda.dim)?;
                lda.provenance = Provenance::new(hash, cfg.seed);
                lda.save(&a.model.join(LDA_X_FILE))?;
            }
        }
    }
    Ok(())
}

fn load_system(cfg: &PipelineConfig, force: bool, dir: &Path) -> Result<(System, Provenance)> {
    let (system, prov) = System::load(dir, cfg)?;
    check_hash(prov.config_hash, cfg.hash(), dir, force)?;
    Ok((system, prov))
}

fn evaluate(paths: &[PathBuf], csv_out: Option<&Path>, force: bool) -> Result<()> {
    let mut tables: Vec<(String, ScoreTable, Provenance)> = Vec::new();
    for p in paths {
        let (table, prov) = ScoreTable::load_csv(p)?;
        if let Some((_, _, first)) = tables.first() {
            check_hash(prov.config_hash, first.config_hash, p, force)?;
        }
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        tables.push((name, table, prov));
    }
    let reports = tables
        .iter()
        .map(|(name, t, prov)| EvalReport::from_table("scores", name, t, prov.seed))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", eval::format_reports(&reports));
    if let Some(out) = csv_out {
        codec::write_file(out, &reports_csv(&reports)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_arguments_exit_with_validation_status() {
        assert_eq!(run(["ixvector", "no-such-command"]), 2);
        assert_eq!(run(["ixvector", "run-protocol", "--manifest", "x.csv", "--set", "ubm.bogus=1"]), 2);
    }

    #[test]
    fn missing_upstream_artifact_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        assert_eq!(run(["ixvector".as_ref(), "evaluate".as_ref(), "--scores".as_ref(), missing.as_os_str()]), 3);
    }
}
