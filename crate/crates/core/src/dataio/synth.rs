//! Desk-scale stand-in for a multi-session EEG corpus.
//!
//! Every recording is stationary Gaussian noise whose spectrum is the
//! product of four factors:
//!
//! * a 1/f background of power `noise_sd²`,
//! * a persistent subject signature: per-channel gains plus 2 to 4 narrow
//!   spectral peaks whose per-channel strength scales with `subject_sd`,
//! * a session nuisance: per-channel broadband gain and a spectral tilt,
//!   both scaled by `session_sd`,
//! * a task perturbation: a band boost shared by all subjects, scaled by
//!   `task_sd`.
//!
//! Each factor draws from its own seeded stream, so a corpus is a pure
//! function of `(spec, seed)` regardless of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Labels, Manifest, ManifestRow, Recording};
use crate::codec::fingerprint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_sessions: usize,
    pub n_tasks: usize,
    /// Length of each (subject, session, task) recording.
    pub duration_s: f64,
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub subject_sd: f64,
    pub session_sd: f64,
    pub task_sd: f64,
    pub noise_sd: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 10,
            n_sessions: 3,
            n_tasks: 2,
            duration_s: 150.0,
            n_channels: 9,
            sample_rate_hz: 250.0,
            subject_sd: 0.3,
            session_sd: 0.03,
            task_sd: 0.5,
            noise_sd: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 || self.n_sessions < 2 || self.n_tasks < 1 || self.n_channels < 1 {
            return Err(Error::invalid(format!(
                "synthetic corpus needs >= 2 subjects, >= 2 sessions, >= 1 task and >= 1 channel \
                 (got {}, {}, {}, {})",
                self.n_subjects, self.n_sessions, self.n_tasks, self.n_channels
            )));
        }
        for (name, v) in [
            ("duration_s", self.duration_s),
            ("sample_rate_hz", self.sample_rate_hz),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        // Effect sizes may be zero (no effect), never negative.
        for (name, v) in [
            ("subject_sd", self.subject_sd),
            ("session_sd", self.session_sd),
            ("task_sd", self.task_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if (self.duration_s * self.sample_rate_hz).round() < 2.0 {
            return Err(Error::invalid("recordings must hold at least 2 samples"));
        }
        Ok(())
    }
}

pub fn subject_id(s: usize) -> String {
    format!("sub-{:02}", s + 1)
}

pub fn session_id(e: usize) -> String {
    format!("ses-{}", e + 1)
}

pub fn task_id(t: usize) -> String {
    format!("task-{}", t + 1)
}

fn stream(seed: u64, tag: &str, ids: &[usize]) -> ChaCha8Rng {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(tag.as_bytes());
    for id in ids {
        key.extend_from_slice(&(*id as u64).to_le_bytes());
    }
    ChaCha8Rng::seed_from_u64(fingerprint(&key))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Peak {
    freq_hz: f64,
    /// Per-channel peak strength relative to the background at `freq_hz`.
    strength: Vec<f64>,
}

struct SubjectSignature {
    gain: Vec<f64>,
    peaks: Vec<Peak>,
}

struct SessionNuisance {
    gain: Vec<f64>,
    tilt: f64,
}

struct TaskBand {
    center_hz: f64,
    boost: f64,
}

const PEAK_WIDTH_HZ: f64 = 1.0;
const TASK_WIDTH_HZ: f64 = 3.0;

impl SubjectSignature {
    fn draw(spec: &SynthSpec, seed: u64, s: usize) -> Self {
        let mut rng = stream(seed, "subject", &[s]);
        let gain = (0..spec.n_channels)
            .map(|_| (0.5 * spec.subject_sd * normal(&mut rng)).exp())
            .collect();
        let n_peaks = rng.gen_range(2..=4);
        let peaks = (0..n_peaks)
            .map(|_| Peak {
                freq_hz: rng.gen_range(6.0..26.0),
                strength: (0..spec.n_channels)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        2.0 * spec.subject_sd * u * u
                    })
                    .collect(),
            })
            .collect();
        SubjectSignature { gain, peaks }
    }
}

impl SessionNuisance {
    fn draw(spec: &SynthSpec, seed: u64, s: usize, e: usize) -> Self {
        let mut rng = stream(seed, "session", &[s, e]);
        let gain = (0..spec.n_channels)
            .map(|_| (spec.session_sd * normal(&mut rng)).exp())
            .collect();
        let tilt = 0.5 * spec.session_sd * normal(&mut rng);
        SessionNuisance { gain, tilt }
    }
}

impl TaskBand {
    fn draw(spec: &SynthSpec, seed: u64, t: usize) -> Self {
        let mut rng = stream(seed, "task", &[t]);
        TaskBand {
            center_hz: rng.gen_range(4.0..28.0),
            boost: spec.task_sd * normal(&mut rng).abs(),
        }
    }
}

fn background(noise_sd: f64, f: f64) -> f64 {
    noise_sd * noise_sd * 10.0 / f.max(1.0)
}

fn bump(f: f64, center: f64, width: f64) -> f64 {
    let z = (f - center) / width;
    (-0.5 * z * z).exp()
}

/// Target power spectral density of channel `c` at frequency `f`.
fn spectrum(
    spec: &SynthSpec,
    subject: &SubjectSignature,
    session: &SessionNuisance,
    task: &TaskBand,
    c: usize,
    f: f64,
) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    let mut brain = subject.gain[c] * background(spec.noise_sd, f);
    for p in &subject.peaks {
        brain += p.strength[c] * background(spec.noise_sd, p.freq_hz) * bump(f, p.freq_hz, PEAK_WIDTH_HZ);
    }
    let task_mod = 1.0 + task.boost * bump(f, task.center_hz, TASK_WIDTH_HZ);
    session.gain[c] * (f / 10.0).powf(session.tilt) * task_mod * brain
}

/// Real Gaussian noise of length `n` whose periodogram has expectation `psd`
/// (one value per one-sided bin `0..=n/2`).
fn shaped_noise(psd: &[f64], n: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f32> {
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let nf = n as f64;
    for k in 1..=n / 2 {
        if 2 * k == n {
            spec[k] = Complex::new((nf * psd[k]).sqrt() * normal(rng), 0.0);
        } else {
            let amp = (nf * psd[k] / 2.0).sqrt();
            let z = Complex::new(amp * normal(rng), amp * normal(rng));
            spec[k] = z;
            spec[n - k] = z.conj();
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|z| (z.re / nf) as f32).collect()
}

/// Generates every (subject, session, task) recording and a manifest whose
/// paths are relative (`recordings/<subject>_<session>_<task>.mcsr`).
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<(Vec<Recording>, Manifest)> {
    spec.validate()?;
    let subjects: Vec<_> = (0..spec.n_subjects)
        .map(|s| SubjectSignature::draw(spec, seed, s))
        .collect();
    let tasks: Vec<_> = (0..spec.n_tasks).map(|t| TaskBand::draw(spec, seed, t)).collect();
    let n = (spec.duration_s * spec.sample_rate_hz).round() as usize;

    let keys: Vec<(usize, usize, usize)> = (0..spec.n_subjects)
        .flat_map(|s| (0..spec.n_sessions).flat_map(move |e| (0..spec.n_tasks).map(move |t| (s, e, t))))
        .collect();

    let recordings = keys
        .par_iter()
        .map(|&(s, e, t)| {
            let session = SessionNuisance::draw(spec, seed, s, e);
            let mut rng = stream(seed, "noise", &[s, e, t]);
            let mut planner = FftPlanner::new();
            let mut samples = Vec::with_capacity(n * spec.n_channels);
            for c in 0..spec.n_channels {
                let psd: Vec<f64> = (0..=n / 2)
                    .map(|k| {
                        let f = k as f64 * spec.sample_rate_hz / n as f64;
                        spectrum(spec, &subjects[s], &session, &tasks[t], c, f)
                    })
                    .collect();
                samples.extend(shaped_noise(&psd, n, &mut rng, &mut planner));
            }
            Recording::new(
                Labels::new(subject_id(s), session_id(e), task_id(t)),
                spec.sample_rate_hz,
                spec.n_channels,
                samples,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = recordings
        .iter()
        .map(|r| ManifestRow {
            subject_id: r.labels.subject_id.clone(),
            session_id: r.labels.session_id.clone(),
            task_id: r.labels.task_id.clone(),
            path: format!(
                "recordings/{}_{}_{}.mcsr",
                r.labels.subject_id, r.labels.session_id, r.labels.task_id
            )
            .into(),
        })
        .collect();
    let manifest = Manifest::new(rows, "")?;
    Ok((recordings, manifest))
}
