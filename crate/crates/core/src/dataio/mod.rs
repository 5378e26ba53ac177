//! Recordings, fixed-length segmentation, manifests and the synthetic corpus.

mod manifest;
mod synth;

use std::path::Path;

pub use manifest::{Manifest, ManifestRow, SessionRole, Split};
pub use synth::{generate_synthetic_corpus, SynthSpec};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

const RECORDING_MAGIC: &[u8; 5] = b"MCSR1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Labels {
    pub subject_id: String,
    pub session_id: String,
    pub task_id: String,
}

impl Labels {
    pub fn new(subject: impl Into<String>, session: impl Into<String>, task: impl Into<String>) -> Self {
        Labels {
            subject_id: subject.into(),
            session_id: session.into(),
            task_id: task.into(),
        }
    }
}

/// A continuous multichannel recording of one subject doing one task in one
/// session. Samples are stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub labels: Labels,
    pub sample_rate_hz: f64,
    n_channels: usize,
    n_samples: usize,
    samples: Vec<f32>,
}

impl Recording {
    pub fn new(labels: Labels, sample_rate_hz: f64, n_channels: usize, samples: Vec<f32>) -> Result<Self> {
        if n_channels == 0 {
            return Err(Error::invalid("recording needs at least one channel"));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if samples.is_empty() || samples.len() % n_channels != 0 {
            return Err(Error::invalid(format!(
                "{} samples do not divide into {n_channels} non-empty channels",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite sample in channel {} at {}",
                i / (samples.len() / n_channels),
                i % (samples.len() / n_channels)
            )));
        }
        let n_samples = samples.len() / n_channels;
        Ok(Recording {
            labels,
            sample_rate_hz,
            n_channels,
            n_samples,
            samples,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(RECORDING_MAGIC);
        w.u32(self.n_channels as u32);
        w.u64(self.n_samples as u64);
        w.f64(self.sample_rate_hz);
        w.str(&self.labels.subject_id);
        w.str(&self.labels.session_id);
        w.str(&self.labels.task_id);
        w.f32s(self.samples.iter().copied());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, RECORDING_MAGIC, origin)?;
        let c = r.u32()? as usize;
        let t = r.u64()? as usize;
        let fs = r.f64()?;
        let labels = Labels::new(r.str()?, r.str()?, r.str()?);
        let samples = r.f32s(c.checked_mul(t).ok_or_else(|| r.corrupt("C x T overflows"))?)?;
        r.finish()?;
        Recording::new(labels, fs, c, samples).map_err(|e| Error::artifact(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Recording::from_bytes(&codec::read_file(path)?, path)
    }
}

/// A fixed-length slice of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub labels: Labels,
    /// Position of this segment within its recording.
    pub index: usize,
    /// Offset of the first sample within the recording.
    pub start_s: f64,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    n_channels: usize,
    len: usize,
    samples: Vec<f32>,
}

impl Segment {
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    /// Keeps only the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Segment> {
        if channels.is_empty() {
            return Err(Error::invalid("channel subset is empty"));
        }
        let mut samples = Vec::with_capacity(channels.len() * self.len);
        for &c in channels {
            if c >= self.n_channels {
                return Err(Error::invalid(format!(
                    "channel {c} out of range for {} channels",
                    self.n_channels
                )));
            }
            samples.extend_from_slice(self.channel(c));
        }
        Ok(Segment {
            n_channels: channels.len(),
            samples,
            labels: self.labels.clone(),
            ..*self
        })
    }
}

/// Cuts `rec` into consecutive, non-overlapping segments of `duration_s`.
///
/// The trailing remainder is dropped. A recording shorter than one segment
/// yields `Ok(vec![])`.
pub fn segment_recording(rec: &Recording, duration_s: f64) -> Result<Vec<Segment>> {
    segment_recording_from(rec, 0.0, duration_s)
}

/// Like [`segment_recording`] but tiling starts at `start_s`; indices count from there.
pub fn segment_recording_from(rec: &Recording, start_s: f64, duration_s: f64) -> Result<Vec<Segment>> {
    if !(start_s >= 0.0 && start_s.is_finite()) {
        return Err(Error::invalid(format!("segment offset must be non-negative, got {start_s}")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid(format!("segment duration must be positive, got {duration_s}")));
    }
    let len = (duration_s * rec.sample_rate_hz).round() as usize;
    if len == 0 {
        return Err(Error::invalid(format!(
            "segment of {duration_s} s is shorter than one sample at {} Hz",
            rec.sample_rate_hz
        )));
    }
    let first = ((start_s * rec.sample_rate_hz).round() as usize).min(rec.n_samples);
    let count = (rec.n_samples - first) / len;
    Ok((0..count)
        .map(|i| {
            let lo = first + i * len;
            let mut samples = Vec::with_capacity(rec.n_channels * len);
            for c in 0..rec.n_channels {
                samples.extend_from_slice(&rec.channel(c)[lo..lo + len]);
            }
            Segment {
                labels: rec.labels.clone(),
                index: i,
                start_s: lo as f64 / rec.sample_rate_hz,
                sample_rate_hz: rec.sample_rate_hz,
                duration_s,
                n_channels: rec.n_channels,
                len,
                samples,
            }
        })
        .collect())
}
