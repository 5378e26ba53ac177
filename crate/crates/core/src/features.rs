//! Short-window power spectra: the frame representation every model consumes.
//!
//! Each channel is cut into non-overlapping rectangular frames and each frame
//! becomes its raw one-sided periodogram `|DFT_k|² / L`, restricted to the
//! DFT bins whose centre frequency lies inside the requested band (both edges
//! inclusive). No log compression, no taper.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::codec::{self, Reader, Writer};
use crate::dataio::{Labels, Segment};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 5] = b"MCFT1";
const EDGE_TOL: f64 = 1e-9;

/// Per-channel PSD spectrogram of one segment, stored C x N x d.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSegment {
    pub labels: Labels,
    /// Segment position within its recording.
    pub index: usize,
    /// Start and end of the source segment within its recording, in seconds.
    pub span_s: (f64, f64),
    pub frame_len_ms: f64,
    pub band_hz: (f64, f64),
    n_channels: usize,
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSegment {
    pub fn from_parts(
        labels: Labels,
        n_channels: usize,
        n_frames: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_channels == 0 || n_frames == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "feature tensor must be non-empty, got {n_channels}x{n_frames}x{dim}"
            )));
        }
        if data.len() != n_channels * n_frames * dim {
            return Err(Error::invalid(format!(
                "feature tensor holds {} values, expected {n_channels}x{n_frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature tensor contains non-finite values"));
        }
        Ok(FeatureSegment {
            labels,
            index: 0,
            span_s: (0.0, 0.0),
            frame_len_ms: 0.0,
            band_hz: (0.0, 0.0),
            n_channels,
            n_frames,
            dim,
            data,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, c: usize, n: usize) -> &[f64] {
        let at = (c * self.n_frames + n) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// All N frames of channel `c`, row-major N x d.
    pub fn channel(&self, c: usize) -> &[f64] {
        let len = self.n_frames * self.dim;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames of every channel in channel-major order.
    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<FeatureSegment> {
        if channels.is_empty() {
            return Err(Error::invalid("channel subset is empty"));
        }
        let mut data = Vec::with_capacity(channels.len() * self.n_frames * self.dim);
        for &c in channels {
            if c >= self.n_channels {
                return Err(Error::invalid(format!(
                    "channel {c} out of range for {} channels",
                    self.n_channels
                )));
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(FeatureSegment {
            labels: self.labels.clone(),
            n_channels: channels.len(),
            data,
            ..*self
        })
    }

    /// Per-dimension standardisation over all frames of this segment.
    pub fn standardized(&self) -> FeatureSegment {
        let count = (self.n_channels * self.n_frames) as f64;
        let mut mean = vec![0.0; self.dim];
        let mut sq = vec![0.0; self.dim];
        for f in self.frames() {
            for (j, v) in f.iter().enumerate() {
                mean[j] += v;
                sq[j] += v * v;
            }
        }
        let sd: Vec<f64> = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-12)
            })
            .collect();
        let data = self
            .data
            .chunks_exact(self.dim)
            .flat_map(|f| f.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect::<Vec<_>>())
            .collect();
        FeatureSegment {
            labels: self.labels.clone(),
            data,
            ..*self
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(FEATURE_MAGIC);
        w.u32(self.n_channels as u32);
        w.u32(self.n_frames as u32);
        w.u32(self.dim as u32);
        w.u64(self.index as u64);
        w.f64(self.span_s.0);
        w.f64(self.span_s.1);
        w.f64(self.frame_len_ms);
        w.f64(self.band_hz.0);
        w.f64(self.band_hz.1);
        w.str(&self.labels.subject_id);
        w.str(&self.labels.session_id);
        w.str(&self.labels.task_id);
        w.f32s(self.data.iter().map(|v| *v as f32));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, FEATURE_MAGIC, origin)?;
        let c = r.u32()? as usize;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let index = r.u64()? as usize;
        let span = (r.f64()?, r.f64()?);
        let frame_len_ms = r.f64()?;
        let band = (r.f64()?, r.f64()?);
        let labels = Labels::new(r.str()?, r.str()?, r.str()?);
        let data = r.f32s(c * n * d)?.into_iter().map(f64::from).collect();
        r.finish()?;
        let mut f = FeatureSegment::from_parts(labels, c, n, d, data)
            .map_err(|e| Error::artifact(origin, e.to_string()))?;
        f.index = index;
        f.span_s = span;
        f.frame_len_ms = frame_len_ms;
        f.band_hz = band;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureSegment::from_bytes(&codec::read_file(path)?, path)
    }
}

/// Frame geometry and bin selection for one (rate, frame length, band).
#[derive(Clone)]
pub struct PsdPlan {
    frame_samples: usize,
    bins: Vec<usize>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PsdPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PsdPlan")
            .field("frame_samples", &self.frame_samples)
            .field("bins", &self.bins)
            .finish()
    }
}

impl PsdPlan {
    pub fn new(sample_rate_hz: f64, frame_len_ms: f64, band_hz: (f64, f64)) -> Result<Self> {
        let frame_samples = (frame_len_ms * sample_rate_hz / 1000.0).round();
        if !(frame_samples >= 2.0) {
            return Err(Error::invalid(format!(
                "{frame_len_ms} ms at {sample_rate_hz} Hz is shorter than 2 samples"
            )));
        }
        let frame_samples = frame_samples as usize;
        let (low, high) = band_hz;
        let nyquist = sample_rate_hz / 2.0;
        if !(low > 0.0 && low < high && high <= nyquist) {
            return Err(Error::invalid(format!(
                "band ({low}, {high}) Hz must satisfy 0 < low < high <= {nyquist}"
            )));
        }
        let step = sample_rate_hz / frame_samples as f64;
        let bins: Vec<usize> = (0..=frame_samples / 2)
            .filter(|&k| {
                let f = k as f64 * step;
                f >= low * (1.0 - EDGE_TOL) && f <= high * (1.0 + EDGE_TOL)
            })
            .collect();
        if bins.is_empty() {
            return Err(Error::invalid(format!(
                "band ({low}, {high}) Hz contains no DFT bin (bin spacing {step:.3} Hz)"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(frame_samples);
        Ok(PsdPlan {
            frame_samples,
            bins,
            fft,
        })
    }

    pub fn frame_samples(&self) -> usize {
        self.frame_samples
    }

    /// Number of retained bins (the feature dimension d).
    pub fn dim(&self) -> usize {
        self.bins.len()
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.frame_samples
    }

    /// Appends the periodogram rows of every whole frame in `signal` to `out`.
    pub fn frames_into(&self, signal: &[f32], out: &mut Vec<f64>) -> Result<()> {
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("signal contains non-finite samples"));
        }
        let l = self.frame_samples;
        let mut buf = vec![Complex::new(0.0, 0.0); l];
        for frame in signal.chunks_exact(l) {
            for (b, &x) in buf.iter_mut().zip(frame) {
                *b = Complex::new(x as f64, 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(self.bins.iter().map(|&k| buf[k].norm_sqr() / l as f64));
        }
        Ok(())
    }
}

pub fn compute_psd(seg: &Segment, frame_len_ms: f64, band_hz: (f64, f64)) -> Result<FeatureSegment> {
    let plan = PsdPlan::new(seg.sample_rate_hz, frame_len_ms, band_hz)?;
    compute_psd_with(&plan, seg, frame_len_ms, band_hz)
}

/// [`compute_psd`] with a pre-built plan, for batch extraction.
pub fn compute_psd_with(
    plan: &PsdPlan,
    seg: &Segment,
    frame_len_ms: f64,
    band_hz: (f64, f64),
) -> Result<FeatureSegment> {
    let n_frames = plan.n_frames(seg.len());
    if n_frames == 0 {
        return Err(Error::invalid(format!(
            "segment of {} samples is shorter than one {}-sample frame",
            seg.len(),
            plan.frame_samples()
        )));
    }
    let mut data = Vec::with_capacity(seg.n_channels() * n_frames * plan.dim());
    for c in 0..seg.n_channels() {
        plan.frames_into(seg.channel(c), &mut data)?;
    }
    let mut f = FeatureSegment::from_parts(seg.labels.clone(), seg.n_channels(), n_frames, plan.dim(), data)?;
    f.index = seg.index;
    f.span_s = (seg.start_s, seg.start_s + seg.duration_s);
    f.frame_len_ms = frame_len_ms;
    f.band_hz = band_hz;
    Ok(f)
}
