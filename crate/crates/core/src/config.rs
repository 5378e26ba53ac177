//! Pipeline configuration, read from TOML with `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::fingerprint;
use crate::error::{Error, Result};

/// 10-20 labels of the default 9-electrode montage, in recording order.
pub const DEFAULT_MONTAGE: [&str; 9] = ["Fz", "F7", "F8", "C3", "C4", "P7", "P8", "O1", "O2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub frame_len_ms: f64,
    pub band_hz: [f64; 2],
    pub segment_s: f64,
    /// Channel names of the recordings, in storage order.
    pub montage: Vec<String>,
    /// Channels to use, by name.
    pub channels: Vec<String>,
    /// Per-segment mean/variance normalisation of every feature dimension.
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let names: Vec<String> = DEFAULT_MONTAGE.iter().map(|s| s.to_string()).collect();
        FeatureConfig {
            frame_len_ms: 360.0,
            band_hz: [3.0, 30.0],
            segment_s: 15.0,
            montage: names.clone(),
            channels: names,
            standardize: false,
        }
    }
}

impl FeatureConfig {
    /// Indices into the montage of the selected channels.
    pub fn channel_indices(&self) -> Result<Vec<usize>> {
        resolve_channels(&self.montage, &self.channels)
    }
}

pub fn resolve_channels(montage: &[String], names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Err(Error::Config("channel selection is empty".into()));
    }
    names
        .iter()
        .map(|n| {
            montage
                .iter()
                .position(|m| m.eq_ignore_ascii_case(n))
                .ok_or_else(|| Error::Config(format!("channel `{n}` is not in the montage {montage:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbmSection {
    /// Mixtures of the GMM likelihood-ratio system.
    pub gmm_mixtures: usize,
    /// Mixtures for pooled-statistics i-vectors (and the concatenation and
    /// score-fusion variants).
    pub baseline_mixtures: usize,
    /// Mixtures for per-channel-statistics i-vectors.
    pub modified_mixtures: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub relevance: f64,
}

impl Default for UbmSection {
    fn default() -> Self {
        UbmSection {
            gmm_mixtures: 32,
            baseline_mixtures: 16,
            modified_mixtures: 4,
            max_iters: 30,
            tol: 1e-4,
            relevance: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnrollMode {
    /// Mean of per-segment projected embeddings.
    Mean,
    /// One i-vector from the subject's summed statistics.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvectorSection {
    pub rank: usize,
    pub n_iters: usize,
    pub enroll: EnrollMode,
}

impl Default for IvectorSection {
    fn default() -> Self {
        IvectorSection {
            rank: 32,
            n_iters: 10,
            enroll: EnrollMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XvectorSection {
    pub h1: usize,
    pub h2: usize,
    pub embed: usize,
    /// Hidden widths of the channel-pooled network.
    pub baseline_h1: usize,
    pub baseline_h2: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for XvectorSection {
    fn default() -> Self {
        XvectorSection {
            h1: 64,
            h2: 64,
            embed: 32,
            baseline_h1: 64,
            baseline_h2: 64,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 60,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    /// Output dimension; defaults to min(input dim, subjects - 1).
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub name: String,
    /// Test segment lengths for the segment-length protocol.
    pub test_lengths_s: Vec<f64>,
    pub held_out_fraction: f64,
    /// Channel subsets, by name, for the channel-subset protocol.
    pub channel_subsets: Vec<Vec<String>>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let subsets = [&["Fz", "C3", "C4"][..], &["O1", "O2"], &["F7", "F8", "P7", "P8"], &DEFAULT_MONTAGE];
        ProtocolSection {
            name: "session-disjoint".into(),
            test_lengths_s: vec![15.0, 30.0, 60.0],
            held_out_fraction: 0.2,
            channel_subsets: subsets.iter().map(|s| s.iter().map(|c| c.to_string()).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    pub ubm: UbmSection,
    pub ivector: IvectorSection,
    pub xvector: XvectorSection,
    pub lda: LdaSection,
    pub protocol: ProtocolSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            features: FeatureConfig::default(),
            ubm: UbmSection::default(),
            ivector: IvectorSection::default(),
            xvector: XvectorSection::default(),
            lda: LdaSection::default(),
            protocol: ProtocolSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Large model sizes, suited to corpora of around 30 subjects.
    pub fn full_scale() -> Self {
        let mut c = PipelineConfig::default();
        c.ubm.gmm_mixtures = 128;
        c.ubm.baseline_mixtures = 64;
        c.ubm.modified_mixtures = 7;
        c.ivector.rank = 160;
        c.xvector.h1 = 1024;
        c.xvector.h2 = 512;
        c.xvector.embed = 160;
        c.xvector.baseline_h1 = 1024;
        c.xvector.baseline_h2 = 1024;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(PipelineConfig::default()),
            "full" => Ok(PipelineConfig::full_scale()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        PipelineConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `section.key=value` overrides; values use TOML syntax, with
    /// bare words taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut doc;
            for p in parents {
                table = table
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).expect("table serialises");
        PipelineConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.features;
        let positive = [
            ("features.frame_len_ms", f.frame_len_ms),
            ("features.segment_s", f.segment_s),
            ("ubm.tol", self.ubm.tol.max(f64::MIN_POSITIVE)),
            ("xvector.learning_rate", self.xvector.learning_rate.max(f64::MIN_POSITIVE)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(f.band_hz[0] >= 0.0 && f.band_hz[0] < f.band_hz[1]) {
            return Err(Error::Config(format!("band {:?} is not an interval", f.band_hz)));
        }
        f.channel_indices()?;
        let counts = [
            ("ubm.gmm_mixtures", self.ubm.gmm_mixtures),
            ("ubm.baseline_mixtures", self.ubm.baseline_mixtures),
            ("ubm.modified_mixtures", self.ubm.modified_mixtures),
            ("ubm.max_iters", self.ubm.max_iters),
            ("ivector.rank", self.ivector.rank),
            ("ivector.n_iters", self.ivector.n_iters),
            ("xvector.h1", self.xvector.h1),
            ("xvector.h2", self.xvector.h2),
            ("xvector.embed", self.xvector.embed),
            ("xvector.baseline_h1", self.xvector.baseline_h1),
            ("xvector.baseline_h2", self.xvector.baseline_h2),
            ("xvector.batch_size", self.xvector.batch_size),
            ("xvector.epochs", self.xvector.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.ubm.relevance < 0.0 {
            return Err(Error::Config("ubm.relevance must be >= 0".into()));
        }
        let p = &self.protocol;
        if !(p.held_out_fraction > 0.0 && p.held_out_fraction < 1.0) {
            return Err(Error::Config("protocol.held_out_fraction must lie in (0, 1)".into()));
        }
        if p.test_lengths_s.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("protocol.test_lengths_s must be positive".into()));
        }
        for subset in &p.channel_subsets {
            resolve_channels(&f.montage, subset)?;
        }
        Ok(())
    }

    /// Stable hash of the canonical serialisation.
    pub fn hash(&self) -> u64 {
        fingerprint(self.to_toml().as_bytes())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_the_standard_setup() {
        let c = PipelineConfig::default();
        assert_eq!(c.features.channels, DEFAULT_MONTAGE);
        assert_eq!(c.features.segment_s, 15.0);
        assert_eq!(c.features.frame_len_ms, 360.0);
        assert_eq!(c.features.band_hz, [3.0, 30.0]);
        assert_eq!(c.features.channel_indices().unwrap(), (0..9).collect::<Vec<_>>());
        let p = PipelineConfig::full_scale();
        assert_eq!((p.ubm.gmm_mixtures, p.ubm.baseline_mixtures, p.ubm.modified_mixtures), (128, 64, 7));
        assert_eq!((p.ivector.rank, p.xvector.h1, p.xvector.h2, p.xvector.embed), (160, 1024, 512, 160));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = PipelineConfig::from_toml("seed = 4\n[ubm]\nmodified_mixtures = 8\n").unwrap();
        assert_eq!((partial.seed, partial.ubm.modified_mixtures, partial.ivector.rank), (4, 8, 32));
        assert_ne!(partial.hash(), c.hash());
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::default()
            .with_overrides(&[
                "ubm.modified_mixtures=4".into(),
                "features.channels=[\"O1\",\"o2\"]".into(),
                "protocol.name=leave-task-out".into(),
            ])
            .unwrap();
        assert_eq!(c.ubm.modified_mixtures, 4);
        assert_eq!(c.features.channel_indices().unwrap(), vec![7, 8]);
        assert_eq!(c.protocol.name, "leave-task-out");
        assert!(PipelineConfig::default().with_overrides(&["nope.x=1".into()]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["ubm.modified_mixtures".into()]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PipelineConfig::from_toml("[features]\nchannels = [\"Cz\"]\n").is_err());
        assert!(PipelineConfig::from_toml("[ubm]\ngmm_mixtures = 0\n").is_err());
        assert!(PipelineConfig::from_toml("[ubm]\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[features]\nsegment_s = -1.0\n").is_err());
        assert!(PipelineConfig::preset("huge").is_err());
    }
}
