//! Little-endian binary encoding shared by every on-disk artifact.
//!
//! Each artifact starts with a five-byte ASCII magic followed by its own
//! header. Model artifacts also carry a [`Provenance`] block so that a
//! pipeline can refuse to mix outputs of different configurations.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = concat!("ixvector ", env!("CARGO_PKG_VERSION"));

/// Who produced an artifact, and from what.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: u64,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: u64, seed: u64) -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            config_hash,
            seed,
        }
    }

    pub fn write(&self, w: &mut Writer) {
        w.str(&self.tool_version);
        w.u64(self.config_hash);
        w.u64(self.seed);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Provenance {
            tool_version: r.str()?,
            config_hash: r.u64()?,
            seed: r.u64()?,
        })
    }
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance::new(0, 0)
    }
}

/// First eight bytes of the SHA-256 digest, read little-endian.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 5]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// u32 byte length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    origin: PathBuf,
}

impl<'a> Reader<'a> {
    /// Checks the magic and positions the reader right after it.
    pub fn open(data: &'a [u8], magic: &[u8; 5], origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        if data.len() < 5 || &data[..5] != magic {
            let found = String::from_utf8_lossy(&data[..data.len().min(5)]).into_owned();
            return Err(Error::artifact(
                origin,
                format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    found
                ),
            ));
        }
        Ok(Reader {
            data,
            pos: 5,
            origin,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::artifact(
                self.origin.clone(),
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("label is not UTF-8"))
    }

    pub fn corrupt(&self, msg: &str) -> Error {
        Error::artifact(self.origin.clone(), msg.to_string())
    }

    /// Errors if unread bytes remain.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt(&format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::artifact(path, format!("cannot read: {e}")))
}

/// Writes through a sibling temp file and renames, so a crash never leaves
/// a half-written artifact under the final name.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a text artifact whose first line is `# <provenance>`.
pub fn write_text_with(path: &Path, prov: &Provenance, body: &[u8]) -> Result<()> {
    let mut bytes = format!(
        "# {} config_hash={:016x} seed={}\n",
        prov.tool_version, prov.config_hash, prov.seed
    )
    .into_bytes();
    bytes.extend_from_slice(body);
    write_file(path, &bytes)
}

/// Reads a file written by [`write_text_with`], returning its provenance and
/// the remaining body.
pub fn read_text_with(path: &Path) -> Result<(Provenance, Vec<u8>)> {
    let bytes = read_file(path)?;
    let bad = || Error::artifact(path, "missing `# <tool> config_hash=.. seed=..` provenance line");
    let end = bytes.iter().position(|&b| b == b'\n').ok_or_else(bad)?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| bad())?.trim_end();
    let rest = line.strip_prefix("# ").ok_or_else(bad)?;
    let (rest, seed) = rest.rsplit_once(" seed=").ok_or_else(bad)?;
    let (tool, hash) = rest.rsplit_once(" config_hash=").ok_or_else(bad)?;
    let prov = Provenance {
        tool_version: tool.to_string(),
        config_hash: u64::from_str_radix(hash, 16).map_err(|_| bad())?,
        seed: seed.parse().map_err(|_| bad())?,
    };
    Ok((prov, bytes[end + 1..].to_vec()))
}
