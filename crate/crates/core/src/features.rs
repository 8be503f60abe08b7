//! `FCF1` feature files and the deterministic toy image encoder.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCF1" | version u32 | count u32 | dim u32
//! count × (key_len u16 | key bytes, UTF-8)
//! count × dim × f32            payload, in index order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FCF1";
pub const FEATURE_VERSION: u32 = 1;

/// Keyed feature vectors in file order.
pub type FeatureMap = IndexMap<String, Vec<f64>>;

pub fn write_features(
    path: impl AsRef<Path>,
    pairs: &[(String, Vec<f64>)],
    dim: usize,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(pairs, dim)?)
}

/// The `FCF1` bytes for `pairs`; values are narrowed to f32.
pub fn encode_features(pairs: &[(String, Vec<f64>)], dim: usize) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for (key, v) in pairs {
        if v.len() != dim {
            return Err(Error::Format(format!(
                "feature {key:?} has length {} but dim is {dim}",
                v.len()
            )));
        }
        if !seen.insert(key.as_str()) {
            return Err(Error::Format(format!("duplicate feature key {key:?}")));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Format(format!("feature key {key:?} is too long")));
        }
    }
    let mut buf = Vec::with_capacity(16 + pairs.len() * (dim * 4 + 18));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(pairs.len(), "count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    for (key, _) in pairs {
        buf.extend_from_slice(&(key.len() as u16).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
    }
    for (_, v) in pairs {
        for &x in v {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_features(&fs::read(path.as_ref())?)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FCF1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported FCF1 version {version}")));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut keys = Vec::with_capacity(count);
    for _ in 0..count {
        keys.push(r.string_u16()?);
    }
    let expected = count * dim * 4;
    let remaining = r.remaining();
    if remaining != expected {
        return Err(Error::Format(format!(
            "payload holds {remaining} bytes, expected {expected} ({count} x {dim} f32)"
        )));
    }
    let mut map = FeatureMap::with_capacity(count);
    for key in keys {
        let v = r.f32s(dim)?;
        if map.insert(key.clone(), v).is_some() {
            return Err(Error::Format(format!("duplicate feature key {key:?}")));
        }
    }
    Ok(map)
}

/// Deterministic unit-norm stand-in for an image embedding, derived from a
/// SHA-256 of `(seed, key)`. Identical on every platform.
pub fn toy_image_encoder(key: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim > 0, "toy encoder dim must be positive");
    let mut hasher = Sha256::new();
    hasher.update(b"figcap-toy-image");
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha20Rng::from_seed(rng_seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Where image embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    /// [`toy_image_encoder`] keyed by feature reference.
    Toy { dim: usize, seed: u64 },
    /// Vectors loaded from an `FCF1` file.
    File(FeatureMap),
}

impl FeatureSource {
    pub fn dim(&self) -> Option<usize> {
        match self {
            FeatureSource::Toy { dim, .. } => Some(*dim),
            FeatureSource::File(map) => map.values().next().map(Vec::len),
        }
    }

    pub fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        match self {
            FeatureSource::Toy { dim, seed } => Ok(toy_image_encoder(key, *dim, *seed)),
            FeatureSource::File(map) => map
                .get(key)
                .cloned()
                .ok_or_else(|| Error::MissingFeature(key.to_string())),
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string_u16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("key at offset {} is not UTF-8", self.pos - len)))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}
