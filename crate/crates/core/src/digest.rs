//! SHA-256 content digests used for caching, provenance and stub seeding.

use std::path::Path;

use image::{GrayImage, RgbImage};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

/// Incremental digest over length-prefixed fields, so that
/// `("ab", "c")` and `("a", "bc")` never collide.
#[derive(Clone, Default)]
pub struct Hasher {
    inner: Sha256,
}

impl Hasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Hasher::default();
        h.field(domain.as_bytes());
        h
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.field(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.field(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.field(&v.to_bits().to_le_bytes())
    }

    pub fn raster(&mut self, img: &RgbImage) -> &mut Self {
        self.u64(img.width() as u64)
            .u64(img.height() as u64)
            .field(img.as_raw())
    }

    pub fn finish_bytes(&self) -> [u8; 32] {
        let out = self.inner.clone().finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(out.as_slice());
        bytes
    }

    pub fn finish(&self) -> String {
        hex::encode(self.finish_bytes())
    }

    /// First 8 bytes of the digest as an integer, for seeding.
    pub fn finish_u64(&self) -> u64 {
        let b = self.finish_bytes();
        u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
    }
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

pub fn text_digest(text: &str) -> String {
    bytes_digest(text.as_bytes())
}

/// Digest of an RGB raster's dimensions and pixel data.
pub fn raster_digest(img: &RgbImage) -> String {
    Hasher::new("raster").raster(img).finish()
}

/// Digest of a single-channel raster's dimensions and pixel data.
pub fn gray_digest(img: &GrayImage) -> String {
    Hasher::new("gray")
        .u64(img.width() as u64)
        .u64(img.height() as u64)
        .field(img.as_raw())
        .finish()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_digest(&bytes))
}

/// Digest over every regular file under `dir`, keyed by relative path, in
/// sorted order. Renaming `dir` itself does not change the result.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Hasher::new("dir");
    for rel in &files {
        let bytes = std::fs::read(dir.join(rel)).map_err(|e| Error::io(dir.join(rel), e))?;
        h.str(rel).field(&bytes);
    }
    Ok(h.finish())
}

pub(crate) fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(|e| Error::io(&path, e))?;
        if ft.is_dir() {
            collect_files(root, &path, out)?;
        } else if ft.is_file() {
            let rel = path
                .strip_prefix(root)
                .expect("walked path under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}
