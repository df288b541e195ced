//! Content-addressed stage cache.
//!
//! ```text
//! <cache_dir>/entries/<stage>-<key>.json   one CacheEntry per stage run
//! <cache_dir>/objects/<stage>/<key>/...     files produced by that run
//! ```
//!
//! Keys are digests of the stage inputs, so moving or renaming the cache
//! directory never invalidates work. An entry records the digest of every
//! file it owns and only counts as a hit while all of them still match.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vqadiff_core::digest::{file_digest, Hasher};
use vqadiff_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataset,
    Experts,
    Prompt,
    Structure,
    Appearance,
    Eval,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Experts => "experts",
            Stage::Prompt => "prompt",
            Stage::Structure => "structure",
            Stage::Appearance => "appearance",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub stage: Stage,
    pub key: String,
    /// Named digests of the inputs that make up the key.
    pub inputs: BTreeMap<String, String>,
    /// Produced files relative to the cache root, with their digests.
    pub paths: BTreeMap<String, String>,
}

/// Accumulates named inputs into a stage key.
#[derive(Debug, Clone)]
pub struct KeyBuilder {
    stage: Stage,
    inputs: BTreeMap<String, String>,
}

impl KeyBuilder {
    pub fn new(stage: Stage) -> Self {
        KeyBuilder {
            stage,
            inputs: BTreeMap::new(),
        }
    }

    /// Adds an input that is already a digest.
    pub fn digest(mut self, name: &str, digest: impl Into<String>) -> Self {
        self.inputs.insert(name.to_string(), digest.into());
        self
    }

    /// Adds a serializable input through its canonical JSON.
    pub fn value<T: Serialize>(self, name: &str, value: &T) -> Self {
        let json = vqadiff_core::json::to_canonical_string(value).expect("cache inputs serialize");
        let d = Hasher::new("cache-input").str(&json).finish();
        self.digest(name, d)
    }

    pub fn finish(self) -> (String, BTreeMap<String, String>) {
        let mut h = Hasher::new("cache-key");
        h.str(self.stage.as_str());
        for (k, v) in &self.inputs {
            h.str(k).str(v);
        }
        (h.finish(), self.inputs)
    }
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .expect("cache paths live under the root")
        .to_string_lossy()
        .replace('\\', "/")
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Cache {
    pub fn open(root: &Path) -> Cache {
        Cache { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, stage: Stage, key: &str) -> PathBuf {
        self.root.join("entries").join(format!("{stage}-{key}.json"))
    }

    /// Directory owned by one stage run.
    pub fn object_dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.root.join("objects").join(stage.as_str()).join(key)
    }

    /// A stored entry whose files all still match their digests.
    pub fn lookup(&self, stage: Stage, key: &str) -> Option<CacheEntry> {
        let path = self.entry_path(stage, key);
        let entry: CacheEntry = vqadiff_core::json::read_json(&path).ok()?;
        let intact = entry
            .paths
            .iter()
            .all(|(p, d)| file_digest(&self.root.join(p)).is_ok_and(|x| &x == d));
        if intact {
            Some(entry)
        } else {
            log::warn!("cache entry {} is stale and will be rebuilt", path.display());
            None
        }
    }

    /// Clears the object directory for a fresh run of `stage`.
    pub fn prepare(&self, stage: Stage, key: &str) -> Result<PathBuf> {
        let dir = self.object_dir(stage, key);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(dir)
    }

    /// Records every file under the stage's object directory.
    pub fn commit(&self, stage: Stage, key: &str, inputs: BTreeMap<String, String>) -> Result<CacheEntry> {
        let mut files = Vec::new();
        walk(&self.object_dir(stage, key), &mut files)?;
        let mut paths = BTreeMap::new();
        for f in files {
            paths.insert(rel(&self.root, &f), file_digest(&f)?);
        }
        let entry = CacheEntry {
            stage,
            key: key.to_string(),
            inputs,
            paths,
        };
        let path = self.entry_path(stage, key);
        let dir = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let tmp = path.with_extension("json.tmp");
        vqadiff_core::json::write_canonical(&tmp, &entry)?;
        std::fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        Ok(entry)
    }

    pub fn entries(&self) -> Result<Vec<CacheEntry>> {
        let mut files = Vec::new();
        walk(&self.root.join("entries"), &mut files)?;
        files.sort();
        files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "json"))
            .map(|f| vqadiff_core::json::read_json(f))
            .collect()
    }

    /// Checks that every file under the cache belongs to exactly one entry
    /// and that every entry's files are present and unchanged.
    pub fn audit(&self) -> Result<AuditReport> {
        let mut report = AuditReport::default();
        let mut owners: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut entry_files = Vec::new();
        walk(&self.root.join("entries"), &mut entry_files)?;
        for f in &entry_files {
            let name = rel(&self.root, f);
            let entry: CacheEntry = match vqadiff_core::json::read_json(f) {
                Ok(e) => e,
                Err(e) => {
                    report.unreadable.push(format!("{name}: {e}"));
                    continue;
                }
            };
            if self.entry_path(entry.stage, &entry.key) != *f {
                report.unreadable.push(format!("{name}: stage/key do not match the file name"));
            }
            report.entries += 1;
            for (p, d) in &entry.paths {
                owners.entry(p.clone()).or_default().push(name.clone());
                match file_digest(&self.root.join(p)) {
                    Err(_) => report.missing.push(p.clone()),
                    Ok(x) if &x != d => report.modified.push(p.clone()),
                    Ok(_) => {}
                }
            }
        }
        let mut objects = Vec::new();
        walk(&self.root.join("objects"), &mut objects)?;
        for f in objects {
            let p = rel(&self.root, &f);
            if !owners.contains_key(&p) {
                report.orphans.push(p);
            }
        }
        let mut stray = Vec::new();
        walk(&self.root, &mut stray)?;
        for f in stray {
            let p = rel(&self.root, &f);
            if !(p.starts_with("entries/") || p.starts_with("objects/")) {
                report.orphans.push(p);
            }
        }
        report.shared = owners
            .into_iter()
            .filter(|(_, o)| o.len() > 1)
            .map(|(p, o)| format!("{p} ({})", o.join(", ")))
            .collect();
        report.orphans.sort();
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub entries: usize,
    pub orphans: Vec<String>,
    pub missing: Vec<String>,
    pub modified: Vec<String>,
    pub shared: Vec<String>,
    pub unreadable: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty()
            && self.missing.is_empty()
            && self.modified.is_empty()
            && self.shared.is_empty()
            && self.unreadable.is_empty()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let groups = [
            ("orphan file", &self.orphans),
            ("missing file", &self.missing),
            ("modified file", &self.modified),
            ("file owned by several entries", &self.shared),
            ("unreadable entry", &self.unreadable),
        ];
        for (label, items) in groups {
            out.extend(items.iter().map(|i| format!("{label}: {i}")));
        }
        out
    }
}
