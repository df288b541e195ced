//! Asset bundle layout on disk:
//! `view_NN.png`, `edge_NN.png`, `poses.json`, `prompt.json`,
//! `provenance.json`. Nothing time-dependent is written, so identical
//! inputs give byte-identical directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{edge_file_name, CannyParams, EdgeMap};
use crate::backends::{call_digests, BackendDescriptor, BackendKind, TraceRecord};
use crate::digest::{gray_digest, raster_digest};
use crate::error::{Error, Result};
use crate::geometry::{view_file_name, CameraRing};
use crate::json;
use crate::raster::{read_gray_png, read_png, write_gray_png, write_png};
use crate::structure::ViewOrigin;
use crate::vqa::VehiclePrompt;

pub const POSES_FILE: &str = "poses.json";
pub const PROMPT_FILE: &str = "prompt.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub index: usize,
    pub azimuth_deg: f64,
    pub seed: u64,
    pub structure_digest: String,
    pub edge_digest: String,
    /// Absent when generation failed for this view.
    pub view_digest: Option<String>,
    pub request_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub canny: CannyParams,
    pub steps: u32,
    pub guidance: f64,
    pub backends: BTreeMap<BackendKind, BackendDescriptor>,
    pub subject_digest: String,
    pub degraded_mask: bool,
    pub anchor_consistency: Vec<f64>,
    pub structure_origins: Vec<ViewOrigin>,
    pub warnings: Vec<String>,
    pub failed_views: Vec<usize>,
    pub views: Vec<ViewRecord>,
    /// stage → sorted call digests
    pub trace_digests: BTreeMap<String, Vec<String>>,
    /// Free-form records added by the caller (configuration, experts).
    pub context: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetBundle {
    /// `None` marks a view whose generation failed in a partial bundle.
    pub views: Vec<Option<RgbImage>>,
    pub edge_maps: Vec<EdgeMap>,
    pub ring: CameraRing,
    pub prompt: VehiclePrompt,
    pub provenance: Provenance,
}

impl AssetBundle {
    pub fn is_complete(&self) -> bool {
        self.views.iter().all(Option::is_some)
    }

    /// All views, or a validation error naming the missing ones.
    pub fn complete_views(&self) -> Result<Vec<&RgbImage>> {
        let missing: Vec<String> = self
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| format!("view {i} is missing"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        Ok(self.views.iter().flatten().collect())
    }

    /// Checks lengths and that every raster matches its provenance digest.
    pub fn verify(&self) -> Result<()> {
        let n = self.ring.n_views;
        let mut problems = Vec::new();
        if self.views.len() != n || self.edge_maps.len() != n || self.provenance.views.len() != n {
            problems.push(format!(
                "length mismatch: {} views, {} edge maps, {} records, {n} poses",
                self.views.len(),
                self.edge_maps.len(),
                self.provenance.views.len()
            ));
        }
        for (i, rec) in self.provenance.views.iter().enumerate().take(n) {
            if rec.index != i {
                problems.push(format!("record {i} claims index {}", rec.index));
            }
            if let Some(e) = self.edge_maps.get(i) {
                if gray_digest(&e.raster) != rec.edge_digest {
                    problems.push(format!("edge map {i} does not match its digest"));
                }
            }
            if let Some(v) = self.views.get(i) {
                if v.as_ref().map(raster_digest) != rec.view_digest {
                    problems.push(format!("view {i} does not match its digest"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Checks that the recorded calls of `stage` all appear in `records`.
    pub fn verify_trace(&self, stage: &str, records: &[TraceRecord]) -> Result<()> {
        let logged = call_digests(records);
        let missing: Vec<String> = self
            .provenance
            .trace_digests
            .get(stage)
            .into_iter()
            .flatten()
            .filter(|d| logged.binary_search(d).is_err())
            .map(|d| format!("call {d} is not in the trace log"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(missing))
        }
    }
}

fn export_inner(bundle: &AssetBundle, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, v) in bundle.views.iter().enumerate() {
        if let Some(img) = v {
            write_png(&out_dir.join(view_file_name(i)), img)?;
        }
    }
    for (i, e) in bundle.edge_maps.iter().enumerate() {
        write_gray_png(&out_dir.join(edge_file_name(i)), &e.raster)?;
    }
    json::write_canonical(&out_dir.join(POSES_FILE), &bundle.ring)?;
    json::write_canonical(&out_dir.join(PROMPT_FILE), &bundle.prompt)?;
    json::write_canonical(&out_dir.join(PROVENANCE_FILE), &bundle.provenance)
}

pub fn export_bundle(bundle: &AssetBundle, out_dir: &Path) -> Result<PathBuf> {
    bundle.verify()?;
    export_inner(bundle, out_dir).map_err(|e| Error::Export {
        path: out_dir.to_path_buf(),
        source: Box::new(e),
    })?;
    Ok(out_dir.to_path_buf())
}

/// Lists every expected file missing from a bundle directory.
pub fn validate_bundle_dir(dir: &Path) -> Result<()> {
    let mut missing = Vec::new();
    for f in [POSES_FILE, PROMPT_FILE, PROVENANCE_FILE] {
        if !dir.join(f).is_file() {
            missing.push(format!("{f} is missing"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }
    let ring: CameraRing = json::read_json(&dir.join(POSES_FILE))?;
    let prov: Provenance = json::read_json(&dir.join(PROVENANCE_FILE))?;
    for i in 0..ring.n_views {
        if !prov.failed_views.contains(&i) && !dir.join(view_file_name(i)).is_file() {
            missing.push(format!("{} is missing", view_file_name(i)));
        }
        if !dir.join(edge_file_name(i)).is_file() {
            missing.push(format!("{} is missing", edge_file_name(i)));
        }
    }
    if prov.views.len() != ring.n_views {
        missing.push(format!(
            "provenance lists {} views, poses list {}",
            prov.views.len(),
            ring.n_views
        ));
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(missing))
    }
}

pub fn load_bundle(dir: &Path) -> Result<AssetBundle> {
    validate_bundle_dir(dir)?;
    let ring: CameraRing = json::read_json(&dir.join(POSES_FILE))?;
    let prompt: VehiclePrompt = json::read_json(&dir.join(PROMPT_FILE))?;
    let provenance: Provenance = json::read_json(&dir.join(PROVENANCE_FILE))?;
    let mut views = Vec::with_capacity(ring.n_views);
    let mut edge_maps = Vec::with_capacity(ring.n_views);
    for i in 0..ring.n_views {
        views.push(if provenance.failed_views.contains(&i) {
            None
        } else {
            Some(read_png(&dir.join(view_file_name(i)))?)
        });
        edge_maps.push(EdgeMap {
            raster: read_gray_png(&dir.join(edge_file_name(i)))?,
            params: provenance.canny,
        });
    }
    let bundle = AssetBundle {
        views,
        edge_maps,
        ring,
        prompt,
        provenance,
    };
    bundle.verify()?;
    Ok(bundle)
}
