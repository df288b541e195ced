//! Training-pair construction from rendered view rings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{neighbor_id, StructureLayout, ANCHOR_ID, SINGLE_DM_ID};
use crate::backends::Backends;
use crate::digest::{bytes_digest, Hasher};
use crate::error::{Error, Result};
use crate::geometry::view_file_name;
use crate::grid::tile_square;
use crate::raster::{decode_png, encode_png};
use crate::vqa::{extract_description, VehiclePrompt};

pub const DATASETS_FILE: &str = "datasets.json";

/// One line of a dataset manifest. Anchor pairs carry `prompt`, neighbor
/// pairs carry `anchor_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_path: Option<String>,
    pub target_grid_path: String,
    pub expert_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDatasets {
    pub layout: StructureLayout,
    pub instances: Vec<String>,
    /// expert id → JSON-lines manifest path
    pub manifests: BTreeMap<String, PathBuf>,
    /// expert id → digest over prompts, anchor images and target grids
    pub digests: BTreeMap<String, String>,
    pub pair_count: usize,
}

impl TrainingDatasets {
    pub fn read(path: &Path) -> Result<Self> {
        crate::json::read_json(path)
    }

    pub fn read_pairs(&self, expert_id: &str) -> Result<Vec<TrainingPair>> {
        let path = self
            .manifests
            .get(expert_id)
            .ok_or_else(|| Error::invalid(format!("no dataset for {expert_id}")))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Sorted names of the sub-directories of `render_root`.
pub fn discover_instances(render_root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(render_root).map_err(|e| Error::io(render_root, e))? {
        let entry = entry.map_err(|e| Error::io(render_root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Reads and checks all views of one rendered instance.
pub fn load_instance_views(render_root: &Path, instance: &str, n_views: usize) -> Result<Vec<RgbImage>> {
    let dir = render_root.join(instance);
    let missing: Vec<usize> = (0..n_views)
        .filter(|&i| !dir.join(view_file_name(i)).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteInstance {
            instance: instance.to_string(),
            missing,
        });
    }
    let corrupt = |view, message: String| Error::CorruptView {
        instance: instance.to_string(),
        view,
        message,
    };
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let path = dir.join(view_file_name(i));
        let bytes = std::fs::read(&path).map_err(|e| corrupt(i, e.to_string()))?;
        let img = decode_png(&bytes).map_err(|e| corrupt(i, e.to_string()))?;
        let (w, h) = img.dimensions();
        if w != h || w == 0 {
            return Err(corrupt(i, format!("view is {w}x{h}, expected a square")));
        }
        if let Some(first) = views.first().map(|v: &RgbImage| v.width()) {
            if w != first {
                return Err(corrupt(i, format!("view is {w}px, view 0 is {first}px")));
            }
        }
        views.push(img);
    }
    Ok(views)
}

fn prompt_paths(render_root: &Path, out_dir: &Path, instance: &str) -> [PathBuf; 2] {
    let name = format!("{instance}_prompt.json");
    [
        render_root.join(instance).join(&name),
        out_dir.join("prompts").join(name),
    ]
}

fn instance_prompt(
    render_root: &Path,
    out_dir: &Path,
    instance: &str,
    view0: &RgbImage,
    prompter: Option<&Backends>,
) -> Result<String> {
    let paths = prompt_paths(render_root, out_dir, instance);
    if let Some(existing) = paths.iter().find(|p| p.is_file()) {
        return Ok(VehiclePrompt::read(existing)?.answer);
    }
    let backends = prompter.ok_or_else(|| {
        Error::invalid(format!(
            "instance {instance} has no {instance}_prompt.json and no VQA backend was given"
        ))
    })?;
    let prompt = extract_description(backends, view0)?;
    let dest = &paths[1];
    std::fs::create_dir_all(dest.parent().expect("prompt path has a parent"))
        .map_err(|e| Error::io(dest, e))?;
    prompt.write(dest)?;
    Ok(prompt.answer)
}

struct Built {
    pairs: Vec<(TrainingPair, String)>,
}

fn build_instance(
    render_root: &Path,
    out_dir: &Path,
    instance: &str,
    layout: &StructureLayout,
    prompter: Option<&Backends>,
) -> Result<Built> {
    let views = load_instance_views(render_root, instance, layout.n_views())?;
    let prompt = instance_prompt(render_root, out_dir, instance, &views[0], prompter)?;
    let grid_dir = out_dir.join("grids");
    let write_grid = |name: String, img: &RgbImage| -> Result<(String, Vec<u8>)> {
        let path = grid_dir.join(name);
        let bytes = encode_png(img)?;
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok((path.to_string_lossy().into_owned(), bytes))
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| views[i].clone()).collect::<Vec<_>>();
    let prompt_key = Hasher::new("prompt").str(&prompt).finish();
    let mut pairs = Vec::new();
    match layout {
        StructureLayout::MultiExpert { assignment } => {
            let side = layout.anchor_grid_side();
            let anchors = tile_square(&pick(&assignment.anchor_indices), side)?;
            let (path, bytes) = write_grid(format!("{instance}_anchorgrid.png"), &anchors)?;
            pairs.push((
                TrainingPair {
                    instance_id: instance.into(),
                    prompt: Some(prompt.clone()),
                    anchor_path: None,
                    target_grid_path: path,
                    expert_id: ANCHOR_ID.into(),
                },
                Hasher::new("pair").str(&prompt_key).str(&bytes_digest(&bytes)).finish(),
            ));
            for (k, &a) in assignment.anchor_indices.iter().enumerate() {
                let grid = tile_square(&pick(assignment.block(k)), layout.neighbor_grid_side())?;
                let (path, bytes) = write_grid(format!("{instance}_expert{k}.png"), &grid)?;
                let anchor_file = render_root.join(instance).join(view_file_name(a));
                let anchor_bytes = std::fs::read(&anchor_file).map_err(|e| Error::io(&anchor_file, e))?;
                pairs.push((
                    TrainingPair {
                        instance_id: instance.into(),
                        prompt: None,
                        anchor_path: Some(anchor_file.to_string_lossy().into_owned()),
                        target_grid_path: path,
                        expert_id: neighbor_id(k),
                    },
                    Hasher::new("pair")
                        .str(&bytes_digest(&anchor_bytes))
                        .str(&bytes_digest(&bytes))
                        .finish(),
                ));
            }
        }
        StructureLayout::SingleDm { grid_side, .. } => {
            let grid = tile_square(&views, *grid_side)?;
            let (path, bytes) = write_grid(format!("{instance}_singlegrid.png"), &grid)?;
            pairs.push((
                TrainingPair {
                    instance_id: instance.into(),
                    prompt: Some(prompt),
                    anchor_path: None,
                    target_grid_path: path,
                    expert_id: SINGLE_DM_ID.into(),
                },
                Hasher::new("pair").str(&prompt_key).str(&bytes_digest(&bytes)).finish(),
            ));
        }
    }
    Ok(Built { pairs })
}

/// Tiles each instance's rendered views into training grids and writes
/// one JSON-lines manifest per expert plus `datasets.json` into `out_dir`.
///
/// A prompt per instance is taken from `<instance>_prompt.json` in the
/// instance directory, or from a previous run's `prompts/` directory, or
/// produced by asking the canonical question about view 0 via `prompter`.
pub fn build_training_pairs(
    render_root: &Path,
    instances: &[String],
    out_dir: &Path,
    layout: &StructureLayout,
    prompter: Option<&Backends>,
) -> Result<TrainingDatasets> {
    if instances.is_empty() {
        return Err(Error::invalid("no instances to build"));
    }
    let grid_dir = out_dir.join("grids");
    std::fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    let built: Vec<Built> = instances
        .par_iter()
        .map(|inst| build_instance(render_root, out_dir, inst, layout, prompter))
        .collect::<Result<_>>()?;

    let mut manifests = BTreeMap::new();
    let mut digests = BTreeMap::new();
    let mut pair_count = 0;
    for id in layout.expert_ids() {
        let mut lines = String::new();
        let mut h = Hasher::new("dataset");
        h.str(&id);
        for (pair, key) in built.iter().flat_map(|b| &b.pairs).filter(|(p, _)| p.expert_id == id) {
            let value = serde_json::to_value(pair)?;
            lines.push_str(&serde_json::to_string(&value)?);
            lines.push('\n');
            h.str(&pair.instance_id).str(key);
            pair_count += 1;
        }
        let path = out_dir.join(format!("{id}.jsonl"));
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        manifests.insert(id.clone(), path);
        digests.insert(id, h.finish());
    }
    let datasets = TrainingDatasets {
        layout: layout.clone(),
        instances: instances.to_vec(),
        manifests,
        digests,
        pair_count,
    };
    crate::json::write_canonical(&out_dir.join(DATASETS_FILE), &datasets)?;
    Ok(datasets)
}
