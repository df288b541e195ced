//! Edge-conditioned appearance generation over the structure views.

pub mod canny;
mod bundle;

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;

use crate::backends::{
    call_digests, BackendKind, Backends, GenerationRequest, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use crate::digest::{gray_digest, raster_digest};
use crate::error::{Error, Result};
use crate::raster::gray_to_rgb;
use crate::structure::StructureViews;
use crate::vqa::{SubjectEmbedding, VehiclePrompt};

pub use bundle::{
    export_bundle, load_bundle, validate_bundle_dir, AssetBundle, Provenance, ViewRecord,
    POSES_FILE, PROMPT_FILE, PROVENANCE_FILE,
};
pub use canny::{canny, CannyParams, EdgeMap};

pub const STAGE: &str = "appearance";
pub const DEGRADED_MASK_WARNING: &str = "degraded-mask: segmentation found no foreground";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppearanceOptions {
    pub canny: CannyParams,
    pub steps: u32,
    pub guidance: f64,
    /// Return a bundle with holes instead of failing when some views fail.
    pub allow_partial: bool,
}

impl Default for AppearanceOptions {
    fn default() -> Self {
        AppearanceOptions {
            canny: CannyParams::default(),
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            allow_partial: false,
        }
    }
}

pub fn edge_file_name(index: usize) -> String {
    format!("edge_{index:02}.png")
}

/// View `i` is generated from the edge map of structure view `i` with seed
/// `seed + i`, the prompt answer, and the shared subject embedding.
pub fn render_appearance(
    backends: &Backends,
    structure: &StructureViews,
    subject: &SubjectEmbedding,
    prompt: &VehiclePrompt,
    seed: u64,
    options: &AppearanceOptions,
) -> Result<AssetBundle> {
    let n = structure.ring.n_views;
    if structure.views.len() != n || structure.ring.poses.len() != n {
        return Err(Error::invalid(format!(
            "{} structure views for a {n}-view ring",
            structure.views.len()
        )));
    }
    if prompt.answer.trim().is_empty() {
        return Err(Error::invalid("prompt answer is empty"));
    }
    if (subject.vector.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("subject embedding is not unit-norm"));
    }
    options.canny.validate()?;
    backends.trace().set_stage(STAGE);
    let mark = backends.trace().len();

    let edge_maps: Vec<EdgeMap> = structure
        .views
        .par_iter()
        .map(|v| canny(v, &options.canny))
        .collect::<Result<_>>()?;

    let outcomes: Vec<(u64, String, Result<RgbImage>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (w, h) = structure.views[i].dimensions();
            let view_seed = seed.wrapping_add(i as u64);
            let req = GenerationRequest::new(&prompt.answer, view_seed, w, h)
                .with_condition(gray_to_rgb(&edge_maps[i].raster))
                .with_subject(subject.vector.values.clone())
                .with_sampler(options.steps, options.guidance);
            let digest = req.digest(BackendKind::Edge2image);
            (view_seed, digest, backends.generate(BackendKind::Edge2image, &req))
        })
        .collect();

    let mut views = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut failed = Vec::new();
    for (i, (view_seed, request_digest, outcome)) in outcomes.into_iter().enumerate() {
        let view = match outcome {
            Ok(img) => Some(img),
            Err(e) if !e.is_backend() => return Err(Error::stage(STAGE, e)),
            Err(e) => {
                log::error!("view {i} failed: {e}");
                failed.push(i);
                None
            }
        };
        records.push(ViewRecord {
            index: i,
            azimuth_deg: structure.ring.poses[i].azimuth_deg,
            seed: view_seed,
            structure_digest: raster_digest(&structure.views[i]),
            edge_digest: gray_digest(&edge_maps[i].raster),
            view_digest: view.as_ref().map(raster_digest),
            request_digest,
        });
        views.push(view);
    }
    if !failed.is_empty() && !options.allow_partial {
        return Err(Error::ViewsFailed { indices: failed });
    }

    let mut warnings = structure.warnings.clone();
    if subject.degraded_mask {
        warnings.push(DEGRADED_MASK_WARNING.into());
    }
    if !failed.is_empty() {
        warnings.push(format!("partial bundle: views {failed:?} failed"));
    }
    let mut trace_digests = BTreeMap::new();
    trace_digests.insert(crate::structure::STAGE.to_string(), structure.trace_digests.clone());
    trace_digests.insert(STAGE.to_string(), call_digests(&backends.trace().records_since(mark)));

    let provenance = Provenance {
        seed,
        canny: options.canny,
        steps: options.steps,
        guidance: options.guidance,
        backends: backends.descriptors().clone(),
        subject_digest: subject.vector.digest(),
        degraded_mask: subject.degraded_mask,
        anchor_consistency: structure.anchor_consistency.clone(),
        structure_origins: structure.origins.clone(),
        warnings,
        failed_views: failed,
        views: records,
        trace_digests,
        context: BTreeMap::new(),
    };
    Ok(AssetBundle {
        views,
        edge_maps,
        ring: structure.ring.clone(),
        prompt: prompt.clone(),
        provenance,
    })
}
