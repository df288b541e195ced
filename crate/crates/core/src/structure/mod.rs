//! Multi-expert structure generation: one text-to-grid anchor expert and
//! one image-to-grid neighbor expert per anchor.
//!
//! The anchor expert draws every anchor view into one grid. Each neighbor
//! expert expands its anchor into the block of views that follow it in
//! azimuth, with a regenerated anchor at quadrant 0. Those regenerated
//! anchors are the ones kept in the assembled ring.

mod dataset;
mod training;

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    call_digests, BackendDescriptor, BackendKind, Backends, EmbedContent, GenerationRequest,
    STUB_ENDPOINT,
};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::geometry::CameraRing;
use crate::grid::{expert_assignment, split_square, ExpertAssignment, DEFAULT_SUB_SIZE};
use crate::vqa::VehiclePrompt;

pub use dataset::{
    build_training_pairs, discover_instances, load_instance_views, TrainingDatasets, TrainingPair,
    DATASETS_FILE,
};
pub use training::{
    train_experts, HttpTrainer, StubTrainer, TrainingBackend, TrainingConfig, TrainingJob,
};

pub const ANCHOR_ID: &str = "anchor";
pub const SINGLE_DM_ID: &str = "single_dm";
pub const EXPERTS_FILE: &str = "experts.json";
pub const DEFAULT_CONSISTENCY_THRESHOLD: f64 = 0.85;
pub const STAGE: &str = "structure";

pub fn neighbor_id(k: usize) -> String {
    format!("expert{k}")
}

fn square_side(n: usize) -> Option<u32> {
    let s = (n as f64).sqrt().round() as usize;
    (s > 0 && s * s == n).then_some(s as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureLayout {
    MultiExpert { assignment: ExpertAssignment },
    /// One model emits every view in a `grid_side × grid_side` grid.
    SingleDm { n_views: usize, grid_side: u32 },
}

impl Default for StructureLayout {
    fn default() -> Self {
        Self::multi_expert(16, 4).expect("16/4 is a valid layout")
    }
}

impl StructureLayout {
    /// The anchor count and the stride must both be perfect squares so that
    /// each fits a square grid.
    pub fn multi_expert(n_views: usize, stride: usize) -> Result<Self> {
        let assignment = expert_assignment(n_views, stride)?;
        if square_side(assignment.anchor_indices.len()).is_none() {
            return Err(Error::invalid(format!(
                "{} anchors do not tile a square grid",
                assignment.anchor_indices.len()
            )));
        }
        if square_side(stride).is_none() {
            return Err(Error::invalid(format!("stride {stride} does not tile a square grid")));
        }
        Ok(StructureLayout::MultiExpert { assignment })
    }

    pub fn single_dm(grid_side: u32) -> Result<Self> {
        if grid_side == 0 {
            return Err(Error::invalid("grid_side must be positive"));
        }
        Ok(StructureLayout::SingleDm {
            n_views: (grid_side * grid_side) as usize,
            grid_side,
        })
    }

    pub fn n_views(&self) -> usize {
        match self {
            StructureLayout::MultiExpert { assignment } => assignment.n_views,
            StructureLayout::SingleDm { n_views, .. } => *n_views,
        }
    }

    pub fn assignment(&self) -> Option<&ExpertAssignment> {
        match self {
            StructureLayout::MultiExpert { assignment } => Some(assignment),
            StructureLayout::SingleDm { .. } => None,
        }
    }

    /// Side, in views, of the grid emitted by the text-conditioned model.
    pub fn anchor_grid_side(&self) -> u32 {
        match self {
            StructureLayout::MultiExpert { assignment } => {
                square_side(assignment.anchor_indices.len()).expect("checked at construction")
            }
            StructureLayout::SingleDm { grid_side, .. } => *grid_side,
        }
    }

    pub fn neighbor_grid_side(&self) -> u32 {
        match self {
            StructureLayout::MultiExpert { assignment } => {
                square_side(assignment.stride).expect("checked at construction")
            }
            StructureLayout::SingleDm { .. } => 0,
        }
    }

    pub fn expert_ids(&self) -> Vec<String> {
        training::expert_ids(self)
    }

    pub fn generation_calls(&self) -> usize {
        self.expert_ids().len()
    }
}

/// Fine-tuned (or base) expert models and what they were trained on.
/// Generation is routed through the pipeline's text2image and image2image
/// backends, with each request's `model_id` selecting the expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    pub anchor_expert: BackendDescriptor,
    pub neighbor_experts: Vec<BackendDescriptor>,
    pub layout: StructureLayout,
    pub training_config: TrainingConfig,
    /// expert id → dataset digest; empty for untrained base models
    pub dataset_digests: BTreeMap<String, String>,
}

impl ExpertSet {
    /// Base models without fine-tuning, addressed by id derived from
    /// `config.base_model_id`.
    pub fn untrained(layout: StructureLayout, config: TrainingConfig) -> Self {
        let descriptor = |kind, id: &str| BackendDescriptor {
            model_id: format!("{}/{id}", config.base_model_id),
            endpoint: STUB_ENDPOINT.into(),
            ..BackendDescriptor::stub(kind)
        };
        let ids = layout.expert_ids();
        let anchor_expert = descriptor(BackendKind::Text2image, &ids[0]);
        let neighbor_experts = ids[1..]
            .iter()
            .map(|id| descriptor(BackendKind::Image2image, id))
            .collect();
        ExpertSet {
            anchor_expert,
            neighbor_experts,
            layout,
            training_config: config,
            dataset_digests: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match &self.layout {
            StructureLayout::MultiExpert { assignment } => assignment.anchor_indices.len(),
            StructureLayout::SingleDm { .. } => 0,
        };
        if self.neighbor_experts.len() != expected {
            return Err(Error::invalid(format!(
                "{} neighbor experts for {expected} anchors",
                self.neighbor_experts.len()
            )));
        }
        if self.anchor_expert.kind != BackendKind::Text2image {
            return Err(Error::invalid("anchor expert must be text2image"));
        }
        if self.neighbor_experts.iter().any(|d| d.kind != BackendKind::Image2image) {
            return Err(Error::invalid("neighbor experts must be image2image"));
        }
        self.training_config.validate()
    }

    pub fn digest(&self) -> String {
        let json = crate::json::to_canonical_string(self).expect("expert set serializes");
        Hasher::new("experts").str(&json).finish()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::json::write_canonical(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let set: ExpertSet = crate::json::read_json(path)?;
        set.validate()?;
        Ok(set)
    }
}

/// Which expert call and grid position produced a view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewOrigin {
    pub view: usize,
    pub expert_id: String,
    pub quadrant: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureViews {
    pub views: Vec<RgbImage>,
    pub ring: CameraRing,
    pub prompt: VehiclePrompt,
    /// Cosine between each fed anchor and its regenerated copy.
    pub anchor_consistency: Vec<f64>,
    pub origins: Vec<ViewOrigin>,
    pub warnings: Vec<String>,
    /// Sorted call digests of the backend calls made for this stage.
    pub trace_digests: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureOptions {
    pub sub_size: u32,
    pub consistency_threshold: f64,
}

impl Default for StructureOptions {
    fn default() -> Self {
        StructureOptions {
            sub_size: DEFAULT_SUB_SIZE,
            consistency_threshold: DEFAULT_CONSISTENCY_THRESHOLD,
        }
    }
}

/// Seed for expert call `ordinal` (0 is the anchor expert).
pub fn expert_seed(seed: u64, ordinal: usize) -> u64 {
    seed.wrapping_add(ordinal as u64)
}

pub fn generate_structures(
    backends: &Backends,
    prompt: &VehiclePrompt,
    experts: &ExpertSet,
    ring: &CameraRing,
    seed: u64,
    options: &StructureOptions,
) -> Result<StructureViews> {
    if prompt.answer.trim().is_empty() {
        return Err(Error::invalid("prompt answer is empty"));
    }
    experts.validate()?;
    let n = experts.layout.n_views();
    if ring.n_views != n || ring.poses.len() != n {
        return Err(Error::invalid(format!(
            "ring has {} views, layout needs {n}",
            ring.n_views
        )));
    }
    if options.sub_size == 0 {
        return Err(Error::invalid("sub_size must be positive"));
    }
    backends.trace().set_stage(STAGE);
    let mark = backends.trace().len();
    let tag = |e| Error::stage(STAGE, e);
    let s = options.sub_size;
    let side = experts.layout.anchor_grid_side();
    let anchor_req = GenerationRequest::new(&prompt.answer, expert_seed(seed, 0), s * side, s * side)
        .with_model(&experts.anchor_expert.model_id);
    let anchor_grid = backends
        .generate(BackendKind::Text2image, &anchor_req)
        .map_err(tag)?;
    let first = split_square(&anchor_grid, side).map_err(tag)?;

    let assignment = match &experts.layout {
        StructureLayout::SingleDm { .. } => {
            let origins = (0..n)
                .map(|i| ViewOrigin {
                    view: i,
                    expert_id: SINGLE_DM_ID.into(),
                    quadrant: i,
                    seed: anchor_req.seed,
                })
                .collect();
            return Ok(StructureViews {
                views: first,
                ring: ring.clone(),
                prompt: prompt.clone(),
                anchor_consistency: Vec::new(),
                origins,
                warnings: Vec::new(),
                trace_digests: call_digests(&backends.trace().records_since(mark)),
            });
        }
        StructureLayout::MultiExpert { assignment } => assignment,
    };

    let nside = experts.layout.neighbor_grid_side();
    let expanded: Vec<(Vec<RgbImage>, f64)> = first
        .par_iter()
        .enumerate()
        .map(|(k, anchor)| {
            let req = GenerationRequest::new(&prompt.answer, expert_seed(seed, k + 1), s * nside, s * nside)
                .with_init(anchor.clone())
                .with_model(&experts.neighbor_experts[k].model_id);
            let grid = backends.generate(BackendKind::Image2image, &req)?;
            let parts = split_square(&grid, nside)?;
            let fed = backends.embed(&EmbedContent::Image(anchor))?;
            let regenerated = backends.embed(&EmbedContent::Image(&parts[0]))?;
            Ok((parts, fed.cosine(&regenerated)?))
        })
        .collect::<Result<_>>()
        .map_err(tag)?;

    let mut views: Vec<Option<RgbImage>> = vec![None; n];
    let mut origins = Vec::with_capacity(n);
    let mut anchor_consistency = Vec::with_capacity(expanded.len());
    let mut warnings = Vec::new();
    for (k, (parts, cos)) in expanded.into_iter().enumerate() {
        for (q, (&v, img)) in assignment.block(k).iter().zip(parts).enumerate() {
            views[v] = Some(img);
            origins.push(ViewOrigin {
                view: v,
                expert_id: neighbor_id(k),
                quadrant: q,
                seed: expert_seed(seed, k + 1),
            });
        }
        if cos < options.consistency_threshold {
            warnings.push(format!(
                "anchor consistency for {} is {cos:.4}, below {}",
                neighbor_id(k),
                options.consistency_threshold
            ));
        }
        anchor_consistency.push(cos);
    }
    origins.sort_by_key(|o| o.view);
    Ok(StructureViews {
        views: views
            .into_iter()
            .map(|v| v.expect("assignment covers every view"))
            .collect(),
        ring: ring.clone(),
        prompt: prompt.clone(),
        anchor_consistency,
        origins,
        warnings,
        trace_digests: call_digests(&backends.trace().records_since(mark)),
    })
}
