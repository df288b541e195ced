//! One function per subcommand. Each stage looks up its cache entry first
//! and only talks to backends on a miss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use vqadiff_core::appearance::{export_bundle, load_bundle, render_appearance, AppearanceOptions};
use vqadiff_core::backends::{
    BackendDescriptor, BackendKind, Backends, GenerationRequest, HttpOptions, TraceLog, STUB_ENDPOINT,
};
use vqadiff_core::digest::{dir_digest, file_digest, raster_digest};
use vqadiff_core::eval::{append_csv, evaluate_bundle, EvalOptions, EvalReport, FixtureRef, ReferenceTables, REPORT_FILE};
use vqadiff_core::geometry::{build_manifest, view_file_name, CameraRing, RenderOptions};
use vqadiff_core::json::{read_json, write_canonical};
use vqadiff_core::raster::{read_png, write_png};
use vqadiff_core::structure::{
    build_training_pairs, generate_structures, load_instance_views, train_experts, ExpertSet, HttpTrainer,
    StructureOptions, StructureViews, StubTrainer, TrainingBackend, TrainingDatasets, ViewOrigin, DATASETS_FILE,
    EXPERTS_FILE,
};
use vqadiff_core::vqa::{
    extract_description, refine_with_mode, subject_embedding, QuestionTemplateBank, ScoringMode, VehiclePrompt,
};
use vqadiff_core::{Error, Result};

use crate::cache::{Cache, KeyBuilder, Stage};
use crate::config::{LoadedConfig, ScoringKind};
use crate::CliResult;

const PROMPT_FILE: &str = "prompt.json";
const REFERENCE_FILE: &str = "reference.png";
const STRUCTURE_FILE: &str = "structure.json";

pub struct Context {
    pub cfg: LoadedConfig,
    pub backends: Backends,
    pub cache: Cache,
}

impl Context {
    pub fn new(cfg: LoadedConfig, trace: Arc<TraceLog>) -> CliResult<Self> {
        let http = &cfg.config.http;
        let options = HttpOptions {
            max_retries: http.max_retries,
            backoff: Duration::from_millis(http.backoff_ms),
            max_in_flight: http.max_in_flight,
        };
        let backends = Backends::from_descriptors(cfg.descriptors.clone(), options, trace)?;
        let cache = Cache::open(&cfg.cache_dir());
        Ok(Context { cfg, backends, cache })
    }

    /// Backend calls made so far by this process.
    pub fn calls(&self) -> usize {
        self.backends.trace().len()
    }

    fn descriptors(&self, kinds: &[BackendKind]) -> BTreeMap<BackendKind, BackendDescriptor> {
        kinds.iter().map(|k| (*k, self.cfg.descriptors[k].clone())).collect()
    }
}

/// Tags an error with the stage it came from, unless it already is.
fn tagged(stage: Stage, e: Error) -> Error {
    match e {
        Error::Generation { stage: s, source } if s == stage.as_str() => Error::Generation { stage: s, source },
        e => Error::Generation {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    }
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    let io = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(to).map_err(|e| io(to, e))?;
    for entry in std::fs::read_dir(from).map_err(|e| io(from, e))? {
        let path = entry.map_err(|e| io(from, e))?.path();
        let dest = to.join(path.file_name().expect("directory entries have names"));
        if path.is_dir() {
            copy_dir(&path, &dest)?;
        } else {
            std::fs::copy(&path, &dest).map_err(|e| io(&dest, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub image: PathBuf,
    pub seed: Option<u64>,
    pub prompt_override: Option<String>,
    pub prompt_suffix: Option<String>,
    pub reference_transform: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub bundle_dir: PathBuf,
    pub digest: String,
    pub warnings: Vec<String>,
    /// Stages answered from the cache.
    pub hits: Vec<Stage>,
}

/// Everything needed to rebuild a [`StructureViews`] from the cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StructureMeta {
    ring: CameraRing,
    prompt: VehiclePrompt,
    anchor_consistency: Vec<f64>,
    origins: Vec<ViewOrigin>,
    warnings: Vec<String>,
    trace_digests: Vec<String>,
}

struct PromptStage {
    prompt: VehiclePrompt,
    reference: RgbImage,
}

fn prompt_stage(ctx: &Context, image: &RgbImage, seed: u64, args: &GenerateArgs, hits: &mut Vec<Stage>) -> Result<PromptStage> {
    let rf = &ctx.cfg.config.refinement;
    let mut kb = KeyBuilder::new(Stage::Prompt)
        .digest("image", raster_digest(image))
        .value("seed", &seed)
        .value("override", &args.prompt_override)
        .value("suffix", &args.prompt_suffix)
        .value("transform", &args.reference_transform)
        .value("refinement", rf)
        .value(
            "backends",
            &ctx.descriptors(&[BackendKind::Vqa, BackendKind::Image2image, BackendKind::Text2image, BackendKind::Embed]),
        );
    if let Some(p) = &rf.templates_path {
        kb = kb.digest("templates", file_digest(&ctx.cfg.resolve(p))?);
    }
    let (key, inputs) = kb.finish();
    let dir = ctx.cache.object_dir(Stage::Prompt, &key);
    if ctx.cache.lookup(Stage::Prompt, &key).is_some() {
        hits.push(Stage::Prompt);
        return Ok(PromptStage {
            prompt: VehiclePrompt::read(&dir.join(PROMPT_FILE))?,
            reference: read_png(&dir.join(REFERENCE_FILE))?,
        });
    }

    let b = &ctx.backends;
    b.trace().set_stage(Stage::Prompt.as_str());
    let reference = match &args.reference_transform {
        Some(text) => {
            let req = GenerationRequest::new(text, seed, image.width(), image.height()).with_init(image.clone());
            b.generate(BackendKind::Image2image, &req)?
        }
        None => image.clone(),
    };
    let prompt = match &args.prompt_override {
        Some(text) => VehiclePrompt::from_text(text)?,
        None if rf.enabled => {
            let bank = match &rf.templates_path {
                Some(p) => QuestionTemplateBank::from_file(&ctx.cfg.resolve(p))?,
                None => QuestionTemplateBank::default(),
            };
            let mode = match rf.scoring {
                ScoringKind::Txt2txt => ScoringMode::Txt2Txt {
                    caption: rf.caption.clone(),
                },
                ScoringKind::Img2img => ScoringMode::img2img(seed),
            };
            refine_with_mode(b, &reference, &bank, &mode, rf.max_iters, rf.epsilon)?
        }
        None => extract_description(b, &reference)?,
    };
    let prompt = match &args.prompt_suffix {
        Some(s) => prompt.with_suffix(s),
        None => prompt,
    };

    let dir = ctx.cache.prepare(Stage::Prompt, &key)?;
    prompt.write(&dir.join(PROMPT_FILE))?;
    write_png(&dir.join(REFERENCE_FILE), &reference)?;
    ctx.cache.commit(Stage::Prompt, &key, inputs)?;
    Ok(PromptStage { prompt, reference })
}

fn load_experts(ctx: &Context) -> Result<ExpertSet> {
    match ctx.cfg.experts_path() {
        Some(p) => ExpertSet::read(&p),
        None => Ok(ExpertSet::untrained(ctx.cfg.layout.clone(), ctx.cfg.config.training.clone())),
    }
}

fn structure_stage(
    ctx: &Context,
    prompt: &VehiclePrompt,
    experts: &ExpertSet,
    seed: u64,
    hits: &mut Vec<Stage>,
) -> Result<(String, StructureViews)> {
    let c = &ctx.cfg.config;
    let options = StructureOptions {
        sub_size: c.ring.image_size,
        consistency_threshold: c.assignment.consistency_threshold,
    };
    let (key, inputs) = KeyBuilder::new(Stage::Structure)
        .value("prompt", prompt)
        .digest("experts", experts.digest())
        .value("ring", &ctx.cfg.ring)
        .value("seed", &seed)
        .value("sub_size", &options.sub_size)
        .value("consistency_threshold", &options.consistency_threshold)
        .value(
            "backends",
            &ctx.descriptors(&[BackendKind::Text2image, BackendKind::Image2image, BackendKind::Embed]),
        )
        .finish();
    let dir = ctx.cache.object_dir(Stage::Structure, &key);
    if ctx.cache.lookup(Stage::Structure, &key).is_some() {
        hits.push(Stage::Structure);
        let meta: StructureMeta = read_json(&dir.join(STRUCTURE_FILE))?;
        let views = (0..meta.ring.n_views)
            .map(|i| read_png(&dir.join(view_file_name(i))))
            .collect::<Result<_>>()?;
        let sv = StructureViews {
            views,
            ring: meta.ring,
            prompt: meta.prompt,
            anchor_consistency: meta.anchor_consistency,
            origins: meta.origins,
            warnings: meta.warnings,
            trace_digests: meta.trace_digests,
        };
        return Ok((key, sv));
    }

    let sv = generate_structures(&ctx.backends, prompt, experts, &ctx.cfg.ring, seed, &options)?;
    let dir = ctx.cache.prepare(Stage::Structure, &key)?;
    for (i, v) in sv.views.iter().enumerate() {
        write_png(&dir.join(view_file_name(i)), v)?;
    }
    let meta = StructureMeta {
        ring: sv.ring.clone(),
        prompt: sv.prompt.clone(),
        anchor_consistency: sv.anchor_consistency.clone(),
        origins: sv.origins.clone(),
        warnings: sv.warnings.clone(),
        trace_digests: sv.trace_digests.clone(),
    };
    write_canonical(&dir.join(STRUCTURE_FILE), &meta)?;
    ctx.cache.commit(Stage::Structure, &key, inputs)?;
    Ok((key, sv))
}

/// Image → prompt → structure views → appearance → exported bundle.
pub fn generate(ctx: &Context, args: &GenerateArgs) -> CliResult<GenerateOutcome> {
    // read before anything touches the cache
    let image = read_png(&args.image)?;
    let seed = args.seed.unwrap_or(ctx.cfg.config.seed);
    let mut hits = Vec::new();

    let PromptStage { prompt, reference } =
        prompt_stage(ctx, &image, seed, args, &mut hits).map_err(|e| tagged(Stage::Prompt, e))?;
    let experts = load_experts(ctx)?;
    let (structure_key, structure) =
        structure_stage(ctx, &prompt, &experts, seed, &mut hits).map_err(|e| tagged(Stage::Structure, e))?;

    let c = &ctx.cfg.config;
    let config_value = serde_json::to_value(c).map_err(Error::Json)?;
    let (key, inputs) = KeyBuilder::new(Stage::Appearance)
        .digest("structure", structure_key)
        .digest("reference", raster_digest(&reference))
        .value("prompt", &prompt)
        .value("seed", &seed)
        .value("canny", &c.canny)
        .value("sampler", &c.sampler)
        .value("config", &config_value)
        .value(
            "backends",
            &ctx.descriptors(&[BackendKind::Segment, BackendKind::Embed, BackendKind::Edge2image]),
        )
        .finish();
    let dir = ctx.cache.object_dir(Stage::Appearance, &key);
    if ctx.cache.lookup(Stage::Appearance, &key).is_some() {
        hits.push(Stage::Appearance);
    } else {
        let run = || -> Result<()> {
            let subject = subject_embedding(&ctx.backends, &reference, &prompt)?;
            let options = AppearanceOptions {
                canny: c.canny,
                steps: c.sampler.steps,
                guidance: c.sampler.guidance,
                allow_partial: false,
            };
            let mut bundle = render_appearance(&ctx.backends, &structure, &subject, &prompt, seed, &options)?;
            let context = &mut bundle.provenance.context;
            context.insert("config".into(), config_value.clone());
            context.insert("experts_digest".into(), experts.digest().into());
            context.insert("input_image_digest".into(), raster_digest(&image).into());
            context.insert("reference_digest".into(), raster_digest(&reference).into());
            let dir = ctx.cache.prepare(Stage::Appearance, &key)?;
            export_bundle(&bundle, &dir)?;
            ctx.cache.commit(Stage::Appearance, &key, inputs)?;
            Ok(())
        };
        run().map_err(|e| tagged(Stage::Appearance, e))?;
    }

    let provenance: vqadiff_core::appearance::Provenance =
        read_json(&dir.join(vqadiff_core::appearance::PROVENANCE_FILE))?;
    let bundle_dir = match &args.out {
        Some(out) => {
            copy_dir(&dir, out)?;
            out.clone()
        }
        None => dir,
    };
    Ok(GenerateOutcome {
        digest: dir_digest(&bundle_dir)?,
        bundle_dir,
        warnings: provenance.warnings,
        hits,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub bundle: PathBuf,
    pub reference: PathBuf,
    pub prompt_text: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
    pub hit: bool,
}

/// Replaces any earlier row for `bundle_id` so the CSV holds one row per
/// evaluated bundle.
fn upsert_csv(path: &Path, bundle_id: &str, report: &EvalReport) -> Result<()> {
    if let Ok(text) = std::fs::read_to_string(path) {
        let prefix = format!("{bundle_id},");
        if text.lines().any(|l| l.starts_with(&prefix)) {
            let kept: String = text
                .lines()
                .filter(|l| !l.starts_with(&prefix))
                .flat_map(|l| [l, "\n"])
                .collect();
            std::fs::write(path, kept).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
    }
    append_csv(path, bundle_id, report)
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> CliResult<EvaluateOutcome> {
    let bundle = load_bundle(&args.bundle)?;
    let reference = read_png(&args.reference)?;
    let bundle_id = dir_digest(&args.bundle)?;
    let text = args.prompt_text.clone().unwrap_or_else(|| bundle.prompt.answer.clone());
    let ec = &ctx.cfg.config.eval;
    let fixtures = match ctx.cfg.fixtures_path() {
        Some(p) => Some((
            file_digest(&p)?,
            ReferenceTables::load(&p)?,
            FixtureRef {
                table: ec.fixture_table.clone(),
                method: ec.fixture_method.clone(),
            },
        )),
        None => None,
    };
    let (key, inputs) = KeyBuilder::new(Stage::Eval)
        .digest("bundle", bundle_id.clone())
        .digest("reference", raster_digest(&reference))
        .value("prompt_text", &text)
        .value("template", &ec.vqa_template)
        .value("method_label", &ec.method_label)
        .value("fixtures", &fixtures.as_ref().map(|(d, _, r)| (d, r)))
        .value("backends", &ctx.descriptors(&[BackendKind::Embed, BackendKind::Vqa]))
        .finish();
    let dir = ctx.cache.object_dir(Stage::Eval, &key);
    let hit = ctx.cache.lookup(Stage::Eval, &key).is_some();
    let report = if hit {
        EvalReport::read(&dir.join(REPORT_FILE))?
    } else {
        let options = EvalOptions {
            vqa_template: Some(ec.vqa_template.clone()),
            method_label: Some(ec.method_label.clone()),
            extra_references: Vec::new(),
            fixtures: fixtures.map(|(_, t, r)| (t, r)),
        };
        let report = evaluate_bundle(&ctx.backends, &bundle, &reference, &text, &options)
            .map_err(|e| tagged(Stage::Eval, e))?;
        let dir = ctx.cache.prepare(Stage::Eval, &key)?;
        report.write(&dir)?;
        ctx.cache.commit(Stage::Eval, &key, inputs)?;
        report
    };

    let report_path = match &args.out {
        Some(out) => report.write(out)?,
        None => dir.join(REPORT_FILE),
    };
    let csv_path = ctx.cfg.resolve(&ec.aggregate_csv);
    if let Some(parent) = csv_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    upsert_csv(&csv_path, &bundle_id, &report)?;
    Ok(EvaluateOutcome {
        report,
        report_path,
        csv_path,
        hit,
    })
}

/// One line of the instance index read by `build-dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub instance_id: String,
    pub model_path: String,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct BuildDatasetOutcome {
    pub manifests: Vec<PathBuf>,
    /// `datasets.json`, absent with `manifests_only`.
    pub datasets: Option<PathBuf>,
    pub pair_count: usize,
    pub hit: bool,
}

pub fn build_dataset(ctx: &Context, index: &Path, manifests_only: bool) -> CliResult<BuildDatasetOutcome> {
    let entries: Vec<IndexEntry> = read_json(index)?;
    if entries.is_empty() {
        return Err(Error::Validation(vec![format!("{} lists no instances", index.display())]).into());
    }
    let render_dir = ctx.cfg.render_dir();
    let ring = &ctx.cfg.config.ring;
    let options = RenderOptions {
        image_size: ring.image_size,
        fov_deg: ring.fov_deg,
    };
    let mut manifests = Vec::with_capacity(entries.len());
    for e in &entries {
        build_manifest(&e.instance_id, &e.model_path, (e.bbox_min, e.bbox_max), &ctx.cfg.ring, &render_dir, options)?;
        manifests.push(vqadiff_core::geometry::manifest_path(&render_dir, &e.instance_id));
    }
    if manifests_only {
        return Ok(BuildDatasetOutcome {
            manifests,
            datasets: None,
            pair_count: 0,
            hit: false,
        });
    }

    // every instance is checked so the report lists all gaps at once
    let n = ctx.cfg.layout.n_views();
    let ids: Vec<String> = entries.iter().map(|e| e.instance_id.clone()).collect();
    let problems: Vec<String> = ids
        .iter()
        .filter_map(|id| load_instance_views(&render_dir, id, n).err())
        .map(|e| e.to_string())
        .collect();
    if !problems.is_empty() {
        return Err(Error::Validation(problems).into());
    }

    let mut kb = KeyBuilder::new(Stage::Dataset)
        .value("layout", &ctx.cfg.layout)
        .value("instances", &ids)
        .value("vqa", &ctx.descriptors(&[BackendKind::Vqa]));
    for id in &ids {
        for i in 0..n {
            kb = kb.digest(&format!("{id}/{}", view_file_name(i)), file_digest(&render_dir.join(id).join(view_file_name(i)))?);
        }
        let prompt = render_dir.join(id).join(format!("{id}_prompt.json"));
        if prompt.is_file() {
            kb = kb.digest(&format!("{id}/prompt"), file_digest(&prompt)?);
        }
    }
    let (key, inputs) = kb.finish();
    let dir = ctx.cache.object_dir(Stage::Dataset, &key);
    let hit = ctx.cache.lookup(Stage::Dataset, &key).is_some();
    if !hit {
        ctx.backends.trace().set_stage(Stage::Dataset.as_str());
        let dir = ctx.cache.prepare(Stage::Dataset, &key)?;
        build_training_pairs(&render_dir, &ids, &dir, &ctx.cfg.layout, Some(&ctx.backends))
            .map_err(|e| tagged(Stage::Dataset, e))?;
        ctx.cache.commit(Stage::Dataset, &key, inputs)?;
    }
    let path = dir.join(DATASETS_FILE);
    let datasets = TrainingDatasets::read(&path)?;
    Ok(BuildDatasetOutcome {
        manifests,
        datasets: Some(path),
        pair_count: datasets.pair_count,
        hit,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub experts_path: PathBuf,
    pub hit: bool,
}

pub fn train(ctx: &Context, datasets_path: &Path, out: Option<&Path>) -> CliResult<TrainOutcome> {
    let datasets = TrainingDatasets::read(datasets_path)?;
    if datasets.layout != ctx.cfg.layout {
        return Err(Error::Validation(vec![format!(
            "{} was built for a different layout than the configured one",
            datasets_path.display()
        )])
        .into());
    }
    let c = &ctx.cfg.config;
    let (key, inputs) = KeyBuilder::new(Stage::Experts)
        .value("layout", &datasets.layout)
        .value("datasets", &datasets.digests)
        .value("training", &c.training)
        .value("trainer", &c.trainer_endpoint)
        .finish();
    let dir = ctx.cache.object_dir(Stage::Experts, &key);
    let hit = ctx.cache.lookup(Stage::Experts, &key).is_some();
    if !hit {
        let trainer: Box<dyn TrainingBackend> = if c.trainer_endpoint == STUB_ENDPOINT {
            Box::new(StubTrainer::default())
        } else {
            Box::new(HttpTrainer::new(
                &c.trainer_endpoint,
                Duration::from_secs_f64(c.http.poll_interval_s),
                c.http.max_polls,
            )?)
        };
        let set = train_experts(&datasets, &c.training, trainer.as_ref()).map_err(|e| tagged(Stage::Experts, e))?;
        let dir = ctx.cache.prepare(Stage::Experts, &key)?;
        set.write(&dir.join(EXPERTS_FILE))?;
        ctx.cache.commit(Stage::Experts, &key, inputs)?;
    }
    let mut experts_path = dir.join(EXPERTS_FILE);
    if let Some(out) = out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        std::fs::copy(&experts_path, out).map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
        experts_path = out.to_path_buf();
    }
    Ok(TrainOutcome { experts_path, hit })
}
