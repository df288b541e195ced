//! Pipeline configuration: one TOML file, validated as a whole before any
//! stage runs. Environment variables override backend endpoints and
//! timeouts only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vqadiff_core::appearance::CannyParams;
use vqadiff_core::backends::{BackendDescriptor, BackendKind, SeedPolicy, DEFAULT_TIMEOUT_S, STUB_ENDPOINT};
use vqadiff_core::geometry::{
    camera_ring, CameraRing, DEFAULT_ELEVATION_DEG, DEFAULT_FOV_DEG, DEFAULT_IMAGE_SIZE, DEFAULT_N_VIEWS,
    DEFAULT_RADIUS,
};
use vqadiff_core::structure::{ExpertSet, StructureLayout, TrainingConfig, DEFAULT_CONSISTENCY_THRESHOLD};
use vqadiff_core::vqa::{DEFAULT_EPSILON, DEFAULT_MAX_ITERS};

pub const TIMEOUT_ENV: &str = "VQADIFF_BACKEND_TIMEOUT_S";

#[derive(Debug, thiserror::Error)]
#[error("configuration is invalid:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub n_views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub start_azimuth_deg: f64,
    /// Side of one rendered or generated view, in pixels.
    pub image_size: u32,
    pub fov_deg: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            n_views: DEFAULT_N_VIEWS,
            elevation_deg: DEFAULT_ELEVATION_DEG,
            radius: DEFAULT_RADIUS,
            start_azimuth_deg: 0.0,
            image_size: DEFAULT_IMAGE_SIZE,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    MultiExpert,
    SingleDm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub mode: LayoutMode,
    pub stride: usize,
    /// Only for `single_dm`: views per grid side (4 for 16 views, 3 for 9).
    pub grid_side: u32,
    pub consistency_threshold: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            mode: LayoutMode::MultiExpert,
            stride: 4,
            grid_side: 4,
            consistency_threshold: DEFAULT_CONSISTENCY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: u32,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: vqadiff_core::backends::DEFAULT_STEPS,
            guidance: vqadiff_core::backends::DEFAULT_GUIDANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringKind {
    Txt2txt,
    Img2img,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub enabled: bool,
    pub scoring: ScoringKind,
    /// Reference caption for txt2txt scoring.
    pub caption: Option<String>,
    /// JSON list of question templates; the built-in bank when absent.
    pub templates_path: Option<PathBuf>,
    pub max_iters: usize,
    pub epsilon: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            enabled: false,
            scoring: ScoringKind::Img2img,
            caption: None,
            templates_path: None,
            max_iters: DEFAULT_MAX_ITERS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vqa_template: String,
    pub method_label: String,
    pub aggregate_csv: PathBuf,
    /// Fixture row to diff against, used only when `fixtures_path` is set.
    pub fixture_table: String,
    pub fixture_method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            vqa_template: vqadiff_core::eval::DEFAULT_VQA_TEMPLATE.into(),
            method_label: "vqa-diff".into(),
            aggregate_csv: PathBuf::from("reports.csv"),
            fixture_table: "pascal3d_comparison".into(),
            fixture_method: "Ours".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Training service polling.
    pub poll_interval_s: f64,
    pub max_polls: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            max_retries: 2,
            backoff_ms: 200,
            max_in_flight: vqadiff_core::backends::DEFAULT_MAX_IN_FLIGHT,
            poll_interval_s: 30.0,
            max_polls: 2880,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEntry {
    pub endpoint: String,
    pub model_id: Option<String>,
    pub timeout_s: Option<f64>,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default)]
    pub fixed_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub cache_dir: PathBuf,
    pub render_dir: PathBuf,
    pub fixtures_path: Option<PathBuf>,
    /// `experts.json` from `train-experts`; untrained base experts when absent.
    pub experts_path: Option<PathBuf>,
    /// `"stub"` or the base URL of a training service.
    pub trainer_endpoint: String,
    pub seed: u64,
    pub ring: RingConfig,
    pub assignment: AssignmentConfig,
    pub canny: CannyParams,
    pub sampler: SamplerConfig,
    pub training: TrainingConfig,
    pub refinement: RefinementConfig,
    pub eval: EvalConfig,
    pub http: HttpConfig,
    /// Backends by kind; missing kinds use the stubs.
    pub backends: BTreeMap<BackendKind, BackendEntry>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cache_dir: PathBuf::from("cache"),
            render_dir: PathBuf::from("renders"),
            fixtures_path: None,
            experts_path: None,
            trainer_endpoint: STUB_ENDPOINT.into(),
            seed: 0,
            ring: RingConfig::default(),
            assignment: AssignmentConfig::default(),
            canny: CannyParams::default(),
            sampler: SamplerConfig::default(),
            training: TrainingConfig::default(),
            refinement: RefinementConfig::default(),
            eval: EvalConfig::default(),
            http: HttpConfig::default(),
            backends: BTreeMap::new(),
        }
    }
}

/// A validated configuration plus the directory its relative paths are
/// resolved against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub descriptors: BTreeMap<BackendKind, BackendDescriptor>,
    pub layout: StructureLayout,
    pub ring: CameraRing,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.config.cache_dir)
    }

    pub fn render_dir(&self) -> PathBuf {
        self.resolve(&self.config.render_dir)
    }

    pub fn fixtures_path(&self) -> Option<PathBuf> {
        self.config.fixtures_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn experts_path(&self) -> Option<PathBuf> {
        self.config.experts_path.as_deref().map(|p| self.resolve(p))
    }
}

fn env_overrides(
    descriptors: &mut BTreeMap<BackendKind, BackendDescriptor>,
    env: &dyn Fn(&str) -> Option<String>,
    errors: &mut Vec<String>,
) {
    for (kind, d) in descriptors.iter_mut() {
        if let Some(url) = env(&kind.url_env_var()) {
            d.endpoint = url;
        }
    }
    if let Some(t) = env(TIMEOUT_ENV) {
        match t.parse::<f64>() {
            Ok(v) => descriptors.values_mut().for_each(|d| d.timeout_s = v),
            Err(_) => errors.push(format!("{TIMEOUT_ENV}={t:?} is not a number")),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("cannot read {}: {e}", path.display())]))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Self::from_toml(&text)?.validate(base, &|k| std::env::var(k).ok())
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(
        mut self,
        base_dir: &Path,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<LoadedConfig, ConfigError> {
        let mut errors = Vec::new();
        let mut descriptors = BTreeMap::new();
        for kind in BackendKind::ALL {
            let d = match self.backends.get(&kind) {
                None => BackendDescriptor::stub(kind),
                Some(e) => BackendDescriptor {
                    kind,
                    endpoint: e.endpoint.clone(),
                    model_id: e.model_id.clone().unwrap_or_else(|| format!("stub-{kind}")),
                    timeout_s: e.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S),
                    seed_policy: e.seed_policy,
                    fixed_seed: e.fixed_seed,
                },
            };
            descriptors.insert(kind, d);
        }
        env_overrides(&mut descriptors, env, &mut errors);
        for d in descriptors.values() {
            if let Err(e) = d.validate() {
                errors.push(e.to_string());
            }
        }
        // the resolved endpoints are what provenance records
        for (kind, d) in &descriptors {
            if let Some(e) = self.backends.get_mut(kind) {
                e.endpoint = d.endpoint.clone();
                e.timeout_s = Some(d.timeout_s);
            }
        }

        let r = &self.ring;
        let ring = camera_ring(r.n_views, r.elevation_deg, r.radius, r.start_azimuth_deg)
            .map_err(|e| errors.push(format!("ring: {e}")))
            .ok();
        if r.image_size < 8 {
            errors.push("ring.image_size must be at least 8".into());
        }
        if !(r.fov_deg > 0.0 && r.fov_deg < 180.0) {
            errors.push("ring.fov_deg must be in (0, 180)".into());
        }

        let a = &self.assignment;
        let layout = match a.mode {
            LayoutMode::MultiExpert => StructureLayout::multi_expert(r.n_views, a.stride),
            LayoutMode::SingleDm => StructureLayout::single_dm(a.grid_side),
        }
        .map_err(|e| errors.push(format!("assignment: {e}")))
        .ok();
        if let Some(l) = &layout {
            if l.n_views() != r.n_views {
                errors.push(format!(
                    "assignment produces {} views but ring.n_views is {}",
                    l.n_views(),
                    r.n_views
                ));
            }
        }
        if !(0.0..=1.0).contains(&a.consistency_threshold) {
            errors.push("assignment.consistency_threshold must be in [0, 1]".into());
        }
        if let Err(e) = self.canny.validate() {
            errors.push(format!("canny: {e}"));
        }
        if self.sampler.steps == 0 || !(self.sampler.guidance.is_finite() && self.sampler.guidance >= 0.0) {
            errors.push("sampler: steps must be positive and guidance non-negative".into());
        }
        if let Err(e) = self.training.validate() {
            errors.push(format!("training: {e}"));
        }
        let rf = &self.refinement;
        if rf.max_iters == 0 {
            errors.push("refinement.max_iters must be at least 1".into());
        }
        if rf.epsilon.is_nan() || rf.epsilon < 0.0 {
            errors.push("refinement.epsilon must be non-negative".into());
        }
        if rf.enabled && rf.scoring == ScoringKind::Txt2txt && rf.caption.as_deref().is_none_or(|c| c.trim().is_empty()) {
            errors.push("refinement.scoring = \"txt2txt\" needs refinement.caption".into());
        }
        if !self.eval.vqa_template.contains("{prompt_text}") {
            errors.push("eval.vqa_template must contain {prompt_text}".into());
        }
        if self.http.max_in_flight == 0 {
            errors.push("http.max_in_flight must be positive".into());
        }
        if !(self.http.poll_interval_s >= 0.0) {
            errors.push("http.poll_interval_s must be non-negative".into());
        }
        if self.trainer_endpoint != STUB_ENDPOINT
            && !(self.trainer_endpoint.starts_with("http://") || self.trainer_endpoint.starts_with("https://"))
        {
            errors.push(format!("trainer_endpoint {:?} is neither a URL nor \"stub\"", self.trainer_endpoint));
        }

        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let must_exist = [
            ("fixtures_path", self.fixtures_path.as_deref()),
            ("experts_path", self.experts_path.as_deref()),
            ("refinement.templates_path", rf.templates_path.as_deref()),
        ];
        for (name, p) in must_exist {
            if let Some(p) = p {
                if !resolve(p).is_file() {
                    errors.push(format!("{name} {} does not exist", resolve(p).display()));
                }
            }
        }
        for (name, p) in [("cache_dir", &self.cache_dir), ("render_dir", &self.render_dir)] {
            let p = resolve(p);
            // the nearest existing ancestor must be a directory
            match p.ancestors().find(|a| a.exists()) {
                Some(a) if a.is_dir() => {}
                _ => errors.push(format!("{name} {} cannot be created", p.display())),
            }
        }
        if let Some(p) = self.fixtures_path.as_deref().map(resolve).filter(|p| p.is_file()) {
            match vqadiff_core::eval::ReferenceTables::load(&p) {
                Ok(t) => {
                    if t.row(&self.eval.fixture_table, &self.eval.fixture_method).is_err() {
                        errors.push(format!(
                            "fixtures have no row {}/{}",
                            self.eval.fixture_table, self.eval.fixture_method
                        ));
                    }
                }
                Err(e) => errors.push(format!("fixtures_path: {e}")),
            }
        }

        if let (Some(p), Some(l)) = (self.experts_path.as_deref().map(resolve).filter(|p| p.is_file()), &layout) {
            match ExpertSet::read(&p) {
                Ok(set) if &set.layout != l => {
                    errors.push(format!("experts in {} were trained for a different layout", p.display()))
                }
                Ok(_) => {}
                Err(e) => errors.push(format!("experts_path: {e}")),
            }
        }

        match (errors.is_empty(), ring, layout) {
            (true, Some(ring), Some(layout)) => Ok(LoadedConfig {
                config: self,
                base_dir: base_dir.to_path_buf(),
                descriptors,
                layout,
                ring,
            }),
            _ => Err(ConfigError(errors)),
        }
    }
}
