//! Capability interfaces for every external model, plus stub and HTTP
//! implementations.
//!
//! Pipeline code never talks to a model directly. It goes through
//! [`Backends`], which validates requests, applies seed policy and records
//! every call in the [`TraceLog`].

mod http;
mod stub;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::digest::{raster_digest, Hasher};
use crate::error::{Error, Result};

pub use http::{HttpBackend, HttpOptions};
pub use stub::{StubEmbedder, StubGenerator, StubSegmenter, StubVqa, DEFAULT_ANSWER_TABLE};
pub use trace::{call_digests, TraceLog, TraceRecord};

pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_TIMEOUT_S: f64 = 120.0;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Vqa,
    Text2image,
    Image2image,
    Edge2image,
    Segment,
    Embed,
}

impl BackendKind {
    pub const ALL: [BackendKind; 6] = [
        BackendKind::Vqa,
        BackendKind::Text2image,
        BackendKind::Image2image,
        BackendKind::Edge2image,
        BackendKind::Segment,
        BackendKind::Embed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Vqa => "vqa",
            BackendKind::Text2image => "text2image",
            BackendKind::Image2image => "image2image",
            BackendKind::Edge2image => "edge2image",
            BackendKind::Segment => "segment",
            BackendKind::Embed => "embed",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(
            self,
            BackendKind::Text2image | BackendKind::Image2image | BackendKind::Edge2image
        )
    }

    /// Name of the environment variable overriding this backend's URL.
    pub fn url_env_var(self) -> String {
        format!("VQADIFF_BACKEND_{}_URL", self.as_str().to_uppercase())
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackendKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backend kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPolicy {
    /// Use the seed supplied with each request.
    #[default]
    Caller,
    /// Ignore the request seed and always use the descriptor's fixed seed.
    Fixed,
    /// Draw a fresh seed per call. Not replayable.
    Random,
}

pub const STUB_ENDPOINT: &str = "stub";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Base URL of the model service, or the literal `"stub"`.
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default)]
    pub fixed_seed: u64,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}

impl BackendDescriptor {
    pub fn stub(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: STUB_ENDPOINT.into(),
            model_id: format!("stub-{kind}"),
            timeout_s: DEFAULT_TIMEOUT_S,
            seed_policy: SeedPolicy::Caller,
            fixed_seed: 0,
        }
    }

    pub fn is_stub(&self) -> bool {
        self.endpoint == STUB_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_stub() && self.seed_policy != SeedPolicy::Caller {
            return Err(Error::invalid(format!(
                "{} backend: stub endpoints require seed_policy = caller",
                self.kind
            )));
        }
        if !self.is_stub()
            && !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://"))
        {
            return Err(Error::invalid(format!(
                "{} backend: endpoint {:?} is neither a URL nor \"stub\"",
                self.kind, self.endpoint
            )));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::invalid(format!(
                "{} backend: timeout must be positive",
                self.kind
            )));
        }
        if self.model_id.is_empty() {
            return Err(Error::invalid(format!("{} backend: empty model_id", self.kind)));
        }
        Ok(())
    }

    fn effective_seed(&self, requested: u64) -> u64 {
        match self.seed_policy {
            SeedPolicy::Caller => requested,
            SeedPolicy::Fixed => self.fixed_seed,
            SeedPolicy::Random => rand::random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub init_image: Option<RgbImage>,
    /// Edge map for edge-conditioned generation.
    pub condition_image: Option<RgbImage>,
    pub subject_embedding: Option<Vec<f64>>,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
    pub width: u32,
    pub height: u32,
    /// Selects a fine-tuned expert on services hosting several.
    pub model_id: Option<String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, seed: u64, width: u32, height: u32) -> Self {
        Self {
            prompt: prompt.into(),
            init_image: None,
            condition_image: None,
            subject_embedding: None,
            seed,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            width,
            height,
            model_id: None,
        }
    }

    pub fn with_init(mut self, img: RgbImage) -> Self {
        self.init_image = Some(img);
        self
    }

    pub fn with_condition(mut self, img: RgbImage) -> Self {
        self.condition_image = Some(img);
        self
    }

    pub fn with_subject(mut self, v: Vec<f64>) -> Self {
        self.subject_embedding = Some(v);
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = Some(model_id.into());
        self
    }

    pub fn with_sampler(mut self, steps: u32, guidance: f64) -> Self {
        self.steps = steps;
        self.guidance = guidance;
        self
    }

    pub fn validate(&self, kind: BackendKind) -> Result<()> {
        if !kind.is_generation() {
            return Err(Error::invalid(format!("{kind} is not a generation backend")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("requested raster size is zero"));
        }
        if self.steps == 0 || !self.guidance.is_finite() {
            return Err(Error::invalid("sampler settings out of range"));
        }
        if kind == BackendKind::Edge2image && self.condition_image.is_none() {
            return Err(Error::invalid("edge2image requests require condition_image"));
        }
        if kind == BackendKind::Image2image && self.init_image.is_none() {
            return Err(Error::invalid("image2image requests require init_image"));
        }
        if kind == BackendKind::Text2image && self.prompt.trim().is_empty() {
            return Err(Error::invalid("text2image requests require a prompt"));
        }
        if let Some(v) = &self.subject_embedding {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("subject embedding has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn digest(&self, kind: BackendKind) -> String {
        let mut h = Hasher::new("generate");
        h.str(kind.as_str())
            .str(&self.prompt)
            .u64(self.seed)
            .u64(self.steps as u64)
            .f64(self.guidance)
            .u64(self.width as u64)
            .u64(self.height as u64)
            .str(self.model_id.as_deref().unwrap_or(""));
        for img in [&self.init_image, &self.condition_image] {
            match img {
                Some(img) => h.str("some").raster(img),
                None => h.str("none"),
            };
        }
        match &self.subject_embedding {
            Some(v) => {
                h.str("some");
                for x in v {
                    h.f64(*x);
                }
            }
            None => {
                h.str("none");
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        cosine(&self.values, &other.values)
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new("embedding");
        for x in &self.values {
            h.f64(*x);
        }
        h.finish()
    }

    /// Rescales to unit length. Fails on zero or non-finite vectors.
    pub fn normalized(mut self) -> Result<Self> {
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure("embedding has non-finite entries".into()));
        }
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::NumericalFailure("embedding has zero norm".into()));
        }
        for x in &mut self.values {
            *x /= n;
        }
        Ok(self)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::NumericalFailure("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedContent<'a> {
    Image(&'a RgbImage),
    Text(&'a str),
    Pair(&'a RgbImage, &'a str),
}

impl EmbedContent<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            EmbedContent::Image(_) => Modality::Image,
            EmbedContent::Text(_) => Modality::Text,
            EmbedContent::Pair(..) => Modality::Multimodal,
        }
    }

    fn validate(&self) -> Result<()> {
        let empty_img = |i: &RgbImage| i.width() == 0 || i.height() == 0;
        match self {
            EmbedContent::Image(i) if empty_img(i) => Err(Error::invalid("empty image")),
            EmbedContent::Text(t) if t.is_empty() => Err(Error::invalid("empty text")),
            EmbedContent::Pair(i, t) if empty_img(i) || t.is_empty() => {
                Err(Error::invalid("empty image or text"))
            }
            _ => Ok(()),
        }
    }

    fn digest(&self) -> String {
        let mut h = Hasher::new("embed");
        match self {
            EmbedContent::Image(i) => h.str("image").raster(i),
            EmbedContent::Text(t) => h.str("text").str(t),
            EmbedContent::Pair(i, t) => h.str("pair").raster(i).str(t),
        };
        h.finish()
    }
}

/// Binary foreground mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub mask: GrayImage,
}

impl SegmentationMask {
    pub fn is_empty(&self) -> bool {
        self.mask.pixels().all(|p| p[0] == 0)
    }

    pub fn area(&self) -> usize {
        self.mask.pixels().filter(|p| p[0] != 0).count()
    }
}

pub trait VqaBackend: Send + Sync {
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String>;

    /// Probability that the answer to a yes/no `question` is "yes".
    fn yes_probability(&self, image: &RgbImage, question: &str) -> Result<f64>;
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, kind: BackendKind, req: &GenerationRequest) -> Result<RgbImage>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn supports(&self, modality: Modality) -> bool;

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector>;

    /// Image-text contrastive similarity. Backends with a dedicated ITC head
    /// override this; the default is the cosine of the two embeddings.
    fn itc(&self, image: &RgbImage, text: &str) -> Result<f64> {
        let i = self.embed(&EmbedContent::Image(image))?;
        let t = self.embed(&EmbedContent::Text(text))?;
        i.cosine(&t)
    }
}

pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, image: &RgbImage) -> Result<SegmentationMask>;
}

/// The full set of model backends used by a pipeline run.
pub struct Backends {
    descriptors: BTreeMap<BackendKind, BackendDescriptor>,
    vqa: Arc<dyn VqaBackend>,
    generators: BTreeMap<BackendKind, Arc<dyn GenerationBackend>>,
    embedder: Arc<dyn EmbeddingBackend>,
    segmenter: Arc<dyn SegmentationBackend>,
    embed_dim: OnceLock<usize>,
    trace: Arc<TraceLog>,
}

impl Backends {
    /// Deterministic stubs for every capability.
    pub fn stub() -> Self {
        Self::stub_with(StubVqa::default(), StubGenerator::default(), StubEmbedder::default())
    }

    pub fn stub_with(vqa: StubVqa, generator: StubGenerator, embedder: StubEmbedder) -> Self {
        let generator = Arc::new(generator);
        let descriptors = BackendKind::ALL
            .into_iter()
            .map(|k| (k, BackendDescriptor::stub(k)))
            .collect();
        Backends {
            descriptors,
            vqa: Arc::new(vqa),
            generators: [
                BackendKind::Text2image,
                BackendKind::Image2image,
                BackendKind::Edge2image,
            ]
            .into_iter()
            .map(|k| (k, generator.clone() as Arc<dyn GenerationBackend>))
            .collect(),
            embedder: Arc::new(embedder),
            segmenter: Arc::new(StubSegmenter),
            embed_dim: OnceLock::new(),
            trace: Arc::new(TraceLog::in_memory()),
        }
    }

    /// Builds clients from descriptors: `"stub"` endpoints get the default
    /// stubs, URLs get HTTP clients. Every kind must be present.
    pub fn from_descriptors(
        descriptors: BTreeMap<BackendKind, BackendDescriptor>,
        http: HttpOptions,
        trace: Arc<TraceLog>,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        for kind in BackendKind::ALL {
            match descriptors.get(&kind) {
                None => errors.push(format!("no backend configured for {kind}")),
                Some(d) if d.kind != kind => {
                    errors.push(format!("descriptor under {kind} declares kind {}", d.kind))
                }
                Some(d) => {
                    if let Err(e) = d.validate() {
                        errors.push(e.to_string());
                    }
                }
            }
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let stub_gen = Arc::new(StubGenerator::default());
        let client = |d: &BackendDescriptor| Arc::new(HttpBackend::new(d, http.clone()));
        let d = |k: BackendKind| &descriptors[&k];

        let vqa: Arc<dyn VqaBackend> = if d(BackendKind::Vqa).is_stub() {
            Arc::new(StubVqa::default())
        } else {
            client(d(BackendKind::Vqa))
        };
        let embedder: Arc<dyn EmbeddingBackend> = if d(BackendKind::Embed).is_stub() {
            Arc::new(StubEmbedder::default())
        } else {
            client(d(BackendKind::Embed))
        };
        let segmenter: Arc<dyn SegmentationBackend> = if d(BackendKind::Segment).is_stub() {
            Arc::new(StubSegmenter)
        } else {
            client(d(BackendKind::Segment))
        };
        let generators = [
            BackendKind::Text2image,
            BackendKind::Image2image,
            BackendKind::Edge2image,
        ]
        .into_iter()
        .map(|k| {
            let g: Arc<dyn GenerationBackend> = if d(k).is_stub() {
                stub_gen.clone()
            } else {
                client(d(k))
            };
            (k, g)
        })
        .collect();
        Ok(Backends {
            descriptors,
            vqa,
            generators,
            embedder,
            segmenter,
            embed_dim: OnceLock::new(),
            trace,
        })
    }

    pub fn with_vqa(mut self, vqa: Arc<dyn VqaBackend>) -> Self {
        self.vqa = vqa;
        self
    }

    pub fn with_generator(mut self, kind: BackendKind, g: Arc<dyn GenerationBackend>) -> Self {
        self.generators.insert(kind, g);
        self
    }

    pub fn with_embedder(mut self, e: Arc<dyn EmbeddingBackend>) -> Self {
        self.embedder = e;
        self.embed_dim = OnceLock::new();
        self
    }

    pub fn with_segmenter(mut self, s: Arc<dyn SegmentationBackend>) -> Self {
        self.segmenter = s;
        self
    }

    pub fn with_trace(mut self, trace: Arc<TraceLog>) -> Self {
        self.trace = trace;
        self
    }

    pub fn with_descriptor(mut self, d: BackendDescriptor) -> Self {
        self.descriptors.insert(d.kind, d);
        self
    }

    pub fn trace(&self) -> &Arc<TraceLog> {
        &self.trace
    }

    pub fn descriptor(&self, kind: BackendKind) -> &BackendDescriptor {
        &self.descriptors[&kind]
    }

    pub fn descriptors(&self) -> &BTreeMap<BackendKind, BackendDescriptor> {
        &self.descriptors
    }

    fn record<T>(
        &self,
        kind: BackendKind,
        op: &str,
        request_digest: String,
        call: impl FnOnce() -> Result<T>,
        response_digest: impl FnOnce(&T) -> String,
    ) -> Result<T> {
        let started = Instant::now();
        let result = call();
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let (ok, resp) = match &result {
            Ok(v) => (true, response_digest(v)),
            Err(e) => (false, format!("error: {e}")),
        };
        self.trace.record(
            kind,
            op,
            &self.descriptors[&kind].model_id,
            request_digest,
            resp,
            latency_ms,
            ok,
        );
        result
    }

    pub fn vqa_answer(&self, image: &RgbImage, question: &str) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::invalid("empty question"));
        }
        check_image(image)?;
        let req = Hasher::new("vqa").raster(image).str(question).finish();
        self.record(
            BackendKind::Vqa,
            "answer",
            req,
            || self.vqa.answer(image, question),
            |a| crate::digest::text_digest(a),
        )
    }

    pub fn yes_probability(&self, image: &RgbImage, question: &str) -> Result<f64> {
        if question.trim().is_empty() {
            return Err(Error::invalid("empty question"));
        }
        check_image(image)?;
        let req = Hasher::new("vqa-yes").raster(image).str(question).finish();
        let p = self.record(
            BackendKind::Vqa,
            "yes_probability",
            req,
            || self.vqa.yes_probability(image, question),
            |p| Hasher::new("f64").f64(*p).finish(),
        )?;
        if !p.is_finite() {
            return Err(Error::NumericalFailure("non-finite yes-probability".into()));
        }
        Ok(p)
    }

    pub fn generate(&self, kind: BackendKind, req: &GenerationRequest) -> Result<RgbImage> {
        req.validate(kind)?;
        let descriptor = &self.descriptors[&kind];
        let seed = descriptor.effective_seed(req.seed);
        let owned;
        let req = if seed != req.seed {
            owned = GenerationRequest {
                seed,
                ..req.clone()
            };
            &owned
        } else {
            req
        };
        let generator = &self.generators[&kind];
        let out = self.record(
            kind,
            "generate",
            req.digest(kind),
            || generator.generate(kind, req),
            raster_digest,
        )?;
        if out.dimensions() != (req.width, req.height) {
            return Err(Error::Backend {
                endpoint: descriptor.endpoint.clone(),
                status: 200,
                attempts: 1,
                retryable: false,
                message: format!(
                    "returned {:?}, requested {}x{}",
                    out.dimensions(),
                    req.width,
                    req.height
                ),
            });
        }
        Ok(out)
    }

    pub fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector> {
        content.validate()?;
        let modality = content.modality();
        if !self.embedder.supports(modality) {
            return Err(Error::invalid(format!(
                "embedding backend does not support {modality:?} content"
            )));
        }
        let v = self.record(
            BackendKind::Embed,
            "embed",
            content.digest(),
            || self.embedder.embed(content),
            EmbeddingVector::digest,
        )?;
        let v = v.normalized()?;
        let dim = *self.embed_dim.get_or_init(|| v.dim());
        if v.dim() != dim {
            return Err(Error::NumericalFailure(format!(
                "embedding dim changed from {dim} to {}",
                v.dim()
            )));
        }
        Ok(v)
    }

    pub fn itc(&self, image: &RgbImage, text: &str) -> Result<f64> {
        check_image(image)?;
        if text.is_empty() {
            return Err(Error::invalid("empty text"));
        }
        let req = Hasher::new("itc").raster(image).str(text).finish();
        self.record(
            BackendKind::Embed,
            "itc",
            req,
            || self.embedder.itc(image, text),
            |s| Hasher::new("f64").f64(*s).finish(),
        )
    }

    pub fn segment_foreground(&self, image: &RgbImage) -> Result<SegmentationMask> {
        check_image(image)?;
        let req = Hasher::new("segment").raster(image).finish();
        let mask = self.record(
            BackendKind::Segment,
            "segment",
            req,
            || self.segmenter.segment(image),
            |m| crate::digest::bytes_digest(m.mask.as_raw()),
        )?;
        if mask.mask.dimensions() != image.dimensions() {
            return Err(Error::invalid(format!(
                "mask {:?} does not match image {:?}",
                mask.mask.dimensions(),
                image.dimensions()
            )));
        }
        if mask.mask.pixels().any(|p| p[0] > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(mask)
    }
}

fn check_image(image: &RgbImage) -> Result<()> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}
