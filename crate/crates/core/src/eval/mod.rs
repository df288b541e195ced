//! Evaluation metrics and per-bundle reports.

mod fid;
pub mod fixtures;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::AssetBundle;
use crate::backends::{BackendKind, Backends, EmbedContent};
use crate::digest::raster_digest;
use crate::error::{Error, Result};
use crate::raster::flip_horizontal;

pub use fid::{fid, sqrt_psd, FeatureSet};
pub use fixtures::{ClaimOutcome, MethodRow, ReferenceTables};

pub const DEFAULT_VQA_TEMPLATE: &str = "Does this image show {prompt_text}?";
pub const REPORT_FILE: &str = "report.json";
pub const STAGE: &str = "eval";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Itc,
    ClipSimilarity,
    Fid,
    VqaScore,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Itc, Metric::ClipSimilarity, Metric::Fid, Metric::VqaScore];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Itc => "itc",
            Metric::ClipSimilarity => "clip_similarity",
            Metric::Fid => "fid",
            Metric::VqaScore => "vqa_score",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Fid
    }
}

pub type MetricValues = BTreeMap<Metric, f64>;

fn non_empty(views: &[RgbImage]) -> Result<()> {
    if views.is_empty() {
        Err(Error::invalid("no views to evaluate"))
    } else {
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean cosine between image embeddings of each view and the reference.
pub fn clip_similarity(backends: &Backends, generated: &[RgbImage], reference: &RgbImage) -> Result<f64> {
    non_empty(generated)?;
    let r = backends.embed(&EmbedContent::Image(reference))?;
    let cos: Vec<f64> = generated
        .par_iter()
        .map(|v| backends.embed(&EmbedContent::Image(v))?.cosine(&r))
        .collect::<Result<_>>()?;
    Ok(mean(&cos))
}

/// Mean image-text contrastive score of each view against `prompt_text`.
pub fn itc_score(backends: &Backends, views: &[RgbImage], prompt_text: &str) -> Result<f64> {
    non_empty(views)?;
    if prompt_text.trim().is_empty() {
        return Err(Error::invalid("empty prompt text"));
    }
    let s: Vec<f64> = views
        .par_iter()
        .map(|v| backends.itc(v, prompt_text))
        .collect::<Result<_>>()?;
    Ok(mean(&s))
}

pub fn verification_question(template: &str, prompt_text: &str) -> String {
    template.replace("{prompt_text}", prompt_text.trim().trim_end_matches('.'))
}

/// Mean yes-probability of the verification question, clamped to [0, 1].
pub fn vqa_score(backends: &Backends, views: &[RgbImage], prompt_text: &str, template: &str) -> Result<f64> {
    non_empty(views)?;
    if prompt_text.trim().is_empty() {
        return Err(Error::invalid("empty prompt text"));
    }
    if !template.contains("{prompt_text}") {
        return Err(Error::invalid("VQA template lacks {prompt_text}"));
    }
    let q = verification_question(template, prompt_text);
    let p: Vec<f64> = views
        .par_iter()
        .map(|v| backends.yes_probability(v, &q))
        .collect::<Result<_>>()?;
    Ok(mean(&p).clamp(0.0, 1.0))
}

/// Cosine of the text embeddings of an answer and a caption.
pub fn txt2txt_score(backends: &Backends, answer: &str, caption: &str) -> Result<f64> {
    if answer.trim().is_empty() || caption.trim().is_empty() {
        return Err(Error::invalid("txt2txt needs two non-empty texts"));
    }
    let a = backends.embed(&EmbedContent::Text(answer))?;
    let c = backends.embed(&EmbedContent::Text(caption))?;
    a.cosine(&c)
}

/// Image embeddings used as FID features.
pub fn image_features(backends: &Backends, images: &[RgbImage]) -> Result<FeatureSet> {
    let vectors: Vec<Vec<f64>> = images
        .par_iter()
        .map(|v| Ok(backends.embed(&EmbedContent::Image(v))?.values))
        .collect::<Result<_>>()?;
    FeatureSet::new(vectors, backends.descriptor(BackendKind::Embed).model_id.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRef {
    pub table: String,
    pub method: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub vqa_template: Option<String>,
    pub method_label: Option<String>,
    /// Extra real images added to the FID reference set.
    pub extra_references: Vec<RgbImage>,
    pub fixtures: Option<(ReferenceTables, FixtureRef)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDelta {
    pub table: String,
    pub method: String,
    /// measured − published, per metric
    pub deltas: MetricValues,
}

/// Which images entered each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub reference_digest: String,
    pub fid_generated: usize,
    pub fid_reference: usize,
    pub extractor_id: String,
    pub vqa_question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub itc: f64,
    pub clip_similarity: f64,
    pub fid: f64,
    pub vqa_score: f64,
    pub n_views: usize,
    pub method_label: String,
    pub fixture_delta: Option<FixtureDelta>,
    pub corpus: Corpus,
}

impl EvalReport {
    pub fn values(&self) -> MetricValues {
        [
            (Metric::Itc, self.itc),
            (Metric::ClipSimilarity, self.clip_similarity),
            (Metric::Fid, self.fid),
            (Metric::VqaScore, self.vqa_score),
        ]
        .into_iter()
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (m, v) in self.values() {
            if !v.is_finite() {
                problems.push(format!("{} is not finite", m.as_str()));
            }
        }
        if self.fid < 0.0 {
            problems.push("fid is negative".into());
        }
        if !(-1.0..=1.0).contains(&self.clip_similarity) {
            problems.push("clip_similarity is outside [-1, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.vqa_score) {
            problems.push("vqa_score is outside [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        crate::json::write_canonical(&path, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::json::read_json(path)
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "bundle",
    "method",
    "n_views",
    "itc",
    "clip_similarity",
    "fid",
    "vqa_score",
    "fixture",
];

/// Appends one row per report to the aggregate CSV, writing the header
/// when the file is new.
pub fn append_csv(path: &Path, bundle_id: &str, report: &EvalReport) -> Result<()> {
    let fresh = !path.is_file() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    if fresh {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    let fixture = report
        .fixture_delta
        .as_ref()
        .map(|f| format!("{}/{}", f.table, f.method))
        .unwrap_or_default();
    w.write_record([
        bundle_id.to_string(),
        report.method_label.clone(),
        report.n_views.to_string(),
        report.itc.to_string(),
        report.clip_similarity.to_string(),
        report.fid.to_string(),
        report.vqa_score.to_string(),
        fixture,
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    w.into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

/// Scores a complete bundle against one reference photo. The FID reference
/// set is the photo, its mirror image and any extra references.
pub fn evaluate_bundle(
    backends: &Backends,
    bundle: &AssetBundle,
    reference: &RgbImage,
    prompt_text: &str,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let views: Vec<RgbImage> = bundle.complete_views()?.into_iter().cloned().collect();
    let template = options.vqa_template.as_deref().unwrap_or(DEFAULT_VQA_TEMPLATE);
    backends.trace().set_stage(STAGE);

    let itc = itc_score(backends, &views, prompt_text).map_err(|e| Error::metric("itc", e))?;
    let clip = clip_similarity(backends, &views, reference).map_err(|e| Error::metric("clip_similarity", e))?;
    let vqa = vqa_score(backends, &views, prompt_text, template).map_err(|e| Error::metric("vqa_score", e))?;
    let mut refs = vec![reference.clone(), flip_horizontal(reference)];
    refs.extend(options.extra_references.iter().cloned());
    let fid_value = (|| {
        let gen = image_features(backends, &views)?;
        let real = image_features(backends, &refs)?;
        Ok::<_, Error>((fid(&gen, &real)?, gen.extractor_id))
    })()
    .map_err(|e| Error::metric("fid", e))?;

    let mut report = EvalReport {
        itc,
        clip_similarity: clip,
        fid: fid_value.0,
        vqa_score: vqa,
        n_views: views.len(),
        method_label: options.method_label.clone().unwrap_or_else(|| "vqa-diff".into()),
        fixture_delta: None,
        corpus: Corpus {
            reference_digest: raster_digest(reference),
            fid_generated: views.len(),
            fid_reference: refs.len(),
            extractor_id: fid_value.1,
            vqa_question: verification_question(template, prompt_text),
        },
    };
    if let Some((tables, which)) = &options.fixtures {
        let row = tables.row(&which.table, &which.method)?;
        report.fixture_delta = Some(FixtureDelta {
            table: which.table.clone(),
            method: which.method.clone(),
            deltas: fixtures::deltas(&report.values(), row)?,
        });
    }
    report.validate()?;
    Ok(report)
}
