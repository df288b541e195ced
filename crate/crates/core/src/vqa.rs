//! Vehicle description extraction, question refinement and the subject
//! embedding that steers appearance generation.

use std::collections::HashSet;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendKind, Backends, EmbedContent, EmbeddingVector, GenerationRequest};
use crate::error::{Error, Result};
use crate::raster::apply_mask;

pub const CANONICAL_QUESTION: &str =
    "What are the model, manufacture, production year, and main features of this vehicle?";

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub question: String,
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePrompt {
    pub question: String,
    pub answer: String,
    pub refinement_trace: Vec<TraceEntry>,
    /// Score of the chosen answer. Prompts that were never scored carry 0.
    pub score: f64,
}

impl VehiclePrompt {
    /// A prompt supplied directly by the user; no VQA call is involved.
    pub fn from_text(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::invalid("prompt text is empty"));
        }
        Ok(VehiclePrompt {
            question: String::new(),
            answer: text.to_string(),
            refinement_trace: vec![TraceEntry {
                question: String::new(),
                answer: text.to_string(),
                score: 0.0,
            }],
            score: 0.0,
        })
    }

    /// Appends fine-grained wording such as "with a rear spoiler".
    pub fn with_suffix(mut self, suffix: &str) -> Self {
        let suffix = suffix.trim();
        if !suffix.is_empty() {
            self.answer = format!("{} {suffix}", self.answer.trim_end());
        }
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::json::write_canonical(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::json::read_json(path)
    }
}

/// Asks the canonical question and returns the answer verbatim.
pub fn extract_description(backends: &Backends, image: &RgbImage) -> Result<VehiclePrompt> {
    let answer = backends.vqa_answer(image, CANONICAL_QUESTION)?;
    if answer.trim().is_empty() {
        return Err(Error::EmptyAnswer {
            question: CANONICAL_QUESTION.into(),
        });
    }
    Ok(VehiclePrompt {
        question: CANONICAL_QUESTION.into(),
        answer: answer.clone(),
        refinement_trace: vec![TraceEntry {
            question: CANONICAL_QUESTION.into(),
            answer,
            score: 0.0,
        }],
        score: 0.0,
    })
}

const SLOTS: [&str; 4] = ["model", "manufacturer", "year", "features"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplateBank {
    /// Question strings, optionally containing `{model}`, `{manufacturer}`,
    /// `{year}` or `{features}` slots.
    pub templates: Vec<String>,
    pub canonical_index: usize,
}

impl Default for QuestionTemplateBank {
    fn default() -> Self {
        QuestionTemplateBank {
            templates: vec![
                "What is this image?".into(),
                "What car is it?".into(),
                CANONICAL_QUESTION.into(),
            ],
            canonical_index: 2,
        }
    }
}

impl QuestionTemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("question template bank is empty"));
        }
        for t in &templates {
            check_template(t)?;
        }
        let canonical_index = templates
            .iter()
            .position(|t| t == CANONICAL_QUESTION)
            .ok_or_else(|| Error::invalid("template bank lacks the canonical question"))?;
        Ok(QuestionTemplateBank {
            templates,
            canonical_index,
        })
    }

    /// Loads a JSON list of question strings.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(crate::json::read_json(path)?)
    }

    pub fn canonical(&self) -> &str {
        &self.templates[self.canonical_index]
    }
}

fn check_template(t: &str) -> Result<()> {
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::invalid(format!("unclosed slot in template {t:?}")))?;
        let name = &rest[open + 1..open + close];
        if !SLOTS.contains(&name) {
            return Err(Error::invalid(format!("unknown slot {{{name}}} in {t:?}")));
        }
        rest = &rest[open + close + 1..];
    }
    Ok(())
}

/// Attributes pulled from a free-text answer to fill template slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VehicleAttributes {
    pub manufacturer: Option<String>,
    pub model: Option<String>,
    pub year: Option<String>,
    pub features: Option<String>,
}

const MANUFACTURERS: &[&str] = &[
    "Alfa Romeo", "Aston Martin", "Audi", "Bentley", "BMW", "Buick", "Cadillac", "Chevrolet",
    "Chrysler", "Citroen", "Dodge", "Ferrari", "Fiat", "Ford", "GMC", "Honda", "Hyundai",
    "Infiniti", "Jaguar", "Jeep", "Kia", "Lamborghini", "Land Rover", "Lexus", "Lincoln",
    "Maserati", "Mazda", "McLaren", "Mercedes-Benz", "Mini", "Mitsubishi", "Nissan", "Peugeot",
    "Porsche", "Ram", "Range Rover", "Renault", "Rolls-Royce", "Subaru", "Suzuki", "Tesla",
    "Toyota", "Volkswagen", "Volvo",
];

impl VehicleAttributes {
    pub fn parse(answer: &str) -> Self {
        let head = answer.split(',').next().unwrap_or("").trim();
        let features = answer
            .split_once(',')
            .map(|(_, f)| f.trim().trim_end_matches('.').to_string())
            .filter(|f| !f.is_empty());
        let year = head
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_ascii_digit()))
            .find(|w| w.len() == 4 && matches!(w.parse::<u32>(), Ok(1900..=2099)))
            .map(str::to_string);
        let lower = head.to_ascii_lowercase();
        let found = MANUFACTURERS
            .iter()
            .filter_map(|m| find_word(&lower, &m.to_ascii_lowercase()).map(|pos| (pos, *m)))
            .min_by_key(|&(pos, m)| (pos, usize::MAX - m.len()));
        let (manufacturer, model) = match found {
            Some((pos, m)) => {
                let after = head[pos + m.len()..].trim();
                let model: Vec<&str> = after
                    .split_whitespace()
                    .take_while(|w| !matches!(w.to_lowercase().as_str(), "a" | "an" | "the" | "with" | "is"))
                    .collect();
                let model = (!model.is_empty()).then(|| model.join(" "));
                (Some(m.to_string()), model)
            }
            None => (None, None),
        };
        VehicleAttributes {
            manufacturer,
            model,
            year,
            features,
        }
    }

    fn slot(&self, name: &str) -> Option<&str> {
        match name {
            "model" => self.model.as_deref(),
            "manufacturer" => self.manufacturer.as_deref(),
            "year" => self.year.as_deref(),
            "features" => self.features.as_deref(),
            _ => None,
        }
    }

    /// Fills every slot of `template`, or `None` if one is unknown.
    pub fn render(&self, template: &str) -> Option<String> {
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            let close = open + rest[open..].find('}')?;
            out.push_str(&rest[..open]);
            out.push_str(self.slot(&rest[open + 1..close])?);
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        Some(out)
    }
}

/// Byte offset of `needle` in `hay` at word boundaries.
fn find_word(hay: &str, needle: &str) -> Option<usize> {
    let mut start = 0;
    while let Some(i) = hay[start..].find(needle) {
        let pos = start + i;
        let end = pos + needle.len();
        let before_ok = hay[..pos].chars().last().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(pos);
        }
        start = pos + 1;
    }
    None
}

/// Scores a candidate answer against the original image; higher is better,
/// typically a cosine in [-1, 1].
pub trait AnswerScorer: Sync {
    fn score(&self, backends: &Backends, image: &RgbImage, question: &str, answer: &str) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoringMode {
    /// Cosine between text embeddings of the answer and a reference caption.
    Txt2Txt { caption: Option<String> },
    /// Cosine between image embeddings of the original and of a text-to-image
    /// rendering of the answer.
    Img2Img { seed: u64, size: u32 },
}

impl ScoringMode {
    pub fn img2img(seed: u64) -> Self {
        ScoringMode::Img2Img { seed, size: 256 }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ScoringMode::Txt2Txt { caption } if caption.as_deref().is_none_or(|c| c.trim().is_empty()) => {
                Err(Error::invalid("txt2txt scoring needs a reference caption"))
            }
            ScoringMode::Img2Img { size: 0, .. } => Err(Error::invalid("img2img render size is zero")),
            _ => Ok(()),
        }
    }
}

impl AnswerScorer for ScoringMode {
    fn score(&self, backends: &Backends, image: &RgbImage, _question: &str, answer: &str) -> Result<f64> {
        match self {
            ScoringMode::Txt2Txt { caption } => {
                let caption = caption.as_deref().ok_or_else(|| Error::invalid("missing caption"))?;
                let a = backends.embed(&EmbedContent::Text(answer))?;
                let c = backends.embed(&EmbedContent::Text(caption))?;
                a.cosine(&c)
            }
            ScoringMode::Img2Img { seed, size } => {
                let req = GenerationRequest::new(answer, *seed, *size, *size);
                let rendered = backends.generate(BackendKind::Text2image, &req)?;
                let a = backends.embed(&EmbedContent::Image(image))?;
                let b = backends.embed(&EmbedContent::Image(&rendered))?;
                a.cosine(&b)
            }
        }
    }
}

/// Greedy search over the template bank. Each iteration asks every template
/// not yet tried (slots filled from the current best answer) and keeps the
/// best-scoring answer. The trace lists each answer that raised the best
/// score, in evaluation order. Search stops once an iteration improves the
/// best score by less than `epsilon` (the first iteration is measured
/// against -1), when no untried question remains, or after `max_iters`.
pub fn refine_question(
    backends: &Backends,
    image: &RgbImage,
    bank: &QuestionTemplateBank,
    scorer: &dyn AnswerScorer,
    max_iters: usize,
    epsilon: f64,
) -> Result<VehiclePrompt> {
    if bank.templates.is_empty() {
        return Err(Error::invalid("question template bank is empty"));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    let mut tried: HashSet<String> = HashSet::new();
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut attrs = VehicleAttributes::default();
    for iteration in 0..max_iters {
        let mut questions = Vec::new();
        for t in &bank.templates {
            if let Some(q) = attrs.render(t) {
                if !tried.contains(&q) && !questions.contains(&q) {
                    questions.push(q);
                }
            }
        }
        if questions.is_empty() {
            break;
        }
        let scored: Vec<Option<TraceEntry>> = questions
            .par_iter()
            .map(|q| -> Result<Option<TraceEntry>> {
                let answer = backends.vqa_answer(image, q)?;
                if answer.trim().is_empty() {
                    log::warn!("empty answer to {q:?}; candidate skipped");
                    return Ok(None);
                }
                let score = scorer.score(backends, image, q, &answer)?;
                if !score.is_finite() {
                    return Err(Error::NumericalFailure(format!("non-finite score for {q:?}")));
                }
                Ok(Some(TraceEntry {
                    question: q.clone(),
                    answer,
                    score,
                }))
            })
            .collect::<Result<_>>()?;
        tried.extend(questions);

        let before = trace.last().map_or(-1.0, |e| e.score);
        for entry in scored.into_iter().flatten() {
            if trace.last().is_none_or(|best| entry.score > best.score) {
                trace.push(entry);
            }
        }
        let Some(best) = trace.last() else { continue };
        log::debug!("refinement iteration {iteration}: best {:.4} {:?}", best.score, best.question);
        if best.score - before < epsilon {
            break;
        }
        attrs = VehicleAttributes::parse(&best.answer);
    }
    let best = trace.last().cloned().ok_or_else(|| Error::EmptyAnswer {
        question: bank.canonical().to_string(),
    })?;
    Ok(VehiclePrompt {
        question: best.question,
        answer: best.answer,
        score: best.score,
        refinement_trace: trace,
    })
}

/// Convenience wrapper validating a built-in scoring mode first.
pub fn refine_with_mode(
    backends: &Backends,
    image: &RgbImage,
    bank: &QuestionTemplateBank,
    mode: &ScoringMode,
    max_iters: usize,
    epsilon: f64,
) -> Result<VehiclePrompt> {
    mode.validate()?;
    refine_question(backends, image, bank, mode, max_iters, epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEmbedding {
    pub vector: EmbeddingVector,
    /// Segmentation found no foreground, so the unmasked image was encoded.
    pub degraded_mask: bool,
}

/// Multimodal embedding of the foreground-masked image and the answer text.
pub fn subject_embedding(
    backends: &Backends,
    image: &RgbImage,
    prompt: &VehiclePrompt,
) -> Result<SubjectEmbedding> {
    if prompt.answer.trim().is_empty() {
        return Err(Error::invalid("prompt answer is empty"));
    }
    let mask = backends.segment_foreground(image)?;
    let (subject, degraded_mask) = if mask.is_empty() {
        log::warn!("segmentation mask is empty; encoding the unmasked image");
        (image.clone(), true)
    } else {
        (apply_mask(image, &mask.mask)?, false)
    };
    let vector = backends.embed(&EmbedContent::Pair(&subject, &prompt.answer))?;
    Ok(SubjectEmbedding {
        vector,
        degraded_mask,
    })
}
