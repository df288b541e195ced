//! Deterministic stand-ins for the model services. Every output is a pure
//! function of the request contents, so whole pipelines replay bit-exactly.

use std::collections::{HashMap, VecDeque};

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendKind, EmbedContent, EmbeddingBackend, EmbeddingVector, GenerationBackend,
    GenerationRequest, Modality, SegmentationBackend, SegmentationMask, VqaBackend,
};
use crate::digest::{raster_digest, Hasher};
use crate::error::{Error, Result};

pub const DEFAULT_ANSWER_TABLE: &[&str] = &[
    "2014 Dodge Ram 1500, a full-size pick-up truck with a crew cab, a chrome grille and a short bed",
    "2019 Tesla Model 3, a compact electric sedan with a glass roof and flush door handles",
    "2018 BMW X5, a mid-size luxury SUV with a kidney grille and roof rails",
    "2016 Toyota Camry, a mid-size sedan with silver paint and alloy wheels",
    "2017 Range Rover Evoque, a compact SUV painted dark orange with a black roof",
    "2015 Ford Mustang, a two-door sports coupe with a long hood and a fastback roof",
];

/// Answers come from, in order: an exact (image digest, question) entry, a
/// per-question entry, or the answer table indexed by a hash of both.
#[derive(Debug, Clone)]
pub struct StubVqa {
    table: Vec<String>,
    by_question: HashMap<String, String>,
    by_image: HashMap<(String, String), String>,
    yes_probability: Option<f64>,
}

impl Default for StubVqa {
    fn default() -> Self {
        Self::with_table(DEFAULT_ANSWER_TABLE.iter().map(|s| s.to_string()).collect())
    }
}

impl StubVqa {
    pub fn with_table(table: Vec<String>) -> Self {
        StubVqa {
            table,
            by_question: HashMap::new(),
            by_image: HashMap::new(),
            yes_probability: None,
        }
    }

    pub fn answer_question(mut self, question: &str, answer: &str) -> Self {
        self.by_question.insert(question.into(), answer.into());
        self
    }

    pub fn answer_image(mut self, image: &RgbImage, question: &str, answer: &str) -> Self {
        self.by_image
            .insert((raster_digest(image), question.into()), answer.into());
        self
    }

    /// Fixes the yes-probability returned for every verification question.
    pub fn yes_probability_fixture(mut self, p: f64) -> Self {
        self.yes_probability = Some(p);
        self
    }
}

impl VqaBackend for StubVqa {
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String> {
        let key = (raster_digest(image), question.to_string());
        if let Some(a) = self.by_image.get(&key) {
            return Ok(a.clone());
        }
        if let Some(a) = self.by_question.get(question) {
            return Ok(a.clone());
        }
        if self.table.is_empty() {
            return Ok(String::new());
        }
        let h = Hasher::new("stub-vqa").raster(image).str(question).finish_u64();
        Ok(self.table[(h % self.table.len() as u64) as usize].clone())
    }

    fn yes_probability(&self, image: &RgbImage, question: &str) -> Result<f64> {
        if let Some(p) = self.yes_probability {
            return Ok(p);
        }
        let h = Hasher::new("stub-yes").raster(image).str(question).finish_u64();
        Ok((h % 1001) as f64 / 1000.0)
    }
}

/// Seeded value noise behind a prompt-colored vehicle silhouette.
#[derive(Debug, Clone, Default)]
pub struct StubGenerator {
    anchor_echo: bool,
}

impl StubGenerator {
    /// Image-to-image calls copy their init image into quadrant 0, as an
    /// ideal neighbor expert would.
    pub fn with_anchor_echo(mut self, on: bool) -> Self {
        self.anchor_echo = on;
        self
    }
}

fn prompt_color(prompt: &str) -> [u8; 3] {
    let b = Hasher::new("stub-color").str(prompt).finish_bytes();
    [64 + b[0] / 2, 64 + b[1] / 2, 64 + b[2] / 2]
}

fn value_noise(rng: &mut ChaCha8Rng, w: u32, h: u32, cell: u32) -> Vec<f64> {
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let at = |x: u32, y: u32| lattice[(y * gw + x) as usize];
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Car-like footprint in unit coordinates: body, cabin and two wheels.
fn silhouette(u: f64, v: f64, length: f64, height: f64) -> Option<bool> {
    let (x0, x1) = (0.5 - length / 2.0, 0.5 + length / 2.0);
    let body = (0.78 - 0.22 * height, 0.78);
    let cabin = (body.0 - 0.17 * height, body.0);
    for cx in [x0 + 0.2 * length, x1 - 0.2 * length] {
        let (dx, dy) = (u - cx, v - 0.78);
        if dx * dx + dy * dy < 0.07f64.powi(2) {
            return Some(true);
        }
    }
    if u >= x0 && u <= x1 && v >= body.0 && v <= body.1 {
        return Some(false);
    }
    let inset = 0.2 * length + (cabin.1 - v) * 0.8;
    if v >= cabin.0 && v < cabin.1 && u >= x0 + inset && u <= x1 - inset {
        return Some(false);
    }
    None
}

/// Tiles per grid side: one car per view cell. Image-to-image grids are
/// sized from the init image, text-to-image grids are taken to be 2×2.
fn grid_side(kind: BackendKind, req: &GenerationRequest) -> u32 {
    match kind {
        BackendKind::Image2image => req
            .init_image
            .as_ref()
            .map(|i| (req.width / i.width().max(1)).max(1))
            .unwrap_or(1),
        BackendKind::Text2image => 2,
        _ => 1,
    }
}

fn render_stub(kind: BackendKind, req: &GenerationRequest, w: u32, h: u32, salt: u64) -> RgbImage {
    let mut seed = Hasher::new("stub-generate");
    seed.str(&req.digest(kind)).u64(salt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.finish_u64());
    let noise = value_noise(&mut rng, w, h, 32.max(w / 8));
    let color = prompt_color(&req.prompt);
    let shape = Hasher::new("stub-shape").str(&req.prompt).finish_bytes();
    let length = 0.55 + 0.3 * shape[0] as f64 / 255.0;
    let height = 0.8 + 0.4 * shape[1] as f64 / 255.0;
    let tint: [f64; 3] = match &req.subject_embedding {
        Some(v) => {
            let b = Hasher::new("stub-tint").str(&format!("{v:?}")).finish_bytes();
            [b[0], b[1], b[2]].map(|c| (c as f64 - 127.5) / 4.0)
        }
        None => [0.0; 3],
    };
    let edges = req.condition_image.as_ref().map(|c| {
        if c.dimensions() == (w, h) {
            c.clone()
        } else {
            imageops::resize(c, w, h, imageops::FilterType::Nearest)
        }
    });
    let side = grid_side(kind, req);
    RgbImage::from_fn(w, h, |x, y| {
        let n = noise[(y * w + x) as usize];
        let (u, v) = (
            (x as f64 * side as f64 / w as f64).fract(),
            (y as f64 * side as f64 / h as f64).fract(),
        );
        let base = match silhouette(u, v, length, height) {
            Some(true) => [30.0, 30.0, 34.0],
            Some(false) => color.map(|c| c as f64),
            None => [200.0, 205.0, 212.0],
        };
        let mut px = [0usize, 1, 2].map(|c| base[c] + tint[c] + (n - 0.5) * 40.0);
        if let Some(e) = &edges {
            if e.get_pixel(x, y).0.iter().any(|&c| c > 127) {
                px = px.map(|c| c * 0.3);
            }
        }
        Rgb(px.map(|c| c.round().clamp(0.0, 255.0) as u8))
    })
}

impl GenerationBackend for StubGenerator {
    fn generate(&self, kind: BackendKind, req: &GenerationRequest) -> Result<RgbImage> {
        let (w, h) = (req.width, req.height);
        let mut out = render_stub(kind, req, w, h, 0);
        if kind == BackendKind::Image2image && self.anchor_echo {
            let init = req.init_image.as_ref().expect("validated image2image request");
            let (qw, qh) = (w / 2, h / 2);
            let quadrant = if init.dimensions() == (qw, qh) {
                init.clone()
            } else {
                imageops::resize(init, qw, qh, imageops::FilterType::Nearest)
            };
            imageops::replace(&mut out, &quadrant, 0, 0);
        }
        Ok(out)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded random ±1 projection. Images are reduced to a 32×32 thumbnail
/// first; text is embedded as a bag of hashed character trigrams and words.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { dim: 64, seed: 0x5eed }
    }
}

const THUMB: u32 = 32;

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        StubEmbedder { dim, seed }
    }

    fn accumulate(&self, v: &mut [f64], key: u64, weight: f64) {
        let base = splitmix64(self.seed ^ key);
        for (chunk, dims) in v.chunks_mut(64).enumerate() {
            let bits = splitmix64(base.wrapping_add(chunk as u64));
            for (j, d) in dims.iter_mut().enumerate() {
                let sign = ((bits >> j) & 1) as f64 * 2.0 - 1.0;
                *d += weight * sign;
            }
        }
    }

    fn embed_image(&self, img: &RgbImage) -> Vec<f64> {
        let (w, h) = img.dimensions();
        let mut v = vec![0.0; self.dim];
        for ty in 0..THUMB {
            let (y0, y1) = cell_range(ty, h);
            for tx in 0..THUMB {
                let (x0, x1) = cell_range(tx, w);
                let mut sum = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.get_pixel(x, y).0;
                        for c in 0..3 {
                            sum[c] += p[c] as f64;
                        }
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for (c, s) in sum.iter().enumerate() {
                    let idx = ((ty * THUMB + tx) * 3) as u64 + c as u64;
                    let value = (s / count - 127.5) / 127.5;
                    self.accumulate(&mut v, idx.wrapping_mul(0x2545_f491_4f6c_dd1d), value);
                }
            }
        }
        v
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let chars: Vec<char> = format!("  {lower}  ").chars().collect();
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            self.accumulate(&mut v, Hasher::new("tri").str(&s).finish_u64(), 1.0);
        }
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            self.accumulate(&mut v, Hasher::new("word").str(word).finish_u64(), 2.0);
        }
        v
    }
}

fn cell_range(t: u32, size: u32) -> (u32, u32) {
    let start = (t as u64 * size as u64 / THUMB as u64) as u32;
    let end = ((t as u64 + 1) * size as u64 / THUMB as u64) as u32;
    let start = start.min(size - 1);
    (start, end.max(start + 1))
}

fn unit_or_basis(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
    v
}

impl EmbeddingBackend for StubEmbedder {
    fn supports(&self, _modality: Modality) -> bool {
        true
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector> {
        let values = match content {
            EmbedContent::Image(img) => unit_or_basis(self.embed_image(img)),
            EmbedContent::Text(t) => unit_or_basis(self.embed_text(t)),
            EmbedContent::Pair(img, t) => {
                let a = unit_or_basis(self.embed_image(img));
                let b = unit_or_basis(self.embed_text(t));
                unit_or_basis(a.iter().zip(&b).map(|(x, y)| x + y).collect())
            }
        };
        Ok(EmbeddingVector {
            values,
            modality: content.modality(),
        })
    }
}

/// Largest 4-connected component of pixels differing from the background
/// color, where the background is the most common border color.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubSegmenter;

pub(crate) fn border_mode_color(img: &RgbImage) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for x in 0..w {
        *counts.entry(img.get_pixel(x, 0).0).or_default() += 1;
        *counts.entry(img.get_pixel(x, h - 1).0).or_default() += 1;
    }
    for y in 0..h {
        *counts.entry(img.get_pixel(0, y).0).or_default() += 1;
        *counts.entry(img.get_pixel(w - 1, y).0).or_default() += 1;
    }
    let (color, _) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty border");
    Rgb(color)
}

impl SegmentationBackend for StubSegmenter {
    fn segment(&self, img: &RgbImage) -> Result<SegmentationMask> {
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::invalid("empty image"));
        }
        let bg = border_mode_color(img);
        let idx = |x: u32, y: u32| (y * w + x) as usize;
        let mut label = vec![0u32; (w * h) as usize];
        let mut best: (usize, u32) = (0, 0);
        let mut next = 1u32;
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                if *img.get_pixel(x, y) == bg || label[idx(x, y)] != 0 {
                    continue;
                }
                let id = next;
                next += 1;
                label[idx(x, y)] = id;
                queue.push_back((x, y));
                let mut size = 0usize;
                while let Some((cx, cy)) = queue.pop_front() {
                    size += 1;
                    let neighbors = [
                        (cx.wrapping_sub(1), cy),
                        (cx + 1, cy),
                        (cx, cy.wrapping_sub(1)),
                        (cx, cy + 1),
                    ];
                    for (nx, ny) in neighbors {
                        if nx < w && ny < h && label[idx(nx, ny)] == 0 && *img.get_pixel(nx, ny) != bg {
                            label[idx(nx, ny)] = id;
                            queue.push_back((nx, ny));
                        }
                    }
                }
                if size > best.0 {
                    best = (size, id);
                }
            }
        }
        let mask = GrayImage::from_fn(w, h, |x, y| {
            Luma([u8::from(best.1 != 0 && label[idx(x, y)] == best.1)])
        });
        Ok(SegmentationMask { mask })
    }
}
