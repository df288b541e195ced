//! JSON-over-HTTP client for remote model services. Rasters travel as
//! base64-encoded PNG.
//!
//! Endpoints, relative to the descriptor's base URL:
//! `POST /vqa`, `POST /generate/{kind}`, `POST /embed`, `POST /segment`.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde_json::{json, Value};

use super::{
    BackendDescriptor, BackendKind, EmbedContent, EmbeddingBackend, EmbeddingVector,
    GenerationBackend, GenerationRequest, Modality, SegmentationBackend, SegmentationMask,
    VqaBackend, DEFAULT_MAX_IN_FLIGHT,
};
use crate::digest::Hasher;
use crate::error::{Error, Result};
use crate::raster;

#[derive(Debug, Clone)]
pub struct HttpOptions {
    /// Extra attempts after the first, only for requests carrying an
    /// idempotency key.
    pub max_retries: u32,
    /// Delay before retry `n` is `backoff * 2^(n-1)`.
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions {
            max_retries: 2,
            backoff: Duration::from_millis(200),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    base: String,
    model_id: String,
    timeout_s: f64,
    client: reqwest::blocking::Client,
    options: HttpOptions,
    limiter: Limiter,
}

fn b64_png(img: &RgbImage) -> Result<String> {
    Ok(B64.encode(raster::encode_png(img)?))
}

impl HttpBackend {
    pub fn new(descriptor: &BackendDescriptor, options: HttpOptions) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(descriptor.timeout_s))
            .build()
            .expect("HTTP client without TLS always builds");
        HttpBackend {
            base: descriptor.endpoint.trim_end_matches('/').to_string(),
            model_id: descriptor.model_id.clone(),
            timeout_s: descriptor.timeout_s,
            client,
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                max: options.max_in_flight.max(1),
            },
            options,
        }
    }

    /// POSTs `body` and returns the parsed JSON reply. Requests are retried
    /// on connection failures, timeouts and 5xx replies, but only when an
    /// idempotency key is supplied.
    pub fn post(&self, path: &str, body: &Value, idempotency_key: Option<&str>) -> Result<Value> {
        let url = format!("{}{}", self.base, path);
        let max_attempts = if idempotency_key.is_some() {
            1 + self.options.max_retries
        } else {
            1
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let (err, retryable) = match self.send_once(&url, body, idempotency_key, attempt) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    let retryable = match &e {
                        Error::Backend { retryable, .. } => *retryable,
                        Error::Timeout { .. } | Error::BackendUnavailable { .. } => true,
                        _ => false,
                    };
                    (e, retryable)
                }
            };
            if !retryable || attempt >= max_attempts {
                return Err(err);
            }
            let delay = self.options.backoff * 2u32.saturating_pow(attempt - 1);
            log::warn!("{url}: attempt {attempt} failed ({err}); retrying in {delay:?}");
            thread::sleep(delay);
        }
    }

    fn send_once(
        &self,
        url: &str,
        body: &Value,
        key: Option<&str>,
        attempt: u32,
    ) -> Result<Value> {
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(url).json(body);
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let resp = req.send().map_err(|e| self.transport_error(url, e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.transport_error(url, e))?;
        if !status.is_success() {
            return Err(Error::Backend {
                endpoint: url.to_string(),
                status: status.as_u16(),
                attempts: attempt,
                retryable: status.is_server_error(),
                message: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| self.bad_reply(url, format!("invalid JSON: {e}")))
    }

    fn transport_error(&self, url: &str, e: reqwest::Error) -> Error {
        if e.is_timeout() {
            Error::Timeout {
                endpoint: url.to_string(),
                timeout_s: self.timeout_s,
            }
        } else {
            Error::BackendUnavailable {
                endpoint: url.to_string(),
                message: e.to_string(),
            }
        }
    }

    fn bad_reply(&self, url: &str, message: String) -> Error {
        Error::Backend {
            endpoint: url.to_string(),
            status: 200,
            attempts: 1,
            retryable: false,
            message,
        }
    }

    fn field<'v>(&self, path: &str, reply: &'v Value, name: &str) -> Result<&'v Value> {
        reply
            .get(name)
            .ok_or_else(|| self.bad_reply(&format!("{}{path}", self.base), format!("reply lacks {name:?}")))
    }

    fn image_field(&self, path: &str, reply: &Value, name: &str) -> Result<Vec<u8>> {
        let s = self
            .field(path, reply, name)?
            .as_str()
            .ok_or_else(|| self.bad_reply(path, format!("{name:?} is not a string")))?;
        B64.decode(s)
            .map_err(|e| self.bad_reply(path, format!("{name:?} is not base64: {e}")))
    }

    fn vqa(&self, image: &RgbImage, question: &str, mode: &str) -> Result<Value> {
        let body = json!({
            "image": b64_png(image)?,
            "question": question,
            "mode": mode,
            "model_id": self.model_id,
        });
        let key = Hasher::new("vqa-http").raster(image).str(question).str(mode).finish();
        self.post("/vqa", &body, Some(&key))
    }
}

impl VqaBackend for HttpBackend {
    fn answer(&self, image: &RgbImage, question: &str) -> Result<String> {
        let reply = self.vqa(image, question, "answer")?;
        let answer = self.field("/vqa", &reply, "answer")?;
        answer
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.bad_reply("/vqa", "answer is not a string".into()))
    }

    fn yes_probability(&self, image: &RgbImage, question: &str) -> Result<f64> {
        let reply = self.vqa(image, question, "yes_probability")?;
        self.field("/vqa", &reply, "yes_probability")?
            .as_f64()
            .ok_or_else(|| self.bad_reply("/vqa", "yes_probability is not a number".into()))
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, kind: BackendKind, req: &GenerationRequest) -> Result<RgbImage> {
        let mut body = json!({
            "prompt": req.prompt,
            "seed": req.seed,
            "steps": req.steps,
            "guidance": req.guidance,
            "width": req.width,
            "height": req.height,
            "model_id": req.model_id.as_deref().unwrap_or(&self.model_id),
        });
        if let Some(img) = &req.init_image {
            body["init_image"] = b64_png(img)?.into();
        }
        if let Some(img) = &req.condition_image {
            body["condition_image"] = b64_png(img)?.into();
        }
        if let Some(v) = &req.subject_embedding {
            body["subject_embedding"] = json!(v);
        }
        let path = format!("/generate/{kind}");
        let reply = self.post(&path, &body, Some(&req.digest(kind)))?;
        let png = self.image_field(&path, &reply, "image")?;
        raster::decode_png(&png)
    }
}

impl EmbeddingBackend for HttpBackend {
    fn supports(&self, _modality: Modality) -> bool {
        // the service decides; unsupported content comes back as a 4xx
        true
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector> {
        let mut body = json!({ "model_id": self.model_id });
        let mut key = Hasher::new("embed-http");
        match content {
            EmbedContent::Image(img) => {
                body["image"] = b64_png(img)?.into();
                key.raster(img);
            }
            EmbedContent::Text(t) => {
                body["text"] = (*t).into();
                key.str(t);
            }
            EmbedContent::Pair(img, t) => {
                body["image"] = b64_png(img)?.into();
                body["text"] = (*t).into();
                key.raster(img).str(t);
            }
        }
        let reply = self.post("/embed", &body, Some(&key.finish()))?;
        let values = self
            .field("/embed", &reply, "embedding")?
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| self.bad_reply("/embed", "embedding is not a number array".into()))?;
        Ok(EmbeddingVector {
            values,
            modality: content.modality(),
        })
    }
}

impl SegmentationBackend for HttpBackend {
    fn segment(&self, image: &RgbImage) -> Result<SegmentationMask> {
        let body = json!({ "image": b64_png(image)?, "model_id": self.model_id });
        let key = Hasher::new("segment-http").raster(image).finish();
        let reply = self.post("/segment", &body, Some(&key))?;
        let png = self.image_field("/segment", &reply, "mask")?;
        let mut mask = raster::decode_gray_png(&png)?;
        // services commonly return 0/255 masks
        for p in mask.pixels_mut() {
            p[0] = u8::from(p[0] != 0);
        }
        Ok(SegmentationMask { mask })
    }
}
