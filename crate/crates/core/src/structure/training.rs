//! Fine-tuning job submission for the anchor and neighbor experts. The
//! diffusion training loop itself runs in an external service.

use std::path::PathBuf;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::dataset::TrainingDatasets;
use super::{ExpertSet, StructureLayout};
use crate::backends::{BackendDescriptor, BackendKind, SeedPolicy, DEFAULT_TIMEOUT_S, STUB_ENDPOINT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub optimizer: String,
    pub base_model_id: String,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            learning_rate: 1e-5,
            batch_size: 1,
            optimizer: "adam".into(),
            base_model_id: "stable-diffusion-v1-5".into(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.epochs == 0 {
            errors.push("training.epochs must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push("training.learning_rate must be positive".to_string());
        }
        if self.batch_size == 0 {
            errors.push("training.batch_size must be positive".to_string());
        }
        if self.optimizer.trim().is_empty() {
            errors.push("training.optimizer is empty".to_string());
        }
        if self.base_model_id.trim().is_empty() {
            errors.push("training.base_model_id is empty".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub expert_id: String,
    pub kind: BackendKind,
    pub dataset_manifest: PathBuf,
    pub dataset_digest: String,
    pub config: TrainingConfig,
}

pub trait TrainingBackend: Send + Sync {
    /// Runs one job to completion and returns a descriptor for the
    /// fine-tuned model.
    fn train(&self, job: &TrainingJob) -> Result<BackendDescriptor>;
}

/// Records submitted jobs and hands back descriptors derived from the
/// dataset digest.
#[derive(Default)]
pub struct StubTrainer {
    jobs: Mutex<Vec<TrainingJob>>,
}

impl StubTrainer {
    pub fn jobs(&self) -> Vec<TrainingJob> {
        let mut jobs = self.jobs.lock().expect("stub trainer lock").clone();
        jobs.sort_by(|a, b| a.expert_id.cmp(&b.expert_id));
        jobs
    }
}

impl TrainingBackend for StubTrainer {
    fn train(&self, job: &TrainingJob) -> Result<BackendDescriptor> {
        self.jobs.lock().expect("stub trainer lock").push(job.clone());
        Ok(BackendDescriptor {
            kind: job.kind,
            endpoint: STUB_ENDPOINT.into(),
            model_id: format!("stub-{}-{}", job.expert_id, &job.dataset_digest[..12]),
            timeout_s: DEFAULT_TIMEOUT_S,
            seed_policy: SeedPolicy::Caller,
            fixed_seed: 0,
        })
    }
}

/// Client for a training service exposing `POST /train` (returns
/// `{"job_id"}`) and `GET /train/{job_id}` (returns `{"status"}` with
/// `running`, `succeeded` plus `model_id`, or `failed` plus `log`).
pub struct HttpTrainer {
    base: String,
    client: reqwest::blocking::Client,
    poll_interval: Duration,
    max_polls: u32,
}

impl HttpTrainer {
    pub fn new(endpoint: &str, poll_interval: Duration, max_polls: u32) -> Result<Self> {
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(Error::invalid(format!("training endpoint {endpoint:?} is not a URL")));
        }
        Ok(HttpTrainer {
            base: endpoint.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("HTTP client without TLS always builds"),
            poll_interval,
            max_polls,
        })
    }

    fn call(&self, req: reqwest::blocking::RequestBuilder, url: &str) -> Result<Value> {
        let resp = req.send().map_err(|e| Error::BackendUnavailable {
            endpoint: url.to_string(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if !status.is_success() {
            return Err(Error::Backend {
                endpoint: url.to_string(),
                status: status.as_u16(),
                attempts: 1,
                retryable: status.is_server_error(),
                message: text,
            });
        }
        Ok(serde_json::from_str(&text)?)
    }
}

impl TrainingBackend for HttpTrainer {
    fn train(&self, job: &TrainingJob) -> Result<BackendDescriptor> {
        let url = format!("{}/train", self.base);
        let submitted = self.call(self.client.post(&url).json(&json!(job)), &url)?;
        let job_id = submitted["job_id"]
            .as_str()
            .ok_or_else(|| Error::invalid(format!("{url} reply lacks job_id")))?
            .to_string();
        let status_url = format!("{url}/{job_id}");
        for _ in 0..self.max_polls {
            let status = self.call(self.client.get(&status_url), &status_url)?;
            match status["status"].as_str() {
                Some("succeeded") => {
                    let model_id = status["model_id"]
                        .as_str()
                        .ok_or_else(|| Error::invalid(format!("{status_url} reply lacks model_id")))?;
                    return Ok(BackendDescriptor {
                        kind: job.kind,
                        endpoint: status["endpoint"].as_str().unwrap_or(&self.base).to_string(),
                        model_id: model_id.to_string(),
                        timeout_s: DEFAULT_TIMEOUT_S,
                        seed_policy: SeedPolicy::Caller,
                        fixed_seed: 0,
                    });
                }
                Some("failed") => {
                    return Err(Error::TrainingFailed {
                        expert: job.expert_id.clone(),
                        log: status["log"].as_str().unwrap_or(&status_url).to_string(),
                    })
                }
                _ => thread::sleep(self.poll_interval),
            }
        }
        Err(Error::Timeout {
            endpoint: status_url,
            timeout_s: self.poll_interval.as_secs_f64() * self.max_polls as f64,
        })
    }
}

/// Submits one job per expert (concurrently) and collects the result.
pub fn train_experts(
    datasets: &TrainingDatasets,
    config: &TrainingConfig,
    trainer: &dyn TrainingBackend,
) -> Result<ExpertSet> {
    config.validate()?;
    let ids = datasets.layout.expert_ids();
    let jobs: Vec<TrainingJob> = ids
        .iter()
        .map(|id| {
            let manifest = datasets
                .manifests
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no dataset for expert {id}")))?;
            Ok(TrainingJob {
                expert_id: id.clone(),
                kind: if id == super::ANCHOR_ID || id == super::SINGLE_DM_ID {
                    BackendKind::Text2image
                } else {
                    BackendKind::Image2image
                },
                dataset_manifest: manifest.clone(),
                dataset_digest: datasets.digests[id].clone(),
                config: config.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut descriptors: Vec<BackendDescriptor> = jobs
        .par_iter()
        .map(|job| trainer.train(job))
        .collect::<Result<_>>()?;
    let anchor_expert = descriptors.remove(0);
    let set = ExpertSet {
        anchor_expert,
        neighbor_experts: descriptors,
        layout: datasets.layout.clone(),
        training_config: config.clone(),
        dataset_digests: datasets.digests.clone(),
    };
    set.validate()?;
    Ok(set)
}

/// Expert ids in training order for `layout`.
pub(super) fn expert_ids(layout: &StructureLayout) -> Vec<String> {
    match layout {
        StructureLayout::MultiExpert { assignment } => std::iter::once(super::ANCHOR_ID.to_string())
            .chain((0..assignment.anchor_indices.len()).map(super::neighbor_id))
            .collect(),
        StructureLayout::SingleDm { .. } => vec![super::SINGLE_DM_ID.to_string()],
    }
}
