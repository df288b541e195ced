use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::BackendKind;
use crate::error::{Error, Result};

/// One backend call. Request and response digests are content digests, so
/// two replays of the same stub pipeline produce identical records apart
/// from `seq` ordering under concurrency and `latency_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub stage: String,
    pub kind: BackendKind,
    pub op: String,
    pub model_id: String,
    pub request_digest: String,
    pub response_digest: String,
    pub latency_ms: f64,
    pub ok: bool,
}

impl TraceRecord {
    /// Latency-free identity of the call, stable across replays.
    pub fn call_digest(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.kind, self.op, self.request_digest, self.response_digest
        )
    }
}

/// Sorted call digests of the successful records.
pub fn call_digests(records: &[TraceRecord]) -> Vec<String> {
    let mut out: Vec<String> = records
        .iter()
        .filter(|r| r.ok)
        .map(TraceRecord::call_digest)
        .collect();
    out.sort();
    out
}

#[derive(Default)]
struct State {
    stage: String,
    records: Vec<TraceRecord>,
}

/// Append-only call log, optionally mirrored to a JSON-lines file.
pub struct TraceLog {
    state: Mutex<State>,
    sink: Option<Mutex<File>>,
}

impl TraceLog {
    pub fn in_memory() -> Self {
        TraceLog {
            state: Mutex::new(State::default()),
            sink: None,
        }
    }

    /// Appends to `path`, creating parent directories as needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TraceLog {
            state: Mutex::new(State::default()),
            sink: Some(Mutex::new(file)),
        })
    }

    /// Labels subsequent records with `stage`.
    pub fn set_stage(&self, stage: &str) {
        self.state.lock().expect("trace lock").stage = stage.to_string();
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record(
        &self,
        kind: BackendKind,
        op: &str,
        model_id: &str,
        request_digest: String,
        response_digest: String,
        latency_ms: f64,
        ok: bool,
    ) {
        let mut state = self.state.lock().expect("trace lock");
        let rec = TraceRecord {
            seq: state.records.len() as u64,
            stage: state.stage.clone(),
            kind,
            op: op.to_string(),
            model_id: model_id.to_string(),
            request_digest,
            response_digest,
            latency_ms,
            ok,
        };
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&rec).expect("trace record serializes");
            let mut f = sink.lock().expect("trace sink lock");
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("failed to append trace record: {e}");
            }
        }
        state.records.push(rec);
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.state.lock().expect("trace lock").records.clone()
    }

    /// Records appended after the first `mark` ones.
    pub fn records_since(&self, mark: usize) -> Vec<TraceRecord> {
        let state = self.state.lock().expect("trace lock");
        state.records.get(mark..).unwrap_or_default().to_vec()
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("trace lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of successful generation calls of `kind` recorded in `stage`.
    pub fn count(&self, stage: &str, kind: BackendKind) -> usize {
        self.state
            .lock()
            .expect("trace lock")
            .records
            .iter()
            .filter(|r| r.stage == stage && r.kind == kind && r.ok)
            .count()
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
