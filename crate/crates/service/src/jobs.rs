//! In-memory job table. Jobs move forward only: queued → running → done | failed.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ulid::Ulid;

use crate::engine::JobKind;
use crate::error::ErrorBody;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub request: Value,
    pub result: Option<Value>,
    pub error: Option<ErrorBody>,
    pub timing: Timing,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Default)]
pub struct JobStore {
    jobs: Mutex<HashMap<String, Job>>,
}

impl JobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, kind: JobKind, request: Value) -> String {
        let id = Ulid::new().to_string();
        let job = Job {
            id: id.clone(),
            kind,
            state: JobState::Queued,
            request,
            result: None,
            error: None,
            timing: Timing { created_ms: now_ms(), ..Timing::default() },
        };
        self.jobs.lock().expect("job table poisoned").insert(id.clone(), job);
        id
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job table poisoned").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().expect("job table poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `f` only if it moves the job strictly forward.
    fn advance(&self, id: &str, to: JobState, f: impl FnOnce(&mut Job)) -> bool {
        let mut jobs = self.jobs.lock().expect("job table poisoned");
        match jobs.get_mut(id) {
            Some(job) if job.state < to && !job.state.is_terminal() => {
                job.state = to;
                f(job);
                true
            }
            _ => false,
        }
    }

    pub fn start(&self, id: &str) -> bool {
        self.advance(id, JobState::Running, |j| j.timing.started_ms = Some(now_ms()))
    }

    pub fn finish(&self, id: &str, result: Value) -> bool {
        self.advance(id, JobState::Done, |j| {
            j.result = Some(result);
            j.timing.finished_ms = Some(now_ms());
        })
    }

    pub fn fail(&self, id: &str, error: ErrorBody) -> bool {
        self.advance(id, JobState::Failed, |j| {
            j.error = Some(error);
            j.timing.finished_ms = Some(now_ms());
        })
    }
}
