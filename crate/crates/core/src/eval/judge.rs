//! Client for an external rubric judge over HTTP.
//!
//! Nothing in the primary metrics depends on this module. Verdicts are
//! cached in memory and, optionally, on disk under the request hash.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_RUBRIC: &str = "tutor-v1";
pub const TOKEN_ENV: &str = "DDPO_JUDGE_TOKEN";

const RUBRIC_PROMPT: &str = "\
You grade one reply of a language tutor talking with a young learner.
Score each criterion from 1 (poor) to 5 (excellent):
- relevance: the reply fits the conversation so far.
- task: the reply keeps the learner practising and asks a question.
- richness: the reply offers varied, concrete language at the learner's level.
- guidance: the reply helps the learner say more, with hints or examples.
Answer with JSON only, in this shape:
{\"relevance\": {\"score\": 1, \"reason\": \"...\"}, \"task\": {...}, \"richness\": {...}, \"guidance\": {...}}";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub context: String,
    pub user_input: String,
    pub response: String,
    pub rubric_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub score: u8,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub relevance: Score,
    pub task: Score,
    pub richness: Score,
    pub guidance: Score,
}

impl JudgeVerdict {
    pub fn scores(&self) -> [u8; 4] {
        [
            self.relevance.score,
            self.task.score,
            self.richness.score,
            self.guidance.score,
        ]
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge rejected credentials (HTTP {status})")]
    Auth { status: u16 },

    #[error("judge unreachable after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },

    #[error("judge returned HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("judge reply is not a verdict: {message}")]
    Parse { message: String, raw: String },

    #[error("verdict cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Either a bare integer or `{score, reason}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawScore {
    Bare(i64),
    Full {
        score: i64,
        #[serde(default)]
        reason: String,
    },
}

#[derive(Deserialize)]
struct RawVerdict {
    relevance: RawScore,
    task: RawScore,
    richness: RawScore,
    guidance: RawScore,
}

fn to_score(name: &str, raw: RawScore) -> Result<Score, String> {
    let (score, reason) = match raw {
        RawScore::Bare(s) => (s, String::new()),
        RawScore::Full { score, reason } => (score, reason),
    };
    if !(1..=5).contains(&score) {
        return Err(format!("{name} score {score} is outside 1..=5"));
    }
    Ok(Score {
        score: score as u8,
        reason,
    })
}

/// Parses the four-score JSON reply.
pub fn parse_verdict(raw: &str) -> Result<JudgeVerdict, JudgeError> {
    let fail = |message: String| JudgeError::Parse {
        message,
        raw: raw.to_string(),
    };
    let v: RawVerdict = serde_json::from_str(raw.trim()).map_err(|e| fail(e.to_string()))?;
    Ok(JudgeVerdict {
        relevance: to_score("relevance", v.relevance).map_err(fail)?,
        task: to_score("task", v.task).map_err(fail)?,
        richness: to_score("richness", v.richness).map_err(fail)?,
        guidance: to_score("guidance", v.guidance).map_err(fail)?,
    })
}

#[derive(Serialize)]
struct Payload<'a> {
    system: &'a str,
    dialogue: &'a JudgeRequest,
}

#[derive(Debug, Clone)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub attempts: usize,
    pub backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl JudgeConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        JudgeConfig {
            endpoint: endpoint.into(),
            token: None,
            cache_dir: None,
            attempts: 3,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
        }
    }

    /// Reads the bearer token from [`TOKEN_ENV`] if set.
    pub fn with_env_token(mut self) -> Self {
        self.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }
}

/// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(JudgeError),
}

pub struct JudgeClient {
    config: JudgeConfig,
    agent: ureq::Agent,
    memory: Mutex<HashMap<String, JudgeVerdict>>,
    slots: Slots,
    network_calls: AtomicUsize,
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Slots {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        JudgeClient {
            config,
            agent,
            memory: Mutex::new(HashMap::new()),
            slots,
            network_calls: AtomicUsize::new(0),
        }
    }

    /// HTTP exchanges made so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Content hash of the endpoint and rendered payload.
    pub fn request_hash(&self, request: &JudgeRequest) -> String {
        let body = serde_json::to_vec(&Payload {
            system: RUBRIC_PROMPT,
            dialogue: request,
        })
        .expect("payload serializes");
        let mut h = Sha256::new();
        h.update(self.config.endpoint.as_bytes());
        h.update([0]);
        h.update(&body);
        hex::encode(h.finalize())
    }

    fn cache_path(&self, hash: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{hash}.json")))
    }

    fn cached(&self, hash: &str) -> Option<JudgeVerdict> {
        if let Some(v) = self.memory.lock().unwrap().get(hash) {
            return Some(v.clone());
        }
        let text = std::fs::read_to_string(self.cache_path(hash)?).ok()?;
        let v: JudgeVerdict = serde_json::from_str(&text).ok()?;
        self.memory
            .lock()
            .unwrap()
            .insert(hash.to_string(), v.clone());
        Some(v)
    }

    fn store(&self, hash: &str, verdict: &JudgeVerdict) -> Result<(), JudgeError> {
        self.memory
            .lock()
            .unwrap()
            .insert(hash.to_string(), verdict.clone());
        if let Some(path) = self.cache_path(hash) {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, serde_json::to_vec_pretty(verdict).expect("verdict serializes"))?;
        }
        Ok(())
    }

    fn exchange(&self, request: &JudgeRequest) -> Attempt {
        let _slot = self.slots.acquire();
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut call = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.token {
            call = call.header("Authorization", format!("Bearer {token}"));
        }
        let payload = Payload {
            system: RUBRIC_PROMPT,
            dialogue: request,
        };
        let mut response = match call.send_json(&payload) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let body = match response.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => Attempt::Done(body),
            401 | 403 => Attempt::Fatal(JudgeError::Auth { status }),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(JudgeError::Status { status, body }),
        }
    }

    /// Scores one reply, consulting the cache first.
    pub fn submit(&self, request: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let hash = self.request_hash(request);
        if let Some(v) = self.cached(&hash) {
            return Ok(v);
        }
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * (1 << (attempt - 1)));
            }
            match self.exchange(request) {
                Attempt::Done(body) => {
                    let verdict = parse_verdict(&body)?;
                    self.store(&hash, &verdict)?;
                    return Ok(verdict);
                }
                Attempt::Retry(message) => last = message,
                Attempt::Fatal(e) => return Err(e),
            }
        }
        Err(JudgeError::Transport {
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves the canned `(status, body)` replies in order, then repeats the
    /// last one. Returns the endpoint URL and a hit counter.
    fn stub(replies: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/judge", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                let _ = reader.read_exact(&mut body);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, text) = replies[n.min(replies.len() - 1)];
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        (url, hits)
    }

    fn request() -> JudgeRequest {
        JudgeRequest {
            context: "User: I like cats.".into(),
            user_input: "I like cats.".into(),
            response: "Do you like dogs too?".into(),
            rubric_id: DEFAULT_RUBRIC.into(),
        }
    }

    fn client(url: String) -> JudgeClient {
        JudgeClient::new(JudgeConfig {
            backoff: Duration::from_millis(1),
            timeout: Duration::from_secs(5),
            ..JudgeConfig::new(url)
        })
    }

    const FIXED: &str = r#"{"relevance": 4, "task": {"score": 4, "reason": "asks"}, "richness": 3, "guidance": 5}"#;

    #[test]
    fn fixed_verdict_and_cache_hit() {
        let (url, hits) = stub(vec![(200, FIXED)]);
        let c = client(url);
        let v = c.submit(&request()).unwrap();
        assert_eq!(v.scores(), [4, 4, 3, 5]);
        assert_eq!(v.task.reason, "asks");
        let again = c.submit(&request()).unwrap();
        assert_eq!(again, v);
        assert_eq!(c.network_calls(), 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn prose_reply_keeps_raw() {
        let (url, _) = stub(vec![(200, "The reply is quite good overall.")]);
        match client(url).submit(&request()) {
            Err(JudgeError::Parse { raw, .. }) => assert_eq!(raw, "The reply is quite good overall."),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_score_is_parse_error() {
        assert!(matches!(
            parse_verdict(r#"{"relevance": 6, "task": 1, "richness": 1, "guidance": 1}"#),
            Err(JudgeError::Parse { .. })
        ));
    }

    #[test]
    fn transient_failures_are_retried() {
        let (url, hits) = stub(vec![(503, "busy"), (500, "oops"), (200, FIXED)]);
        let v = client(url).submit(&request()).unwrap();
        assert_eq!(v.scores(), [4, 4, 3, 5]);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, hits) = stub(vec![(503, "busy")]);
        let err = client(url).submit(&request()).unwrap_err();
        assert!(matches!(err, JudgeError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_failure_is_distinct() {
        let (url, hits) = stub(vec![(401, "no")]);
        let err = client(url).submit(&request()).unwrap_err();
        assert!(matches!(err, JudgeError::Auth { status: 401 }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_is_transport() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let err = client(url).submit(&request()).unwrap_err();
        assert!(matches!(err, JudgeError::Transport { .. }), "{err}");
    }

    #[test]
    fn disk_cache_survives_new_client() {
        let dir = tempfile::tempdir().unwrap();
        let (url, hits) = stub(vec![(200, FIXED)]);
        let make = || {
            JudgeClient::new(JudgeConfig {
                cache_dir: Some(dir.path().to_path_buf()),
                ..JudgeConfig::new(url.clone())
            })
        };
        make().submit(&request()).unwrap();
        let second = make();
        assert_eq!(second.submit(&request()).unwrap().scores(), [4, 4, 3, 5]);
        assert_eq!(second.network_calls(), 0);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}
