use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::prompt::PromptPayload;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// A model that rewrites a passage into every sensitive group plus a
/// neutral version. Implementations return the raw reply body; parsing and
/// validation happen in the pipeline.
pub trait LlmClient: Send + Sync {
    /// Short identity used in logs and provenance.
    fn endpoint(&self) -> String;

    fn complete(&self, payload: &PromptPayload) -> Result<String>;
}

/// A validated reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmReply {
    pub neutral: String,
    pub groups: IndexMap<String, String>,
    pub confidence: f64,
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a reply body and checks it covers every attribute and carries a
/// confidence in `[0, 1]`. Unknown groups are dropped; groups come back in
/// `attributes` order.
pub fn parse_reply(raw: &str, attributes: &[String]) -> Result<LlmReply> {
    let fail = |reason: String| Error::ReplyFormat {
        reason,
        raw: raw.to_string(),
    };
    let value: Value =
        serde_json::from_str(strip_code_fence(raw)).map_err(|e| fail(format!("not JSON: {e}")))?;
    let neutral = value
        .get("neutral")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| fail("missing neutral text".into()))?;
    let groups = value
        .get("groups")
        .and_then(Value::as_object)
        .ok_or_else(|| fail("missing groups object".into()))?;
    let mut texts = IndexMap::new();
    for attr in attributes {
        let text = groups
            .get(attr)
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| fail(format!("missing {attr:?} text")))?;
        texts.insert(attr.clone(), text.to_string());
    }
    let confidence = value
        .get("confidence")
        .and_then(Value::as_f64)
        .ok_or_else(|| fail("missing or non-numeric confidence".into()))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(fail(format!("confidence {confidence} outside [0, 1]")));
    }
    Ok(LlmReply {
        neutral: neutral.to_string(),
        groups: texts,
        confidence,
    })
}

/// One line of a scripted reply file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedReply {
    /// Source text; its digest is used when `source_sha256` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sha256: Option<String>,
    /// Only used when the prompt carries an exemplar with this original text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_example: Option<String>,
    /// Number of transport failures to simulate before answering.
    #[serde(default)]
    pub fail_times: u32,
    /// Reply body. A JSON string is returned verbatim, anything else is
    /// serialized.
    pub reply: Value,
}

/// Deterministic file-backed model double. Replies are keyed by the SHA-256
/// of the source text; a reply conditioned on an exemplar wins over an
/// unconditional one when that exemplar is in the prompt.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    by_digest: HashMap<String, Vec<usize>>,
    replies: Vec<ScriptedReply>,
    failures: Mutex<HashMap<usize, u32>>,
    calls: Mutex<Vec<PromptPayload>>,
}

impl ScriptedLlm {
    pub fn new(replies: Vec<ScriptedReply>) -> Result<Self> {
        let mut by_digest: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in replies.iter().enumerate() {
            let digest = match (&r.source_sha256, &r.source) {
                (Some(d), _) => d.to_lowercase(),
                (None, Some(s)) => sha256_hex(s),
                (None, None) => {
                    return Err(Error::Format(format!(
                        "scripted reply {} has neither source nor source_sha256",
                        i + 1
                    )))
                }
            };
            by_digest.entry(digest).or_default().push(i);
        }
        Ok(Self {
            by_digest,
            replies,
            ..Default::default()
        })
    }

    /// Reads a line-delimited reply script.
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(crate::io::read_json_lines(path)?)
    }

    /// Every payload received so far, in call order.
    pub fn calls(&self) -> Vec<PromptPayload> {
        self.calls.lock().unwrap().clone()
    }

    fn pick(&self, payload: &PromptPayload) -> Option<usize> {
        let candidates = self.by_digest.get(&sha256_hex(&payload.source))?;
        let has_example =
            |text: &str| payload.examples.iter().any(|ex| ex.original == text);
        candidates
            .iter()
            .copied()
            .find(|&i| {
                self.replies[i]
                    .when_example
                    .as_deref()
                    .is_some_and(has_example)
            })
            .or_else(|| {
                candidates
                    .iter()
                    .copied()
                    .find(|&i| self.replies[i].when_example.is_none())
            })
    }
}

impl LlmClient for ScriptedLlm {
    fn endpoint(&self) -> String {
        "scripted-mock".into()
    }

    fn complete(&self, payload: &PromptPayload) -> Result<String> {
        self.calls.lock().unwrap().push(payload.clone());
        let idx = self.pick(payload).ok_or_else(|| {
            Error::Transport(format!(
                "no scripted reply for source digest {}",
                sha256_hex(&payload.source)
            ))
        })?;
        let entry = &self.replies[idx];
        {
            let mut failures = self.failures.lock().unwrap();
            let seen = failures.entry(idx).or_insert(0);
            if *seen < entry.fail_times {
                *seen += 1;
                return Err(Error::Transport(format!("simulated failure {}", *seen)));
            }
        }
        Ok(match &entry.reply {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }
}
