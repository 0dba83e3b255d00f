use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

pub trait LlmClient {
    /// One completion for the given conversation.
    fn chat(&mut self, messages: &[ChatMessage]) -> Result<String>;
    fn tag(&self) -> String;
}

impl LlmClient for Box<dyn LlmClient> {
    fn chat(&mut self, messages: &[ChatMessage]) -> Result<String> {
        (**self).chat(messages)
    }
    fn tag(&self) -> String {
        (**self).tag()
    }
}

/// Accepts "3", "Candidate 3", "answer: 3" and casing/whitespace variants;
/// anything else is a parse failure. Returns the 1-based index when it lies
/// in [1, candidate_count].
pub fn parse_choice_reply(reply: &str, candidate_count: usize) -> Option<usize> {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?i)^\s*(?:answer\s*:?\s*)?(?:candidate\s+)?(\d+)\s*$")
            .expect("valid pattern")
    });
    let idx: usize = re.captures(reply)?.get(1)?.as_str().parse().ok()?;
    (1..=candidate_count).contains(&idx).then_some(idx)
}

/// Scripted language model for tests and offline runs. Sessions are matched
/// by an instruction substring against the conversation; each matched call
/// consumes the session's next reply.
///
/// A reply of the form `@pick-by-neighbor-label <text>` is resolved against
/// the prompt it answers: the mock returns the number of the first candidate
/// whose nearby-objects list mentions `<text>`, or "1" when none does.
pub struct ScriptedLlm {
    sessions: Vec<ScriptState>,
}

struct ScriptState {
    instruction: Option<String>,
    replies: Vec<String>,
    cursor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default, rename = "session")]
    pub sessions: Vec<ScriptSession>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSession {
    #[serde(default)]
    pub instruction: Option<String>,
    pub replies: Vec<String>,
}

impl ScriptedLlm {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
        let file: ScriptFile =
            toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        Ok(Self::from_script(file))
    }

    pub fn from_script(file: ScriptFile) -> Self {
        Self {
            sessions: file
                .sessions
                .into_iter()
                .map(|s| ScriptState { instruction: s.instruction, replies: s.replies, cursor: 0 })
                .collect(),
        }
    }

    fn resolve_directive(reply: &str, prompt: &str) -> String {
        let Some(label) = reply.strip_prefix("@pick-by-neighbor-label ") else {
            return reply.to_string();
        };
        let needle = label.trim().to_lowercase();
        for line in prompt.lines() {
            let Some(rest) = line.trim().strip_prefix("Candidate ") else { continue };
            let Some((number, body)) = rest.split_once(':') else { continue };
            let Some((_, nearby)) = body.split_once("nearby:") else { continue };
            if nearby.to_lowercase().contains(&needle) {
                return number.trim().to_string();
            }
        }
        "1".to_string()
    }
}

impl LlmClient for ScriptedLlm {
    fn chat(&mut self, messages: &[ChatMessage]) -> Result<String> {
        let conversation: String = messages
            .iter()
            .filter(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let idx = self
            .sessions
            .iter()
            .position(|s| {
                s.instruction
                    .as_deref()
                    .is_some_and(|i| conversation.contains(i))
            })
            .or_else(|| self.sessions.iter().position(|s| s.instruction.is_none()))
            .ok_or_else(|| Error::llm("no scripted session matches the prompt"))?;
        let session = &mut self.sessions[idx];
        let reply = session
            .replies
            .get(session.cursor)
            .ok_or_else(|| Error::llm("scripted session ran out of replies"))?
            .clone();
        session.cursor += 1;
        let prompt = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        Ok(Self::resolve_directive(&reply, prompt))
    }

    fn tag(&self) -> String {
        "scripted".to_string()
    }
}

pub const LLM_URL_ENV: &str = "INSTMAP_LLM_BASE_URL";
pub const LLM_KEY_ENV: &str = "INSTMAP_LLM_API_KEY";
pub const LLM_MODEL_ENV: &str = "INSTMAP_LLM_MODEL";

/// Chat-completions client against an OpenAI-compatible endpoint.
pub struct HttpLlm {
    base: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl HttpLlm {
    pub fn connect(base: Option<&str>) -> Result<Self> {
        let base = match base {
            Some(b) => b.to_string(),
            None => std::env::var(LLM_URL_ENV).map_err(|_| {
                Error::llm(format!("no language-model endpoint: pass a url or set {LLM_URL_ENV}"))
            })?,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::llm(format!("http client: {e}")))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            api_key: std::env::var(LLM_KEY_ENV).ok(),
            model: std::env::var(LLM_MODEL_ENV).unwrap_or_else(|_| "default".to_string()),
            client,
        })
    }
}

impl LlmClient for HttpLlm {
    fn chat(&mut self, messages: &[ChatMessage]) -> Result<String> {
        let url = format!("{}/v1/chat/completions", self.base);
        let mut req = self
            .client
            .post(&url)
            .json(&ChatRequest { model: &self.model, messages });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::llm(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::llm(format!("{url}: status {}", resp.status())));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Error::llm(format!("{url}: bad response: {e}")))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| Error::llm(format!("{url}: empty choices")))
    }

    fn tag(&self) -> String {
        format!("http({}, {})", self.base, self.model)
    }
}
