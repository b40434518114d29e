//! Scripted, fully deterministic backend for tests and offline runs.
//!
//! A script is a JSON list of entries:
//!
//! ```json
//! [{"capability": "chat", "match_keys": ["@agent=plan", "speech"],
//!   "response": ["{\"status\":\"insufficient\",...}", "{\"status\":\"sufficient\"}"],
//!   "fail_times": 0}]
//! ```
//!
//! The first entry (in file order) whose capability matches and whose keys all
//! match handles the call. Keys starting with `@` test request metadata
//! exactly: `@sample=<id>`, `@label=<run label>`, `@agent=<tag>`,
//! `@audio=<uri or file name>`. Other keys must occur as substrings of the
//! request text (chat message contents, the re-caption focus, or the audio
//! query).
//!
//! Each entry counts its uses per [`CallScope`], so concurrent runs of
//! different samples never disturb each other. The first `fail_times` uses
//! fail with `fail_with`; later uses step through `response` when it is a
//! list, repeating the last element once exhausted.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendCall, BackendConfig, BackendError, CallScope, Capability, ModelBackend};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    #[default]
    Transient,
    Timeout,
    RateLimit,
    Auth,
    Unavailable,
    Malformed,
}

impl FailKind {
    fn error(self, capability: Capability) -> BackendError {
        match self {
            FailKind::Transient => BackendError::transient(format!("scripted {capability} failure (503)")),
            FailKind::Timeout => BackendError::transient(format!("scripted {capability} timeout")),
            FailKind::RateLimit => BackendError::transient(format!("scripted {capability} rate limit (429)")),
            FailKind::Auth => BackendError::Auth(format!("scripted {capability} auth failure")),
            FailKind::Unavailable => {
                BackendError::AudioUnavailable(format!("scripted {capability}: audio unavailable"))
            }
            FailKind::Malformed => BackendError::MalformedResponse(format!("scripted {capability}: malformed body")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    One(String),
    Sequence(Vec<String>),
}

impl ScriptedResponse {
    fn at(&self, i: usize) -> String {
        match self {
            ScriptedResponse::One(s) => s.clone(),
            ScriptedResponse::Sequence(v) => v.get(i).or(v.last()).cloned().unwrap_or_default(),
        }
    }
}

impl From<&str> for ScriptedResponse {
    fn from(s: &str) -> Self {
        ScriptedResponse::One(s.to_string())
    }
}

impl From<String> for ScriptedResponse {
    fn from(s: String) -> Self {
        ScriptedResponse::One(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub capability: Capability,
    #[serde(default)]
    pub match_keys: Vec<String>,
    pub response: ScriptedResponse,
    #[serde(default)]
    pub fail_times: u32,
    #[serde(default)]
    pub fail_with: FailKind,
}

impl MockEntry {
    pub fn new(capability: Capability, keys: &[&str], response: impl Into<ScriptedResponse>) -> Self {
        Self {
            capability,
            match_keys: keys.iter().map(|k| k.to_string()).collect(),
            response: response.into(),
            fail_times: 0,
            fail_with: FailKind::Transient,
        }
    }

    pub fn sequence(capability: Capability, keys: &[&str], responses: &[&str]) -> Self {
        let mut e = Self::new(capability, keys, "");
        e.response = ScriptedResponse::Sequence(responses.iter().map(|s| s.to_string()).collect());
        e
    }

    pub fn failing(mut self, times: u32, kind: FailKind) -> Self {
        self.fail_times = times;
        self.fail_with = kind;
        self
    }

    fn matches(&self, scope: &CallScope, call: &BackendCall) -> bool {
        if self.capability != call.capability() {
            return false;
        }
        let text = request_text(call);
        self.match_keys.iter().all(|key| match key.strip_prefix('@') {
            Some(meta) => match meta.split_once('=') {
                Some(("sample", v)) => scope.sample_id == v,
                Some(("label", v)) => scope.run_label == v,
                Some(("agent", v)) => call.tag() == Some(v),
                Some(("audio", v)) => audio_of(call).is_some_and(|(uri, name)| uri == v || name == v),
                _ => text.contains(key.as_str()),
            },
            None => text.contains(key.as_str()),
        })
    }
}

fn audio_of(call: &BackendCall) -> Option<(&str, &str)> {
    match call {
        BackendCall::Chat(_) => None,
        BackendCall::AudioCaption { audio, .. }
        | BackendCall::AudioQa { audio, .. }
        | BackendCall::Transcribe { audio } => Some((audio.uri.as_str(), audio.file_name())),
    }
}

fn request_text(call: &BackendCall) -> String {
    match call {
        BackendCall::Chat(req) => req
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        BackendCall::AudioCaption { instruction, .. } => instruction.clone().unwrap_or_default(),
        BackendCall::AudioQa { query, .. } => query.clone(),
        BackendCall::Transcribe { .. } => String::new(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        serde_json::from_str(json).map_err(|e| BackendError::Config(format!("mock script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn push(&mut self, entry: MockEntry) -> &mut Self {
        self.entries.push(entry);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }
}

/// One invocation seen by the mock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockInvocation {
    pub scope: CallScope,
    pub capability: Capability,
    pub tag: Option<String>,
    pub entry: Option<usize>,
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: MockScript,
    uses: Mutex<HashMap<(usize, CallScope), u32>>,
    invocations: Mutex<Vec<MockInvocation>>,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            uses: Mutex::default(),
            invocations: Mutex::default(),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// Invocations for one scope, in call order.
    pub fn invocations(&self, scope: &CallScope) -> Vec<MockInvocation> {
        self.invocations
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|i| &i.scope == scope)
            .cloned()
            .collect()
    }

    /// Forgets all per-scope counters.
    pub fn reset(&self) {
        self.uses.lock().unwrap_or_else(|e| e.into_inner()).clear();
        self.invocations.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn invoke(&self, scope: &CallScope, _cfg: &BackendConfig, call: &BackendCall) -> Result<String, BackendError> {
        let hit = self.script.entries.iter().position(|e| e.matches(scope, call));
        self.invocations
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(MockInvocation {
                scope: scope.clone(),
                capability: call.capability(),
                tag: call.tag().map(str::to_string),
                entry: hit,
            });
        let Some(idx) = hit else {
            return Err(BackendError::Transport {
                message: format!("no scripted response for {}", call.summary()),
                retryable: false,
            });
        };
        let entry = &self.script.entries[idx];
        let n = {
            let mut uses = self.uses.lock().unwrap_or_else(|e| e.into_inner());
            let n = uses.entry((idx, scope.clone())).or_insert(0);
            let current = *n;
            *n += 1;
            current
        };
        if n < entry.fail_times {
            return Err(entry.fail_with.error(call.capability()));
        }
        Ok(entry.response.at((n - entry.fail_times) as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatRequest, Message};
    use crate::evidence::AudioRef;

    fn chat(tag: &str, text: &str) -> BackendCall {
        let mut req = ChatRequest::new(vec![Message::user(text)]);
        req.tag = Some(tag.into());
        BackendCall::Chat(req)
    }

    #[test]
    fn sequences_advance_per_scope() {
        let backend = ScriptedBackend::new(MockScript::new(vec![MockEntry::sequence(
            Capability::Chat,
            &["@agent=plan"],
            &["one", "two"],
        )]));
        let cfg = BackendConfig::mock();
        let a = CallScope::new("a");
        let b = CallScope::new("b");
        let call = chat("plan", "x");
        assert_eq!(backend.invoke(&a, &cfg, &call).unwrap(), "one");
        assert_eq!(backend.invoke(&b, &cfg, &call).unwrap(), "one");
        assert_eq!(backend.invoke(&a, &cfg, &call).unwrap(), "two");
        assert_eq!(backend.invoke(&a, &cfg, &call).unwrap(), "two");
        assert_eq!(backend.invocations(&a).len(), 3);
    }

    #[test]
    fn metadata_keys_are_exact() {
        let backend = ScriptedBackend::new(MockScript::new(vec![
            MockEntry::new(Capability::Chat, &["@sample=s1", "@agent=answer"], "s1"),
            MockEntry::new(Capability::Chat, &["@agent=answer"], "other"),
        ]));
        let cfg = BackendConfig::mock();
        let call = chat("answer", "q");
        assert_eq!(backend.invoke(&CallScope::new("s1"), &cfg, &call).unwrap(), "s1");
        assert_eq!(backend.invoke(&CallScope::new("s10"), &cfg, &call).unwrap(), "other");
        assert!(backend.invoke(&CallScope::new("s1"), &cfg, &chat("plan", "q")).is_err());
    }

    #[test]
    fn audio_key_matches_uri_or_file_name() {
        let backend = ScriptedBackend::new(MockScript::new(vec![MockEntry::new(
            Capability::Transcribe,
            &["@audio=speech.wav"],
            "hello",
        )]));
        let cfg = BackendConfig::mock();
        let call = BackendCall::Transcribe {
            audio: AudioRef::new("/data/speech.wav", None, None).unwrap(),
        };
        assert_eq!(backend.invoke(&CallScope::new("x"), &cfg, &call).unwrap(), "hello");
    }

    #[test]
    fn script_round_trips_through_json() {
        let json = r#"[{"capability":"audio_qa","match_keys":["k"],"response":["a","b"],"fail_times":1,"fail_with":"rate_limit"}]"#;
        let script = MockScript::from_json(json).unwrap();
        assert_eq!(script.entries[0].fail_with, FailKind::RateLimit);
        assert_eq!(MockScript::from_json(&script.to_json()).unwrap(), script);
        assert!(MockScript::from_json(r#"[{"capability":"fax"}]"#).is_err());
    }
}
