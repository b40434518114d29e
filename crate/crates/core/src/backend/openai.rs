//! OpenAI-compatible HTTP backend.
//!
//! Chat uses `POST {endpoint}/chat/completions`. Audio captioning and audio QA
//! use the same endpoint with an `input_audio` content part carrying the
//! base64 audio. Transcription uses `POST {endpoint}/audio/transcriptions`
//! as a multipart upload.

use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{multipart, Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendCall, BackendConfig, BackendError, CallScope, ChatRequest, ModelBackend, Role};
use crate::evidence::AudioRef;

/// The HTTP client is built on first use, so mock-only runs never set up TLS.
#[derive(Debug, Clone, Default)]
pub struct OpenAiCompatibleBackend {
    http: OnceLock<Client>,
}

impl OpenAiCompatibleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn http(&self) -> &Client {
        self.http.get_or_init(Client::new)
    }

    fn url(cfg: &BackendConfig, path: &str) -> Result<String, BackendError> {
        let base = cfg.endpoint_url.trim_end_matches('/');
        url::Url::parse(base).map_err(|e| BackendError::Config(format!("endpoint_url {base:?}: {e}")))?;
        Ok(format!("{base}/{path}"))
    }

    fn authorized(cfg: &BackendConfig, req: RequestBuilder) -> Result<RequestBuilder, BackendError> {
        let req = req.timeout(Duration::from_secs_f64(cfg.timeout_s));
        Ok(match cfg.api_key()? {
            Some(key) => req.bearer_auth(key),
            None => req,
        })
    }

    fn send(req: RequestBuilder) -> Result<Value, BackendError> {
        let resp = req.send().map_err(|e| BackendError::Transport {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
        })?;
        Self::decode(resp)
    }

    fn decode(resp: Response) -> Result<Value, BackendError> {
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::transient(e.to_string()))?;
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("{status}: {}", snippet(&body))));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT || status.is_server_error()
        {
            return Err(BackendError::transient(format!("{status}: {}", snippet(&body))));
        }
        if !status.is_success() {
            return Err(BackendError::Transport {
                message: format!("{status}: {}", snippet(&body)),
                retryable: false,
            });
        }
        serde_json::from_str(&body).map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", snippet(&body))))
    }

    fn chat_body(cfg: &BackendConfig, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({"role": role_name(m.role), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": cfg.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stream": false,
        });
        if req.response_hint {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }

    fn audio_body(&self, cfg: &BackendConfig, audio: &AudioRef, prompt: &str) -> Result<Value, BackendError> {
        let data = base64::engine::general_purpose::STANDARD.encode(self.fetch_audio(audio)?);
        Ok(json!({
            "model": cfg.model_id,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "input_audio", "input_audio": {"data": data, "format": audio.media_type}},
                ],
            }],
            "stream": false,
        }))
    }

    fn fetch_audio(&self, audio: &AudioRef) -> Result<Vec<u8>, BackendError> {
        let uri = audio.uri.as_str();
        if uri.starts_with("http://") || uri.starts_with("https://") {
            let resp = self
                .http()
                .get(uri)
                .send()
                .map_err(|e| BackendError::AudioUnavailable(format!("{uri}: {e}")))?;
            if !resp.status().is_success() {
                return Err(BackendError::AudioUnavailable(format!("{uri}: {}", resp.status())));
            }
            return resp
                .bytes()
                .map(|b| b.to_vec())
                .map_err(|e| BackendError::AudioUnavailable(format!("{uri}: {e}")));
        }
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        std::fs::read(path).map_err(|e| BackendError::AudioUnavailable(format!("{path}: {e}")))
    }

    fn completion_text(v: &Value) -> Result<String, BackendError> {
        let content = &v["choices"][0]["message"]["content"];
        match content {
            Value::String(s) => Ok(s.clone()),
            Value::Array(parts) => Ok(parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join("")),
            _ => Err(BackendError::MalformedResponse(format!(
                "no choices[0].message.content in {}",
                snippet(&v.to_string())
            ))),
        }
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn snippet(s: &str) -> String {
    const MAX: usize = 200;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        format!("{}...", s.chars().take(MAX).collect::<String>())
    }
}

impl ModelBackend for OpenAiCompatibleBackend {
    fn name(&self) -> &str {
        "openai"
    }

    fn invoke(&self, _scope: &CallScope, cfg: &BackendConfig, call: &BackendCall) -> Result<String, BackendError> {
        match call {
            BackendCall::Chat(req) => {
                let http = self.http().post(Self::url(cfg, "chat/completions")?);
                let v = Self::send(Self::authorized(cfg, http)?.json(&Self::chat_body(cfg, req)))?;
                Self::completion_text(&v)
            }
            BackendCall::AudioCaption { audio, prompt, .. } | BackendCall::AudioQa { audio, prompt, .. } => {
                let body = self.audio_body(cfg, audio, prompt)?;
                let http = self.http().post(Self::url(cfg, "chat/completions")?);
                let v = Self::send(Self::authorized(cfg, http)?.json(&body))?;
                Self::completion_text(&v)
            }
            BackendCall::Transcribe { audio } => {
                let bytes = self.fetch_audio(audio)?;
                let part = multipart::Part::bytes(bytes)
                    .file_name(audio.file_name().to_string())
                    .mime_str(&format!("audio/{}", audio.media_type))
                    .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
                let form = multipart::Form::new()
                    .text("model", cfg.model_id.clone())
                    .part("file", part);
                let http = self.http().post(Self::url(cfg, "audio/transcriptions")?);
                let v = Self::send(Self::authorized(cfg, http)?.multipart(form))?;
                v["text"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| BackendError::MalformedResponse("transcription has no text field".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    #[test]
    fn chat_body_shape() {
        let cfg = BackendConfig {
            model_id: "gpt-x".into(),
            ..BackendConfig::default()
        };
        let mut req = ChatRequest::new(vec![Message::system("s"), Message::user("u")]);
        req.response_hint = true;
        req.tag = Some("plan".into());
        let body = OpenAiCompatibleBackend::chat_body(&cfg, &req);
        assert_eq!(body["model"], "gpt-x");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
        assert_eq!(body["response_format"]["type"], "json_object");
        assert!(body.get("tag").is_none());
    }

    #[test]
    fn completion_text_variants() {
        let v = json!({"choices":[{"message":{"content":"hi"}}]});
        assert_eq!(OpenAiCompatibleBackend::completion_text(&v).unwrap(), "hi");
        let v = json!({"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]});
        assert_eq!(OpenAiCompatibleBackend::completion_text(&v).unwrap(), "ab");
        assert!(OpenAiCompatibleBackend::completion_text(&json!({"choices":[]})).is_err());
    }

    #[test]
    fn missing_local_audio_is_unavailable() {
        let b = OpenAiCompatibleBackend::new();
        let audio = AudioRef::new("/definitely/not/here.wav", None, None).unwrap();
        assert!(matches!(b.fetch_audio(&audio), Err(BackendError::AudioUnavailable(_))));
    }
}
