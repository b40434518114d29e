use std::sync::Arc;

use crate::backend::{BackendCallRecord, CallScope, ChatRequest, Message, ModelClient};
use crate::evidence::{option_letter, Question};
use crate::prompts::{Bindings, PromptSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizationOutcome {
    pub index: Option<usize>,
    pub note: Option<String>,
}

/// Reads a letter or `NONE` from the normalizer's reply.
pub fn parse_normalizer_reply(reply: &str, n_choices: usize) -> NormalizationOutcome {
    let token: String = reply
        .trim()
        .trim_start_matches(['(', '"', '\'', '*'])
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect();
    if token.eq_ignore_ascii_case("none") {
        return NormalizationOutcome {
            index: None,
            note: Some("normalizer answered NONE".into()),
        };
    }
    let mut chars = token.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
            if idx < n_choices {
                NormalizationOutcome {
                    index: Some(idx),
                    note: None,
                }
            } else {
                NormalizationOutcome {
                    index: None,
                    note: Some(format!(
                        "invalid letter {} for choices A-{}",
                        c.to_ascii_uppercase(),
                        option_letter(n_choices - 1)
                    )),
                }
            }
        }
        _ => NormalizationOutcome {
            index: None,
            note: Some(format!("unrecognized normalizer reply {reply:?}")),
        },
    }
}

/// Maps free-form answers onto a choice letter with a text model.
#[derive(Debug, Clone)]
pub struct LlmNormalizer {
    pub client: ModelClient,
    pub prompts: Arc<PromptSet>,
    pub temperature: f64,
}

impl LlmNormalizer {
    pub fn new(client: ModelClient, prompts: Arc<PromptSet>) -> Self {
        Self {
            client,
            prompts,
            temperature: 0.0,
        }
    }

    pub fn normalize(
        &self,
        scope: &CallScope,
        raw: &str,
        q: &Question,
        log: &mut Vec<BackendCallRecord>,
    ) -> NormalizationOutcome {
        let vars = Bindings::new().set("raw", raw).set("choices", q.lettered_choices());
        let prompt = match self.prompts.render("normalize", &vars) {
            Ok(p) => p,
            Err(e) => {
                return NormalizationOutcome {
                    index: None,
                    note: Some(e.to_string()),
                }
            }
        };
        let mut messages = Vec::new();
        if let Some(s) = prompt.system {
            messages.push(Message::system(s));
        }
        messages.push(Message::user(prompt.user));
        let mut req = ChatRequest::new(messages);
        req.temperature = self.temperature;
        req.max_tokens = 8;
        req.tag = Some("normalize".into());
        match self.client.chat(scope, req, log) {
            Ok(reply) => parse_normalizer_reply(&reply, q.choices.len()),
            Err(e) => NormalizationOutcome {
                index: None,
                note: Some(format!("normalizer failed: {e}")),
            },
        }
    }
}
