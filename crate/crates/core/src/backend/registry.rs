use std::collections::BTreeMap;
use std::sync::Arc;

use super::{BackendConfig, BackendError, ModelBackend, OpenAiCompatibleBackend, ScriptedBackend};

/// Builds a backend strategy for a config.
pub type BackendFactory = Arc<dyn Fn(&BackendConfig) -> Result<Arc<dyn ModelBackend>, BackendError> + Send + Sync>;

/// Backend strategies by name; [`BackendConfig::kind`] selects one.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `openai` always; `mock` when a scripted backend is supplied. All
    /// configs resolving to the same name share one instance.
    pub fn with_defaults(mock: Option<Arc<ScriptedBackend>>) -> Self {
        let mut reg = Self::new();
        let http: Arc<dyn ModelBackend> = Arc::new(OpenAiCompatibleBackend::new());
        reg.register(
            "openai",
            Arc::new(move |cfg: &BackendConfig| {
                url::Url::parse(&cfg.endpoint_url)
                    .map_err(|e| BackendError::Config(format!("endpoint_url {:?}: {e}", cfg.endpoint_url)))?;
                Ok(http.clone())
            }),
        );
        if let Some(mock) = mock {
            reg.register("mock", Arc::new(move |_| Ok(mock.clone() as Arc<dyn ModelBackend>)));
        }
        reg
    }

    pub fn register(&mut self, name: &str, factory: BackendFactory) -> &mut Self {
        self.factories.insert(name.to_string(), factory);
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, cfg: &BackendConfig) -> Result<Arc<dyn ModelBackend>, BackendError> {
        let factory = self.factories.get(&cfg.kind).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown backend kind {:?} (available: {})",
                cfg.kind,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockScript;

    #[test]
    fn resolves_by_kind() {
        let reg = BackendRegistry::with_defaults(Some(Arc::new(ScriptedBackend::new(MockScript::default()))));
        assert_eq!(reg.build(&BackendConfig::mock()).unwrap().name(), "mock");
        let live = BackendConfig {
            endpoint_url: "http://localhost:8000/v1".into(),
            ..BackendConfig::default()
        };
        assert_eq!(reg.build(&live).unwrap().name(), "openai");
        assert!(matches!(
            reg.build(&BackendConfig::default()),
            Err(BackendError::Config(_))
        ));
        let err = reg
            .build(&BackendConfig {
                kind: "nope".into(),
                ..BackendConfig::default()
            })
            .err()
            .unwrap();
        assert!(err.to_string().contains("mock, openai"));
    }

    #[test]
    fn mock_requires_a_script() {
        let reg = BackendRegistry::with_defaults(None);
        assert!(reg.build(&BackendConfig::mock()).is_err());
    }
}
