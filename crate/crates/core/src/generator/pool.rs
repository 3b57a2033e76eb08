//! Named generator endpoints and role assignment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GenError, Generator, OpenAiCompletionClient, ScriptedGenerator};

/// Role used when an algorithm has no dedicated assignment.
pub const DEFAULT_ROLE: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Openai,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Script file for `scripted` endpoints.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointPoolConfig {
    pub endpoints: BTreeMap<String, EndpointConfig>,
    /// Role → endpoint name. `default` is used for any unassigned role.
    #[serde(default)]
    pub roles: BTreeMap<String, String>,
}

impl EndpointPoolConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.endpoints.is_empty() {
            return Err(GenError::Config("no generator endpoints declared".into()));
        }
        for (role, name) in &self.roles {
            if !self.endpoints.contains_key(name) {
                return Err(GenError::Config(format!(
                    "role `{role}` refers to unknown endpoint `{name}`"
                )));
            }
        }
        if !self.roles.contains_key(DEFAULT_ROLE) && self.endpoints.len() > 1 {
            return Err(GenError::Config(format!(
                "several endpoints declared but no `{DEFAULT_ROLE}` role assigned"
            )));
        }
        for (name, ep) in &self.endpoints {
            match ep.kind {
                EndpointKind::Openai if ep.base_url.is_none() || ep.model.is_none() => {
                    return Err(GenError::Config(format!("endpoint `{name}` needs base_url and model")))
                }
                EndpointKind::Scripted if ep.script.is_none() => {
                    return Err(GenError::Config(format!("endpoint `{name}` needs a script file")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Default)]
pub struct EndpointPool {
    generators: BTreeMap<String, Arc<dyn Generator>>,
    roles: BTreeMap<String, String>,
}

impl std::fmt::Debug for EndpointPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointPool")
            .field("endpoints", &self.generators.keys().collect::<Vec<_>>())
            .field("roles", &self.roles)
            .finish()
    }
}

impl EndpointPool {
    /// A pool with one endpoint serving every role.
    pub fn single(name: impl Into<String>, generator: Arc<dyn Generator>) -> Self {
        let name = name.into();
        Self::default()
            .with_endpoint(name.clone(), generator)
            .assign(DEFAULT_ROLE, name)
    }

    pub fn with_endpoint(mut self, name: impl Into<String>, generator: Arc<dyn Generator>) -> Self {
        self.generators.insert(name.into(), generator);
        self
    }

    pub fn assign(mut self, role: impl Into<String>, endpoint: impl Into<String>) -> Self {
        self.roles.insert(role.into(), endpoint.into());
        self
    }

    /// Builds every endpoint; relative script paths resolve against `base_dir`.
    pub fn from_config(config: &EndpointPoolConfig, base_dir: &Path) -> Result<Self, GenError> {
        config.validate()?;
        let mut pool = Self::default();
        for (name, ep) in &config.endpoints {
            let generator: Arc<dyn Generator> = match ep.kind {
                EndpointKind::Openai => {
                    let api_key = match &ep.api_key_env {
                        Some(var) => Some(std::env::var(var).map_err(|_| {
                            GenError::Config(format!("endpoint `{name}`: environment variable {var} is not set"))
                        })?),
                        None => None,
                    };
                    Arc::new(OpenAiCompletionClient::new(
                        ep.base_url.clone().unwrap_or_default(),
                        ep.model.clone().unwrap_or_default(),
                        api_key,
                    ))
                }
                EndpointKind::Scripted => {
                    let script = ep.script.as_ref().expect("validated");
                    let path = if script.is_absolute() {
                        script.clone()
                    } else {
                        base_dir.join(script)
                    };
                    Arc::new(ScriptedGenerator::from_script_file(name.clone(), path)?)
                }
            };
            pool.generators.insert(name.clone(), generator);
        }
        pool.roles = config.roles.clone();
        if !pool.roles.contains_key(DEFAULT_ROLE) {
            let only = config.endpoints.keys().next().expect("validated non-empty").clone();
            pool.roles.insert(DEFAULT_ROLE.into(), only);
        }
        Ok(pool)
    }

    /// The endpoint for `role`, falling back to the default role.
    pub fn resolve(&self, role: &str) -> Result<Arc<dyn Generator>, GenError> {
        let name = self
            .roles
            .get(role)
            .or_else(|| self.roles.get(DEFAULT_ROLE))
            .ok_or_else(|| GenError::UnknownRole(role.to_string()))?;
        self.generators
            .get(name)
            .cloned()
            .ok_or_else(|| GenError::UnknownRole(role.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GenerationOutput;

    #[test]
    fn roles_resolve_with_default_fallback() {
        let a: Arc<dyn Generator> = Arc::new(ScriptedGenerator::new("a").ordinal([GenerationOutput::from_text("x")]));
        let b: Arc<dyn Generator> = Arc::new(ScriptedGenerator::new("b"));
        let pool = EndpointPool::default()
            .with_endpoint("base", a)
            .with_endpoint("critic", b)
            .assign(DEFAULT_ROLE, "base")
            .assign("self_rag", "critic");
        assert_eq!(pool.resolve("self_rag").unwrap().describe(), "scripted:b");
        assert_eq!(pool.resolve("naive_rag").unwrap().describe(), "scripted:a");
        assert!(EndpointPool::default().resolve("x").is_err());
    }

    #[test]
    fn config_validation() {
        let yaml = r#"
endpoints:
  main: {kind: openai, base_url: "http://localhost:8000/v1", model: llama3}
  other: {kind: openai, base_url: "http://localhost:8001/v1", model: selfrag}
roles: {default: main, self_rag: other}
"#;
        let cfg: EndpointPoolConfig = serde_yaml::from_str(yaml).unwrap();
        cfg.validate().unwrap();
        let pool = EndpointPool::from_config(&cfg, Path::new(".")).unwrap();
        assert!(pool.resolve("self_rag").unwrap().describe().contains("selfrag"));

        let bad: EndpointPoolConfig =
            serde_yaml::from_str("endpoints:\n  main: {kind: openai, base_url: x, model: m}\nroles: {default: nope}\n")
                .unwrap();
        assert!(bad.validate().is_err());
        let missing: EndpointPoolConfig = serde_yaml::from_str("endpoints:\n  s: {kind: scripted}\n").unwrap();
        assert!(missing.validate().is_err());
    }
}
