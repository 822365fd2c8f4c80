//! Layered pipeline configuration: defaults, a TOML file, `SEARCHFORGE_*`
//! environment variables, then command-line overrides applied by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusFormat, DEFAULT_DOMAIN_LABELS, DEFAULT_INTERROGATIVES};
use crate::curation::CurationConfig;
use crate::export::RewardConfig;
use crate::orchestrator::LoopConfig;

pub const ENV_PREFIX: &str = "SEARCHFORGE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// QA corpus; the bundled fixture corpus is used when unset.
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    /// Search fixture JSONL for mock runs; the bundled one is used when unset.
    pub search_fixture: Option<PathBuf>,
    /// Trajectories from the model being optimized, for DPO export.
    pub weak_trajectories: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: CorpusFormat::Jsonl,
            search_fixture: None,
            weak_trajectories: None,
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub target: usize,
    pub domain_labels: Vec<String>,
    pub interrogatives: Vec<String>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            target: 20,
            domain_labels: DEFAULT_DOMAIN_LABELS.iter().map(|s| s.to_string()).collect(),
            interrogatives: DEFAULT_INTERROGATIVES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmEndpoint {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl LlmEndpoint {
    fn new(role: &str) -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: format!("{ENV_PREFIX}{}_API_KEY", role.to_ascii_uppercase()),
        }
    }
}

impl Default for LlmEndpoint {
    fn default() -> Self {
        Self::new("llm")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchEndpoint {
    /// Part of every search cache key; recorded and replayed runs must agree.
    pub provider: String,
    pub url: String,
    pub api_key_env: String,
    /// Download result pages instead of using snippets.
    pub fetch_pages: bool,
}

impl Default for SearchEndpoint {
    fn default() -> Self {
        Self {
            provider: "web".into(),
            url: String::new(),
            api_key_env: format!("{ENV_PREFIX}SEARCH_API_KEY"),
            fetch_pages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointsConfig {
    pub reasoner: LlmEndpoint,
    pub summarizer: LlmEndpoint,
    pub annotator: LlmEndpoint,
    pub judge: LlmEndpoint,
    pub search: SearchEndpoint,
}

impl Default for EndpointsConfig {
    fn default() -> Self {
        Self {
            reasoner: LlmEndpoint::new("reasoner"),
            summarizer: LlmEndpoint::new("summarizer"),
            annotator: LlmEndpoint::new("annotator"),
            judge: LlmEndpoint::new("judge"),
            search: SearchEndpoint::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Trajectories synthesized concurrently.
    pub concurrency: usize,
    pub paths: PathsConfig,
    pub sampling: SamplingConfig,
    pub synthesis: LoopConfig,
    pub curation: CurationConfig,
    pub reward: RewardConfig,
    pub endpoints: EndpointsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concurrency: 8,
            paths: PathsConfig::default(),
            sampling: SamplingConfig::default(),
            synthesis: LoopConfig::default(),
            curation: CurationConfig::default(),
            reward: RewardConfig::default(),
            endpoints: EndpointsConfig::default(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError::invalid(var, format!("cannot parse {value:?}: {e}")))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<inline>".into(), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `SEARCHFORGE_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |suffix: &str| {
            let var = format!("{ENV_PREFIX}{suffix}");
            lookup(&var).filter(|v| !v.trim().is_empty()).map(|v| (var, v))
        };
        if let Some((var, v)) = get("SEED") {
            self.seed = parse_env(&var, &v)?;
        }
        if let Some((var, v)) = get("CONCURRENCY") {
            self.concurrency = parse_env(&var, &v)?;
        }
        if let Some((var, v)) = get("SAMPLE_TARGET") {
            self.sampling.target = parse_env(&var, &v)?;
        }
        if let Some((_, v)) = get("CORPUS") {
            self.paths.corpus = Some(v.into());
        }
        if let Some((_, v)) = get("SEARCH_FIXTURE") {
            self.paths.search_fixture = Some(v.into());
        }
        if let Some((_, v)) = get("CACHE_DIR") {
            self.paths.cache_dir = v.into();
        }
        if let Some((_, v)) = get("OUTPUT_DIR") {
            self.paths.output_dir = v.into();
        }
        let e = &mut self.endpoints;
        for (role, ep) in [
            ("REASONER", &mut e.reasoner),
            ("SUMMARIZER", &mut e.summarizer),
            ("ANNOTATOR", &mut e.annotator),
            ("JUDGE", &mut e.judge),
        ] {
            if let Some((_, v)) = get(&format!("{role}_URL")) {
                ep.url = v;
            }
            if let Some((_, v)) = get(&format!("{role}_MODEL")) {
                ep.model = v;
            }
        }
        if let Some((_, v)) = get("SEARCH_URL") {
            e.search.url = v;
        }
        if let Some((_, v)) = get("SEARCH_PROVIDER") {
            e.search.provider = v;
        }
        Ok(())
    }

    /// Checks value ranges and that referenced input files exist. Errors
    /// name the offending field by its dotted path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(ConfigError::invalid("concurrency", "must be positive"));
        }
        if self.sampling.target == 0 {
            return Err(ConfigError::invalid("sampling.target", "must be positive"));
        }
        if self.sampling.domain_labels.is_empty() {
            return Err(ConfigError::invalid("sampling.domain_labels", "must not be empty"));
        }
        self.synthesis
            .validate()
            .map_err(|(f, m)| ConfigError::invalid(format!("synthesis.{f}"), m))?;
        self.curation
            .validate()
            .map_err(|(f, m)| ConfigError::invalid(format!("curation.{f}"), m))?;
        self.reward
            .validate()
            .map_err(|(f, m)| ConfigError::invalid(format!("reward.{f}"), m))?;
        if self.endpoints.search.provider.trim().is_empty() {
            return Err(ConfigError::invalid("endpoints.search.provider", "must not be empty"));
        }
        for (field, path) in [
            ("paths.corpus", &self.paths.corpus),
            ("paths.search_fixture", &self.paths.search_fixture),
            ("paths.weak_trajectories", &self.paths.weak_trajectories),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(ConfigError::invalid(field, format!("file not found: {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Hash of every setting that can change artifact content. Locations
    /// and the worker count are excluded so relocated runs compare equal.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.paths.cache_dir = PathBuf::new();
        c.paths.output_dir = PathBuf::new();
        c.concurrency = 0;
        let bytes = serde_json::to_vec(&c).expect("config always serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = PipelineConfig::from_toml_str("[synthesis]\nmax_searches = 3\n").unwrap_err();
        assert!(err.to_string().contains("max_searches"), "{err}");
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = PipelineConfig::from_toml_str("seed = 3\n[endpoints.reasoner]\nmodel = \"a\"\n").unwrap();
        let env: HashMap<&str, &str> =
            [("SEARCHFORGE_SEED", "9"), ("SEARCHFORGE_REASONER_MODEL", "b")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.endpoints.reasoner.model, "b");

        let bad: HashMap<&str, &str> = [("SEARCHFORGE_CONCURRENCY", "many")].into();
        let err = cfg.apply_env(|k| bad.get(k).map(|v| v.to_string())).unwrap_err();
        assert!(err.to_string().starts_with("SEARCHFORGE_CONCURRENCY"));
    }

    #[test]
    fn validation_names_field_path() {
        let mut cfg = PipelineConfig::default();
        cfg.synthesis.max_search_calls = 20;
        assert_eq!(
            cfg.validate().unwrap_err().to_string(),
            "synthesis.max_search_calls: must not exceed max_turns"
        );
        let mut cfg = PipelineConfig::default();
        cfg.synthesis.generation.top_p = 2.0;
        assert!(cfg.validate().unwrap_err().to_string().starts_with("synthesis.generation.top_p"));
        let mut cfg = PipelineConfig::default();
        cfg.paths.corpus = Some("/definitely/not/here.jsonl".into());
        assert!(cfg.validate().unwrap_err().to_string().starts_with("paths.corpus"));
    }

    #[test]
    fn content_hash_ignores_locations() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.output_dir = "elsewhere".into();
        b.concurrency = 2;
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
