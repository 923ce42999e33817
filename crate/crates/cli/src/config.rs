//! TOML configuration shared by all subcommands.
//!
//! Relative dataset and cache paths are resolved against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use privicl::backend::{
    CachedEmbedder, CallSettings, CompletionBackend, Embedder, EmbeddingCache, HttpBackend,
    HttpConfig, MockBackend, MockMode, RetryPolicy,
};
use privicl::mia::{Defense, PoolRatio};
use privicl::pipeline::EnsembleConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: DataPaths,
    pub ensemble: EnsembleConfig,
    pub backend: BackendSection,
    pub limits: Limits,
    pub attack: AttackSection,
    pub augment: AugmentSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub private: Option<PathBuf>,
    pub public: Option<PathBuf>,
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockSetting {
    #[default]
    Standard,
    Echo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub mock_mode: MockSetting,
    pub http: HttpConfig,
    pub max_tokens: u32,
    pub temperature: f64,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
    /// Persistent embedding cache file.
    pub cache: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock_mode: MockSetting::Standard,
            http: HttpConfig::default(),
            max_tokens: 256,
            temperature: 0.0,
            retry_attempts: 3,
            retry_base_delay_ms: 250,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// Refuse further queries once the composed epsilon would exceed this.
    pub total_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub members: Option<PathBuf>,
    pub nonmembers: Option<PathBuf>,
    pub truncate_tokens: usize,
    pub ratio: PoolRatio,
    pub shots_n: usize,
    pub members_m: usize,
    pub defense: Defense,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            members: None,
            nonmembers: None,
            truncate_tokens: 8,
            ratio: PoolRatio::Balanced,
            shots_n: 2,
            members_m: 10,
            defense: Defense::NoAggregation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub n_generate: usize,
    pub epsilon: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            n_generate: 20,
            epsilon: 1.0,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.private,
            &mut cfg.data.public,
            &mut cfg.data.queries,
            &mut cfg.backend.cache,
            &mut cfg.attack.members,
            &mut cfg.attack.nonmembers,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn settings(&self) -> CallSettings {
        CallSettings {
            model_name: match self.backend.kind {
                BackendKind::Mock => "mock".into(),
                BackendKind::Http => self.backend.http.chat_model.clone(),
            },
            max_tokens: self.backend.max_tokens,
            temperature: self.backend.temperature,
            retry: RetryPolicy {
                attempts: self.backend.retry_attempts,
                base_delay: std::time::Duration::from_millis(self.backend.retry_base_delay_ms),
            },
        }
    }
}

pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("config does not name a {what} file"),
    }
}

/// Completion backend and cached embedder built from the config.
pub struct Backends {
    pub llm: Box<dyn CompletionBackend>,
    pub embedder: CachedEmbedder<Box<dyn Embedder>>,
}

pub fn build_backends(section: &BackendSection, seed: u64) -> Result<Backends> {
    let (llm, embedder): (Box<dyn CompletionBackend>, Box<dyn Embedder>) = match section.kind {
        BackendKind::Mock => {
            let mode = match section.mock_mode {
                MockSetting::Standard => MockMode::Standard,
                MockSetting::Echo => MockMode::Echo,
            };
            (
                Box::new(MockBackend::new(mode).with_seed(seed)),
                Box::new(MockBackend::new(mode).with_seed(seed)),
            )
        }
        BackendKind::Http => (
            Box::new(HttpBackend::new(section.http.clone())?),
            Box::new(HttpBackend::new(section.http.clone())?),
        ),
    };
    let cache = match &section.cache {
        Some(p) => EmbeddingCache::open(p)?,
        None => EmbeddingCache::in_memory(),
    };
    Ok(Backends {
        llm,
        embedder: CachedEmbedder::new(embedder, cache),
    })
}

/// Config file (or defaults) with the global flags applied.
pub fn resolve(common: &crate::Common) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.ensemble.seed = s;
    }
    if let Some(b) = common.backend {
        cfg.backend.kind = b;
    }
    if let Some(u) = &common.base_url {
        cfg.backend.http.base_url = u.clone();
    }
    if let Some(w) = common.parallel_width {
        cfg.ensemble.parallel_width = w;
    }
    Ok(cfg)
}

pub fn apply_overrides(o: &crate::EnsembleOverrides, e: &mut EnsembleConfig) {
    if let Some(a) = o.aggregation {
        e.aggregation = a;
    }
    if let Some(v) = o.epsilon {
        e.budget.epsilon = v;
        // An explicit total budget replaces any fixed split from the file.
        e.sga = None;
        e.ksa_epsilon = None;
    }
    if let Some(v) = o.delta {
        e.budget.delta = v;
    }
    if let Some(v) = o.shots {
        e.shots_n = v;
    }
    if let Some(v) = o.ensemble {
        e.members_m = v;
    }
    if let Some(v) = o.k {
        e.k = Some(v);
    }
    if let Some(v) = o.subsample {
        e.subsample_fraction = v;
    }
}
