//! The run config file.
//!
//! A single TOML document declares endpoints, their roles, the filter
//! policy and per-stage defaults. Command-line flags override it.
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [paths]
//! cache_dir = "cache"
//!
//! [[endpoints]]
//! id = "vlm"
//! base_url = "http://localhost:8000/v1"
//! api_key_env_var = "VLM_API_KEY"
//! supports_token_scores = true
//!
//! [roles]
//! llm = "vlm"
//! mllm = "vlm"
//!
//! [policy]
//! preset = "c-sg"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use finer_core::client::{ClientConfig, EndpointConfig};
use finer_core::dpo::{ImageCategory, DEFAULT_CAP};
use finer_core::mcq::Setting;
use finer_core::neg_gen::FilterPolicy;
use finer_core::types::EntityKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub client: ClientConfig,
    pub endpoints: Vec<EndpointConfig>,
    pub roles: Roles,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub mcq: McqConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub review: ReviewConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cache_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub prompts_dir: Option<PathBuf>,
}

/// Which endpoint plays which part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Text model: extraction, negative proposals, Wh templates, DPO phrases.
    pub llm: String,
    /// Image model: relation checks.
    pub mllm: String,
    /// Image model scoring the five-way discrimination; defaults to `mllm`.
    #[serde(default)]
    pub discriminator: Option<String>,
    /// Model under evaluation; defaults to `mllm`.
    #[serde(default)]
    pub evaluated: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// `c-sg` or `d-sg`.
    pub preset: Option<String>,
    pub object: Option<f64>,
    pub attribute: Option<f64>,
    pub relation: Option<f64>,
    pub max_regen_rounds: Option<u32>,
}

impl PolicyConfig {
    /// Preset (C-SG when unset) with explicit thresholds applied on top.
    pub fn resolve(&self) -> Result<FilterPolicy, CliError> {
        let name = self.preset.as_deref().unwrap_or("c-sg");
        let mut p = FilterPolicy::preset(name).ok_or_else(|| CliError::config(format!("unknown policy preset {name:?}")))?;
        for (kind, v) in [(EntityKind::Object, self.object), (EntityKind::Attribute, self.attribute), (EntityKind::Relation, self.relation)] {
            if let Some(v) = v {
                p.theta.set(kind, v);
            }
        }
        if let Some(n) = self.max_regen_rounds {
            p.max_regen_rounds = n;
        }
        p.validate().map_err(CliError::config)?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McqConfig {
    pub settings: Vec<String>,
    pub rotations: bool,
    /// Largest entity count per multi setting, e.g. `{ attr = 5 }`.
    pub k_max: BTreeMap<String, usize>,
    /// `llm` asks the text model for Wh templates; `offline` uses fixed ones.
    pub wh_templates: String,
}

impl Default for McqConfig {
    fn default() -> Self {
        McqConfig {
            settings: vec!["obj".into(), "attr".into(), "rel".into(), "wh".into()],
            rotations: false,
            k_max: BTreeMap::new(),
            wh_templates: "llm".into(),
        }
    }
}

pub fn parse_settings(names: &[String]) -> Result<Vec<Setting>, CliError> {
    names
        .iter()
        .flat_map(|s| s.split(','))
        .filter(|s| !s.trim().is_empty())
        .map(|s| Setting::parse(s).ok_or_else(|| CliError::config(format!("unknown setting {s:?}"))))
        .collect()
}

impl McqConfig {
    pub fn k_max(&self) -> Result<BTreeMap<Setting, usize>, CliError> {
        self.k_max
            .iter()
            .map(|(k, &v)| {
                let s = Setting::parse(k).filter(|s| s.kind().is_some());
                let s = s.ok_or_else(|| CliError::config(format!("k_max: {k:?} is not a multi setting")))?;
                if v == 0 {
                    return Err(CliError::config(format!("k_max.{k} must be positive")));
                }
                Ok((s, v))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub cap: usize,
    /// Classify each caption and keep only `categories`.
    pub classify: bool,
    pub categories: Vec<String>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { cap: DEFAULT_CAP, classify: true, categories: vec!["natural_image".into()] }
    }
}

impl DpoConfig {
    pub fn categories(&self) -> Result<Vec<ImageCategory>, CliError> {
        self.categories
            .iter()
            .map(|c| ImageCategory::parse(c).ok_or_else(|| CliError::config(format!("unknown image category {c:?}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub bind: String,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig { bind: "127.0.0.1:8787".into() }
    }
}

/// A parsed config with its digest and the directory relative paths
/// resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::config(format!("{}: not UTF-8", path.display())))?;
        let config = RunConfig::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(LoadedConfig {
            config,
            sha256: hex::encode(Sha256::digest(&bytes)),
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let c: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.endpoints.is_empty() {
            return Err("no endpoints declared".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            if !seen.insert(e.id.as_str()) {
                return Err(format!("duplicate endpoint id {:?}", e.id));
            }
        }
        for (role, id) in self.role_ids() {
            if !seen.contains(id) {
                return Err(format!("role {role} names undeclared endpoint {id:?}"));
            }
        }
        Ok(())
    }

    pub fn role_ids(&self) -> Vec<(&'static str, &str)> {
        vec![
            ("llm", self.roles.llm.as_str()),
            ("mllm", self.roles.mllm.as_str()),
            ("discriminator", self.discriminator()),
            ("evaluated", self.evaluated()),
        ]
    }

    pub fn discriminator(&self) -> &str {
        self.roles.discriminator.as_deref().unwrap_or(&self.roles.mllm)
    }

    pub fn evaluated(&self) -> &str {
        self.roles.evaluated.as_deref().unwrap_or(&self.roles.mllm)
    }
}
