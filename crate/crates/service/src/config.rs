//! JSON configuration for serving and batch simulation. Relative paths are
//! resolved against the config file's directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gate_core::domain::{DomainId, DomainRegistry, TestItem};
use gate_core::elicitation::PoolIndex;
use gate_core::lm::LmProfile;
use gate_core::persona::Persona;
use gate_core::pool::{self, ClusterModel, HashEmbedder, PoolItem};
use gate_core::session::PolicyKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Deserialize)]
pub struct DomainConfig {
    /// JSON Lines of `{id, body}`.
    #[serde(default)]
    pub test_set: Option<PathBuf>,
}

fn default_clusters() -> usize {
    pool::DEFAULT_CLUSTERS
}

fn default_dim() -> usize {
    pool::DEFAULT_EMBEDDING_DIM
}

#[derive(Debug, Clone, Deserialize)]
pub struct PoolConfig {
    /// JSON Lines of `{id, body}`, e.g. the output of `ingest-pool`.
    pub path: PathBuf,
    /// Cluster artifact written by `ingest-pool`; rebuilt when absent.
    #[serde(default)]
    pub clusters: Option<PathBuf>,
    #[serde(default = "default_clusters")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

/// What `ingest-pool` writes next to the pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub embedding_dim: usize,
    pub seed: u64,
    pub model: ClusterModel,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ServeConfig {
    #[serde(default)]
    pub domains: BTreeMap<DomainId, DomainConfig>,
    #[serde(default)]
    pub pools: BTreeMap<String, PoolConfig>,
    #[serde(default)]
    pub elicitor: Option<LmProfile>,
    #[serde(default)]
    pub predictor: Option<LmProfile>,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default)]
    pub bind: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimDomain {
    pub domain: DomainId,
    pub test_set: PathBuf,
    /// Key into `pools`, required by pool-based methods.
    #[serde(default)]
    pub pool: Option<String>,
    /// Persona files; the file stem names the persona in reports.
    pub personas: Vec<PathBuf>,
}

fn default_turns() -> u32 {
    5
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimulationMatrix {
    pub domains: Vec<SimDomain>,
    pub methods: Vec<PolicyKind>,
    #[serde(default)]
    pub pools: BTreeMap<String, PoolConfig>,
    #[serde(default = "default_turns")]
    pub turn_budget: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub elicitor: Option<LmProfile>,
    #[serde(default)]
    pub predictor: Option<LmProfile>,
    #[serde(default)]
    pub persona_lm: Option<LmProfile>,
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_jsonl_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    pool::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_test_set(path: &Path) -> Result<Vec<TestItem>> {
    read_jsonl_file(path)
}

pub fn load_persona(path: &Path) -> Result<(String, Persona)> {
    let persona: Persona = read_json(path)?;
    persona
        .validate()
        .with_context(|| format!("persona {}", path.display()))?;
    let name = path
        .file_stem()
        .map_or_else(|| "persona".to_string(), |s| s.to_string_lossy().into_owned());
    Ok((name, persona))
}

pub fn load_pool(base: &Path, config: &PoolConfig) -> Result<Arc<PoolIndex>> {
    let items: Vec<PoolItem> = read_jsonl_file(&resolve(base, &config.path))?;
    if items.is_empty() {
        bail!("pool {} is empty", config.path.display());
    }
    pool::check_unique(&items)?;
    let Some(clusters_path) = &config.clusters else {
        let embedder = HashEmbedder {
            dim: config.embedding_dim,
        };
        return Ok(Arc::new(PoolIndex::build(items, &embedder, config.k, config.seed)?));
    };
    let artifact: ClusterArtifact = read_json(&resolve(base, clusters_path))?;
    let vectors = pool::embed_pool(
        &items,
        &HashEmbedder {
            dim: artifact.embedding_dim,
        },
    )?;
    if artifact.model.assignment.len() != items.len()
        || items.iter().any(|i| !artifact.model.assignment.contains_key(&i.id))
    {
        bail!("cluster artifact {} does not match its pool", clusters_path.display());
    }
    Ok(Arc::new(PoolIndex {
        items,
        vectors,
        clusters: artifact.model,
    }))
}

pub fn load_pools(base: &Path, pools: &BTreeMap<String, PoolConfig>) -> Result<BTreeMap<String, Arc<PoolIndex>>> {
    pools
        .iter()
        .map(|(name, cfg)| {
            Ok((
                name.clone(),
                load_pool(base, cfg).with_context(|| format!("pool `{name}`"))?,
            ))
        })
        .collect()
}

/// Built-in domains plus configured test sets.
pub fn load_registry(base: &Path, domains: &BTreeMap<DomainId, DomainConfig>) -> Result<DomainRegistry> {
    let mut registry = DomainRegistry::with_builtins();
    for (id, cfg) in domains {
        if let Some(path) = &cfg.test_set {
            let items = load_test_set(&resolve(base, path))?;
            registry
                .set_test_set(id, items)
                .with_context(|| format!("test set for {id}"))?;
        }
    }
    Ok(registry)
}
