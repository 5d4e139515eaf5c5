//! Pool ingestion: parse, de-duplicate check, diversity prefilter, cluster.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use gate_core::pool::{self, HashEmbedder, PoolItem};

use crate::config::ClusterArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolFormat {
    /// MIND news TSV: id, category, subcategory, title, abstract, ...
    Mind,
    /// JSON Lines of `{id, body}`.
    Jsonl,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub format: PoolFormat,
    pub target: usize,
    pub clusters: usize,
    pub seed: u64,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub read: usize,
    pub kept: usize,
    pub nonempty_clusters: usize,
}

pub const POOL_FILE: &str = "pool.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.json";

pub fn ingest_pool(input: &Path, out_dir: &Path, opts: &IngestOptions) -> Result<IngestSummary> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let items: Vec<PoolItem> = match opts.format {
        PoolFormat::Mind => pool::read_mind_tsv(reader)?,
        PoolFormat::Jsonl => pool::read_jsonl(reader)?,
    };
    pool::check_unique(&items)?;
    let embedder = HashEmbedder {
        dim: opts.embedding_dim,
    };
    let kept = pool::prefilter(&items, opts.target, &embedder, opts.seed)?;
    let vectors = pool::embed_pool(&kept, &embedder)?;
    let model = pool::cluster(&vectors, opts.clusters, opts.seed, pool::DEFAULT_MAX_ITERS);

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut writer = BufWriter::new(File::create(out_dir.join(POOL_FILE))?);
    pool::write_jsonl(&kept, &mut writer)?;
    let summary = IngestSummary {
        read: items.len(),
        kept: kept.len(),
        nonempty_clusters: model.nonempty_clusters().len(),
    };
    let artifact = ClusterArtifact {
        embedding_dim: opts.embedding_dim,
        seed: opts.seed,
        model,
    };
    std::fs::write(out_dir.join(CLUSTERS_FILE), serde_json::to_string_pretty(&artifact)?)?;
    Ok(summary)
}
