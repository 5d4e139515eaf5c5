//! Unlabeled example pools: embedding, k-means clustering, farthest-point
//! pre-filtering and round-robin scheduling over clusters.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CLUSTERS: usize = 15;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got} for `{item_id}`")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        item_id: String,
    },
    #[error("non-finite embedding for `{0}`")]
    NonFinite(String),
    #[error("pool exhausted")]
    Exhausted,
    #[error("duplicate pool item id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub body: String,
}

impl PoolItem {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub item_id: String,
    pub values: Vec<f64>,
}

pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, PoolError>;
}

/// Feature hashing of character trigrams into a fixed-size, L2-normalized
/// vector. Depends only on the bytes of the input.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |hash, b| {
        (hash ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, PoolError> {
        let mut values = vec![0.0; self.dim.max(1)];
        let chars: Vec<char> = text.chars().collect();
        let mut add = |gram: &[char]| {
            let s: String = gram.iter().collect();
            let h = fnv1a(s.as_bytes());
            let slot = (h % values.len() as u64) as usize;
            values[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        if chars.len() < 3 {
            if !chars.is_empty() {
                add(&chars);
            }
        } else {
            chars.windows(3).for_each(&mut add);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(values)
    }
}

pub fn embed_pool(items: &[PoolItem], embedder: &dyn Embedder) -> Result<Vec<EmbeddingVector>, PoolError> {
    let mut out: Vec<EmbeddingVector> = Vec::with_capacity(items.len());
    for item in items {
        let values = embedder.embed(&item.body)?;
        if let Some(first) = out.first() {
            if first.values.len() != values.len() {
                return Err(PoolError::DimensionMismatch {
                    expected: first.values.len(),
                    got: values.len(),
                    item_id: item.id.clone(),
                });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PoolError::NonFinite(item.id.clone()));
        }
        out.push(EmbeddingVector {
            item_id: item.id.clone(),
            values,
        });
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let mut acc = vec![0.0; dim];
    for p in points {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= points.len() as f64);
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// `None` marks an empty cluster.
    pub centroids: Vec<Option<Vec<f64>>>,
    pub assignment: BTreeMap<String, usize>,
    pub iterations: usize,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, c)| **c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn nonempty_clusters(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.assignment.values().copied().collect();
        set.into_iter().collect()
    }
}

fn nearest(point: &[f64], centroids: &[Option<Vec<f64>>]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        if let Some(c) = c {
            let d = sq_dist(point, c);
            if d < best.1 {
                best = (i, d);
            }
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<f64>>> {
    let mut centroids: Vec<Option<Vec<f64>>> = vec![None; k];
    let first = rng.random_range(0..points.len());
    centroids[0] = Some(points[first].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    for slot in centroids.iter_mut().skip(1) {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = d2.iter().rposition(|d| *d > 0.0).expect("positive mass");
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                chosen = i;
                break;
            }
            target -= d;
        }
        let c = points[chosen].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        *slot = Some(c);
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding. Stops at an assignment fixpoint or
/// after `max_iters` assignment steps.
pub fn cluster(vectors: &[EmbeddingVector], k: usize, seed: u64, max_iters: usize) -> ClusterModel {
    let k = k.max(1);
    if vectors.len() <= k {
        let mut centroids: Vec<Option<Vec<f64>>> = vectors.iter().map(|v| Some(v.values.clone())).collect();
        centroids.resize(k, None);
        return ClusterModel {
            k,
            centroids,
            assignment: vectors
                .iter()
                .enumerate()
                .map(|(i, v)| (v.item_id.clone(), i))
                .collect(),
            iterations: 0,
            sse_history: vec![0.0],
        };
    }

    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut assign: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let step: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let next: Vec<usize> = step.iter().map(|(c, _)| *c).collect();
        sse_history.push(step.iter().map(|(_, d)| d).sum());
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }

        let mut reseeded = HashSet::new();
        let mut cost: Vec<f64> = step.iter().map(|(_, d)| *d).collect();
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(p, _)| *p)
                .collect();
            if !members.is_empty() {
                *centroid = Some(mean(&members));
                continue;
            }
            // Empty: take over the point farthest from its own centroid.
            let far = cost
                .iter()
                .enumerate()
                .filter(|(i, d)| **d > 0.0 && !reseeded.contains(i))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= *d => best,
                    _ => Some((i, *d)),
                });
            *centroid = far.map(|(i, _)| {
                reseeded.insert(i);
                cost[i] = 0.0;
                points[i].to_vec()
            });
        }
    }

    // Centroids of clusters left empty by the final assignment are dropped.
    for (c, centroid) in centroids.iter_mut().enumerate() {
        if !assign.contains(&c) {
            *centroid = None;
        }
    }
    ClusterModel {
        k,
        centroids,
        assignment: vectors
            .iter()
            .zip(&assign)
            .map(|(v, c)| (v.item_id.clone(), *c))
            .collect(),
        iterations,
        sse_history,
    }
}

/// Per-session cursor over clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRobinState {
    pub cluster_order: Vec<usize>,
    pub cursor: usize,
    pub used: BTreeSet<String>,
}

impl RoundRobinState {
    pub fn new(model: &ClusterModel) -> Self {
        Self {
            cluster_order: model.nonempty_clusters(),
            cursor: 0,
            used: BTreeSet::new(),
        }
    }

    /// Marks items issued by other means (e.g. replayed from a transcript).
    pub fn mark_used<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) {
        self.used.extend(ids.into_iter().map(str::to_string));
    }
}

/// Next item from the next cluster (cyclically) that still has unused items;
/// within a cluster, the unused item nearest its centroid, ties by lowest id.
pub fn next_diverse(
    state: &RoundRobinState,
    model: &ClusterModel,
    vectors: &[EmbeddingVector],
) -> Result<(String, RoundRobinState), PoolError> {
    let n = state.cluster_order.len();
    for step in 0..n {
        let pos = (state.cursor + step) % n;
        let cluster = state.cluster_order[pos];
        let Some(centroid) = model.centroids.get(cluster).and_then(|c| c.as_ref()) else {
            continue;
        };
        let pick = vectors
            .iter()
            .filter(|v| model.assignment.get(&v.item_id) == Some(&cluster))
            .filter(|v| !state.used.contains(&v.item_id))
            .map(|v| (sq_dist(&v.values, centroid), &v.item_id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        if let Some((_, id)) = pick {
            let mut next = state.clone();
            next.used.insert(id.clone());
            next.cursor = (pos + 1) % n;
            return Ok((id.clone(), next));
        }
    }
    Err(PoolError::Exhausted)
}

/// Greedy farthest-point traversal from `start`; ties go to the lowest index.
pub fn farthest_point_sample(vectors: &[EmbeddingVector], target: usize, start: usize) -> Vec<usize> {
    if vectors.is_empty() || target == 0 {
        return Vec::new();
    }
    let target = target.min(vectors.len());
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = vectors
        .iter()
        .map(|v| sq_dist(&v.values, &vectors[start].values))
        .collect();
    while chosen.len() < target {
        let mut best: Option<usize> = None;
        for (i, d) in dist.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| *d > dist[b]) {
                best = Some(i);
            }
        }
        let Some(next) = best else { break };
        chosen.push(next);
        for (d, v) in dist.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(&v.values, &vectors[next].values));
        }
    }
    chosen
}

/// Index of the seed-chosen starting point in a pool of `len` items.
pub fn prefilter_start(len: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..len.max(1))
}

/// Diversity sub-pool of `min(target_size, |pool|)` items.
pub fn prefilter(
    pool: &[PoolItem],
    target_size: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<PoolItem>, PoolError> {
    if target_size >= pool.len() {
        return Ok(pool.to_vec());
    }
    let vectors = embed_pool(pool, embedder)?;
    let start = prefilter_start(pool.len(), seed);
    Ok(farthest_point_sample(&vectors, target_size, start)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

pub fn check_unique(items: &[PoolItem]) -> Result<(), PoolError> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(PoolError::DuplicateId(item.id.clone()));
        }
    }
    Ok(())
}

/// Reads `{"id","body"}` JSON Lines. Blank lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, PoolError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PoolError::Parse {
            line: n + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], mut writer: impl std::io::Write) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// MIND news TSV: `id, category, subcategory, title, abstract[, ...]`; body is
/// title and abstract joined.
pub fn read_mind_tsv(reader: impl BufRead) -> Result<Vec<PoolItem>, PoolError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(PoolError::Parse {
                line: n + 1,
                reason: format!("expected at least 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let title = cols[3].trim();
        let summary = cols.get(4).map_or("", |s| s.trim());
        let body = if summary.is_empty() {
            title.to_string()
        } else {
            format!("{title}\n{summary}")
        };
        out.push(PoolItem::new(cols[0].trim(), body));
    }
    check_unique(&out)?;
    Ok(out)
}
