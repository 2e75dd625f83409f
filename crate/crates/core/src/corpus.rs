//! Interaction-log ingestion: rating/k-core filtering, ID remapping,
//! train/validation/test splits, the normalized bipartite graph, batch
//! sampling, and the `EMB1` semantic-matrix file format.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// One raw interaction, keys as they appeared in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEdge {
    pub user_key: String,
    pub item_key: String,
}

/// Sparse bipartite user-item graph over remapped contiguous indices.
///
/// Adjacency is stored CSR-style in both directions; each adjacency entry
/// carries the global edge id so per-edge quantities (GSL masks) can be
/// addressed from either side.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    /// Canonical edge list, sorted by (user, item), duplicate-free.
    edges: Vec<(u32, u32)>,
    user_offsets: Vec<usize>,
    /// (item, edge id) per user, ascending item order.
    user_adj: Vec<(u32, u32)>,
    item_offsets: Vec<usize>,
    /// (user, edge id) per item, ascending user order.
    item_adj: Vec<(u32, u32)>,
}

impl InteractionGraph {
    /// Build from remapped index pairs. Deduplicates; indices must be dense.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut sorted: Vec<(u32, u32)> = edges.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &(u, i) in &sorted {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::Data(format!(
                    "edge ({u}, {i}) out of range for {num_users} users / {num_items} items"
                )));
            }
        }

        let mut user_deg = vec![0usize; num_users];
        let mut item_deg = vec![0usize; num_items];
        for &(u, i) in &sorted {
            user_deg[u as usize] += 1;
            item_deg[i as usize] += 1;
        }
        let user_offsets = prefix_sum(&user_deg);
        let item_offsets = prefix_sum(&item_deg);

        let mut user_adj = vec![(0u32, 0u32); sorted.len()];
        let mut cursor = user_offsets.clone();
        for (eid, &(u, i)) in sorted.iter().enumerate() {
            user_adj[cursor[u as usize]] = (i, eid as u32);
            cursor[u as usize] += 1;
        }
        let mut item_adj = vec![(0u32, 0u32); sorted.len()];
        let mut cursor = item_offsets.clone();
        for (eid, &(u, i)) in sorted.iter().enumerate() {
            item_adj[cursor[i as usize]] = (u, eid as u32);
            cursor[i as usize] += 1;
        }

        Ok(InteractionGraph {
            num_users,
            num_items,
            edges: sorted,
            user_offsets,
            user_adj,
            item_offsets,
            item_adj,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// (item, edge id) pairs for a user.
    pub fn user_neighbors(&self, u: usize) -> &[(u32, u32)] {
        &self.user_adj[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    /// (user, edge id) pairs for an item.
    pub fn item_neighbors(&self, i: usize) -> &[(u32, u32)] {
        &self.item_adj[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_offsets[u + 1] - self.user_offsets[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_offsets[i + 1] - self.item_offsets[i]
    }

    /// Symmetric normalization weight `1/sqrt(|N_u|·|N_i|)` for a stored edge.
    pub fn norm_weight(&self, u: usize, i: usize) -> f64 {
        1.0 / ((self.user_degree(u) as f64).sqrt() * (self.item_degree(i) as f64).sqrt())
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_neighbors(u).binary_search_by_key(&(i as u32), |&(it, _)| it).is_ok()
    }
}

fn prefix_sum(degrees: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(degrees.len() + 1);
    let mut acc = 0usize;
    offsets.push(0);
    for &d in degrees {
        acc += d;
        offsets.push(acc);
    }
    offsets
}

/// Disjoint train/validation/test edge lists over one remapped ID space.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<(u32, u32)>,
    pub validation: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

/// Original-key → contiguous-index maps for users and items.
#[derive(Debug, Clone)]
pub struct IdMaps {
    pub users: BTreeMap<String, u32>,
    pub items: BTreeMap<String, u32>,
}

impl IdMaps {
    pub fn write(&self, user_path: &Path, item_path: &Path) -> Result<()> {
        write_json(user_path, &self.users)?;
        write_json(item_path, &self.items)
    }

    pub fn read(user_path: &Path, item_path: &Path) -> Result<Self> {
        Ok(IdMaps { users: read_json(user_path)?, items: read_json(item_path)? })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("json encode: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Dense matrix of text-intent embeddings, one row per user or item.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; stored as f32 so file round-trips are bit-exact.
    pub data: Vec<f32>,
}

impl SemanticMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "semantic matrix payload has {} values, expected {}",
                data.len(),
                rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("semantic matrix contains non-finite entries".into()));
        }
        Ok(SemanticMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_mat(&self) -> crate::mat::Mat {
        crate::mat::Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// One pairwise-ranking batch: parallel index lists of equal length.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    pub neg_items: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Parse a tab-separated interaction file, keeping rows with
/// `rating >= min_rating`. A missing rating column passes the filter.
pub fn load_interactions(path: &Path, min_rating: f64) -> Result<Vec<RawEdge>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let user = parts.next().filter(|s| !s.is_empty());
        let item = parts.next().filter(|s| !s.is_empty());
        let (user, item) = match (user, item) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(Error::Data(format!(
                    "{}: line {} is not `user\\titem[\\trating]`",
                    path.display(),
                    idx + 1
                )))
            }
        };
        let rating = match parts.next() {
            Some(r) => Some(r.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("{}: line {} has malformed rating `{r}`", path.display(), idx + 1))
            })?),
            None => None,
        };
        if rating.map_or(true, |r| r >= min_rating) {
            edges.push(RawEdge { user_key: user.to_string(), item_key: item.to_string() });
        }
    }
    if edges.is_empty() {
        return Err(Error::Data(format!(
            "{}: no interactions survive min_rating={min_rating}",
            path.display()
        )));
    }
    Ok(edges)
}

/// Iteratively drop users and items with degree `< k` until every surviving
/// node has degree `>= k`. Duplicate (user, item) pairs are collapsed first.
/// Output preserves input order.
pub fn kcore_filter(edges: &[RawEdge], k: usize) -> Result<Vec<RawEdge>> {
    assert!(k >= 1, "k-core requires k >= 1");
    let mut seen = HashSet::new();
    let mut retained: Vec<&RawEdge> = edges
        .iter()
        .filter(|e| seen.insert((e.user_key.clone(), e.item_key.clone())))
        .collect();

    loop {
        let mut user_deg: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_deg: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &retained {
            *user_deg.entry(&e.user_key).or_default() += 1;
            *item_deg.entry(&e.item_key).or_default() += 1;
        }
        let before = retained.len();
        retained.retain(|e| user_deg[e.user_key.as_str()] >= k && item_deg[e.item_key.as_str()] >= k);
        if retained.is_empty() {
            return Err(Error::Data(format!("k-core filtering with k={k} eliminated every edge")));
        }
        if retained.len() == before {
            return Ok(retained.into_iter().cloned().collect());
        }
    }
}

/// Remap keys to contiguous 0-based indices (first-appearance order) and
/// split each user's edges by `ratios`, guaranteeing at least one train edge
/// per user. Returns the train-edge graph, the split, and the id maps.
pub fn remap_and_split(
    edges: &[RawEdge],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(InteractionGraph, DataSplit, IdMaps)> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }

    let mut users = BTreeMap::new();
    let mut items = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut remapped: Vec<(u32, u32)> = Vec::with_capacity(edges.len());
    for e in edges {
        let next_u = users.len() as u32;
        let u = *users.entry(e.user_key.clone()).or_insert(next_u);
        let next_i = items.len() as u32;
        let i = *items.entry(e.item_key.clone()).or_insert(next_i);
        if seen.insert((u, i)) {
            remapped.push((u, i));
        }
    }
    let num_users = users.len();
    let num_items = items.len();

    let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); num_users];
    for &(u, i) in &remapped {
        per_user[u as usize].push(i);
    }

    let mut split = DataSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for (u, user_items) in per_user.iter_mut().enumerate() {
        // Per-user stream: assignment is independent of user iteration order.
        let mut rng = seeded_rng(seed, &format!("split:{u}"));
        user_items.shuffle(&mut rng);
        let (n_tr, n_va, n_te) = apportion(user_items.len(), ratios);
        for (pos, &i) in user_items.iter().enumerate() {
            let pair = (u as u32, i);
            if pos < n_tr {
                split.train.push(pair);
            } else if pos < n_tr + n_va {
                split.validation.push(pair);
            } else {
                debug_assert!(pos < n_tr + n_va + n_te);
                split.test.push(pair);
            }
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();

    let graph = InteractionGraph::from_edges(num_users, num_items, &split.train)?;
    Ok((graph, split, IdMaps { users, items }))
}

/// Largest-remainder apportionment of `n` edges into (train, val, test)
/// counts, with train guaranteed >= 1.
fn apportion(n: usize, (tr, va, te): (f64, f64, f64)) -> (usize, usize, usize) {
    let raw = [n as f64 * tr, n as f64 * va, n as f64 * te];
    let mut counts = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut leftover = n - counts.iter().sum::<usize>();
    // Higher fractional remainder first; ties favor train, then validation.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - counts[a] as f64;
        let rb = raw[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for idx in order {
        if leftover == 0 {
            break;
        }
        counts[idx] += 1;
        leftover -= 1;
    }
    if counts[0] == 0 && n > 0 {
        if counts[1] >= counts[2] && counts[1] > 0 {
            counts[1] -= 1;
        } else if counts[2] > 0 {
            counts[2] -= 1;
        }
        counts[0] = 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Maximum rejection attempts per negative draw before giving up.
const NEG_SAMPLE_RETRIES: usize = 1000;

/// Uniformly sample `batch_size` train edges; negatives are drawn uniformly
/// over items and rejection-resampled until not interacted by the user.
pub fn sample_bpr_batch(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if graph.num_edges() == 0 {
        return Err(Error::Data("cannot sample from an empty graph".into()));
    }
    let mut users = Vec::with_capacity(batch_size);
    let mut pos_items = Vec::with_capacity(batch_size);
    let mut neg_items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, i) = graph.edges()[rng.gen_range(0..graph.num_edges())];
        users.push(u);
        pos_items.push(i);
        neg_items.push(sample_negative(graph, u as usize, rng)?);
    }
    Ok(Batch { users, pos_items, neg_items })
}

pub(crate) fn sample_negative(
    graph: &InteractionGraph,
    user: usize,
    rng: &mut impl Rng,
) -> Result<u32> {
    if graph.user_degree(user) >= graph.num_items() {
        return Err(Error::Data(format!("user {user} interacts with every item; no negative exists")));
    }
    for _ in 0..NEG_SAMPLE_RETRIES {
        let cand = rng.gen_range(0..graph.num_items()) as u32;
        if !graph.has_edge(user, cand as usize) {
            return Ok(cand);
        }
    }
    Err(Error::Data(format!("negative sampling for user {user} exhausted {NEG_SAMPLE_RETRIES} retries")))
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Write a semantic matrix: magic `EMB1`, rows/cols as u32 LE, then row-major
/// f32 LE payload.
pub fn write_semantic_matrix(matrix: &SemanticMatrix, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + matrix.data.len() * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols as u32).to_le_bytes());
    for v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_semantic_matrix(path: &Path) -> Result<SemanticMatrix> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != EMB_MAGIC {
        return Err(Error::Data(format!("{}: bad magic, not an EMB1 file", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: truncated payload, expected {expected} bytes for {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SemanticMatrix::new(rows, cols, data)
}

/// Validate a loaded semantic matrix against the entity count it must cover.
pub fn check_matrix_rows(matrix: &SemanticMatrix, expected_rows: usize, what: &str) -> Result<()> {
    if matrix.rows != expected_rows {
        return Err(Error::Data(format!(
            "{what} semantic matrix has {} rows, graph expects {expected_rows}",
            matrix.rows
        )));
    }
    Ok(())
}
