//! Graphs, datasets, class splits and N-way K-shot episode sampling.
//!
//! The synthetic benchmark places one class-determining motif on top of a
//! Barabási–Albert base graph. Motif nodes form the ground-truth
//! explanation; the base is label-independent noise.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error{}: {message}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Validation {
        line: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An undirected graph with node features, a class label and an optional
/// ground-truth explanation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: usize,
    neighbors: Vec<Vec<usize>>,
    features: Tensor,
    pub label: usize,
    truth_mask: Option<Vec<u8>>,
}

impl Graph {
    /// Builds a graph from undirected edges. Duplicate edges collapse.
    pub fn new(
        id: usize,
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        label: usize,
        truth_mask: Option<Vec<u8>>,
    ) -> Result<Self, DataError> {
        let invalid = |message: String| DataError::Validation {
            line: None,
            message,
        };
        if num_nodes == 0 {
            return Err(invalid(format!("graph {id} has no nodes")));
        }
        if features.rank() != 2 || features.shape()[0] != num_nodes {
            return Err(invalid(format!(
                "graph {id}: feature shape {:?} does not have {num_nodes} rows",
                features.shape()
            )));
        }
        let mut sets = vec![BTreeSet::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(invalid(format!("graph {id}: edge ({u}, {v}) out of range")));
            }
            if u == v {
                return Err(invalid(format!("graph {id}: self-loop on node {u}")));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        if let Some(mask) = &truth_mask {
            validate_truth_mask(id, num_nodes, mask).map_err(invalid)?;
        }
        Ok(Self {
            id,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            features,
            label,
            truth_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn truth_mask(&self) -> Option<&[u8]> {
        self.truth_mask.as_deref()
    }

    /// Undirected edges with `u < v`, in sorted order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    /// Dense symmetric 0/1 adjacency matrix with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        let data = a.data_mut();
        for (u, ns) in self.neighbors.iter().enumerate() {
            for &v in ns {
                data[u * n + v] = 1.0;
            }
        }
        a
    }

    /// Row-normalised adjacency (neighbour mean); isolated nodes get a zero row.
    pub fn mean_adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        let data = a.data_mut();
        for (u, ns) in self.neighbors.iter().enumerate() {
            let w = 1.0 / ns.len().max(1) as f64;
            for &v in ns {
                data[u * n + v] = w;
            }
        }
        a
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let d = self.feature_dim();
        let mut features = vec![0.0; n * d];
        for v in 0..n {
            features[perm[v] * d..(perm[v] + 1) * d].copy_from_slice(self.features.row(v));
        }
        let edges: Vec<_> = self
            .edges()
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        let truth_mask = self.truth_mask.as_ref().map(|m| {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = m[v];
            }
            out
        });
        Graph::new(
            self.id,
            n,
            &edges,
            Tensor::matrix(n, d, features).expect("shape preserved"),
            self.label,
            truth_mask,
        )
        .expect("permutation preserves validity")
    }

    /// Whether the nodes with `mask == 1` induce a connected subgraph.
    pub fn is_connected_subset(&self, mask: &[u8]) -> bool {
        let members: Vec<usize> = (0..self.num_nodes()).filter(|&v| mask[v] == 1).collect();
        let Some(&start) = members.first() else {
            return false;
        };
        let mut seen = HashSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &self.neighbors[u] {
                if mask[v] == 1 && seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        seen.len() == members.len()
    }
}

fn validate_truth_mask(id: usize, n: usize, mask: &[u8]) -> Result<(), String> {
    if mask.len() != n {
        return Err(format!(
            "graph {id}: truth_mask length {} does not match {n} nodes",
            mask.len()
        ));
    }
    if mask.iter().any(|&b| b > 1) {
        return Err(format!("graph {id}: truth_mask entries must be 0 or 1"));
    }
    if !mask.contains(&1) || !mask.contains(&0) {
        return Err(format!("graph {id}: truth_mask needs both 0 and 1 entries"));
    }
    Ok(())
}

/// An immutable collection of graphs indexed by class.
#[derive(Debug, Clone)]
pub struct Dataset {
    graphs: Vec<Arc<Graph>>,
    num_classes: usize,
    feature_dim: usize,
    by_class: Vec<Vec<usize>>,
    provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, num_classes: usize) -> Result<Self, DataError> {
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(DataError::Validation {
                    line: None,
                    message: format!(
                        "graph {} has feature dimension {}, expected {feature_dim}",
                        g.id,
                        g.feature_dim()
                    ),
                });
            }
            if g.label >= num_classes {
                return Err(DataError::Validation {
                    line: None,
                    message: format!("graph {} has label {} >= {num_classes}", g.id, g.label),
                });
            }
            by_class[g.label].push(i);
        }
        Ok(Self {
            graphs: graphs.into_iter().map(Arc::new).collect(),
            num_classes,
            feature_dim,
            by_class,
            provenance: serde_json::Value::Null,
        })
    }

    /// Free-form description of how the dataset was produced, stored in the
    /// file header.
    pub fn provenance(&self) -> &serde_json::Value {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn graphs(&self) -> &[Arc<Graph>] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn has_truth_masks(&self) -> bool {
        !self.graphs.is_empty() && self.graphs.iter().all(|g| g.truth_mask.is_some())
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.graphs.len().max(1) as f64;
        DatasetStats {
            num_graphs: self.graphs.len(),
            num_classes: self.num_classes,
            mean_nodes: self.graphs.iter().map(|g| g.num_nodes()).sum::<usize>() as f64 / n,
            mean_edges: self.graphs.iter().map(|g| g.num_edges()).sum::<usize>() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub num_graphs: usize,
    pub num_classes: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Small class-determining structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motif {
    House,
    Cycle(usize),
    Grid(usize, usize),
    Star(usize),
    Wheel(usize),
    Complete(usize),
    Bowtie,
    Fan(usize),
    Diamond,
}

impl Motif {
    /// Node count and undirected edge list.
    pub fn build(self) -> (usize, Vec<(usize, usize)>) {
        match self {
            Motif::House => (5, vec![(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]),
            Motif::Cycle(k) => (k, (0..k).map(|i| (i, (i + 1) % k)).collect()),
            Motif::Grid(r, c) => {
                let mut e = Vec::new();
                for i in 0..r {
                    for j in 0..c {
                        let v = i * c + j;
                        if j + 1 < c {
                            e.push((v, v + 1));
                        }
                        if i + 1 < r {
                            e.push((v, v + c));
                        }
                    }
                }
                (r * c, e)
            }
            // `k` counts all nodes, centre included.
            Motif::Star(k) => (k, (1..k).map(|i| (0, i)).collect()),
            Motif::Wheel(k) => {
                let rim = k - 1;
                let mut e: Vec<_> = (1..k).map(|i| (0, i)).collect();
                e.extend((0..rim).map(|i| (1 + i, 1 + (i + 1) % rim)));
                (k, e)
            }
            Motif::Complete(k) => {
                let mut e = Vec::new();
                for i in 0..k {
                    for j in i + 1..k {
                        e.push((i, j));
                    }
                }
                (k, e)
            }
            Motif::Bowtie => (5, vec![(0, 1), (1, 2), (2, 0), (0, 3), (3, 4), (4, 0)]),
            // Apex 0 joined to every node of a path 1..k.
            Motif::Fan(k) => {
                let mut e: Vec<_> = (1..k).map(|i| (0, i)).collect();
                e.extend((1..k - 1).map(|i| (i, i + 1)));
                (k, e)
            }
            Motif::Diamond => (4, vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]),
        }
    }
}

/// Motifs in class order; the first `num_classes` entries are used.
pub const MOTIF_LIBRARY: [Motif; 12] = [
    Motif::House,
    Motif::Cycle(5),
    Motif::Grid(3, 3),
    Motif::Star(6),
    Motif::Wheel(6),
    Motif::Complete(5),
    Motif::Bowtie,
    Motif::Grid(2, 4),
    Motif::Fan(6),
    Motif::Diamond,
    Motif::Cycle(8),
    Motif::Star(9),
];

/// Node feature scheme of synthetic graphs. Both add uniform noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// All ones.
    Constant,
    /// One-hot degree bucket: degree `k` sets entry `min(k, d) - 1`.
    Degree,
}

impl std::str::FromStr for FeatureKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "degree" => Ok(Self::Degree),
            other => Err(DataError::Config(format!("unknown feature kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub features: FeatureKind,
    pub feature_dim: usize,
    /// Upper bound of the uniform per-entry feature noise.
    pub feature_noise: f64,
    pub base_nodes_min: usize,
    pub base_nodes_max: usize,
    /// Edges added per new node in the Barabási–Albert base.
    pub ba_edges: usize,
    /// Edges wiring the motif to the base.
    pub attach_edges: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            features: FeatureKind::Degree,
            feature_dim: 8,
            feature_noise: 0.1,
            base_nodes_min: 60,
            base_nodes_max: 76,
            ba_edges: 3,
            attach_edges: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        if self.ba_edges == 0 {
            return bad("ba_edges must be positive");
        }
        if self.base_nodes_min <= self.ba_edges || self.base_nodes_max < self.base_nodes_min {
            return bad("base node range must satisfy ba_edges < min <= max");
        }
        if self.attach_edges == 0 {
            return bad("attach_edges must be positive");
        }
        Ok(())
    }
}

/// Barabási–Albert graph: a seed clique of `m + 1` nodes, then each new node
/// links to `m` distinct existing nodes chosen proportionally to degree.
pub fn barabasi_albert(n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    let seed = (m + 1).min(n);
    for i in 0..seed {
        for j in i + 1..seed {
            edges.push((i, j));
            targets.push(i);
            targets.push(j);
        }
    }
    for v in seed..n {
        let mut chosen = BTreeSet::new();
        while chosen.len() < m {
            chosen.insert(targets[rng.random_range(0..targets.len())]);
        }
        for u in chosen {
            edges.push((u, v));
            targets.push(u);
            targets.push(v);
        }
    }
    edges
}

/// Generates `num_classes × samples_per_class` graphs, class-major order.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    seed: u64,
    config: &SyntheticConfig,
) -> Result<Vec<Graph>, DataError> {
    if num_classes < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if num_classes > MOTIF_LIBRARY.len() {
        return Err(DataError::Config(format!(
            "{num_classes} classes requested but the motif library has {}",
            MOTIF_LIBRARY.len()
        )));
    }
    if samples_per_class == 0 {
        return Err(DataError::Config(
            "samples_per_class must be positive".into(),
        ));
    }
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        for _ in 0..samples_per_class {
            let id = graphs.len();
            graphs.push(synthetic_graph(
                id,
                class,
                MOTIF_LIBRARY[class],
                config,
                &mut rng,
            )?);
        }
    }
    Ok(graphs)
}

fn synthetic_graph(
    id: usize,
    label: usize,
    motif: Motif,
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Graph, DataError> {
    let base_n = rng.random_range(config.base_nodes_min..=config.base_nodes_max);
    let mut edges = barabasi_albert(base_n, config.ba_edges, rng);
    let (motif_n, motif_edges) = motif.build();
    let n = base_n + motif_n;
    edges.extend(motif_edges.iter().map(|&(u, v)| (u + base_n, v + base_n)));
    for _ in 0..config.attach_edges {
        let m = base_n + rng.random_range(0..motif_n);
        let b = rng.random_range(0..base_n);
        edges.push((b, m));
    }

    // Shuffle node order so position carries no information.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let edges: Vec<_> = edges
        .iter()
        .map(|&(u, v)| (perm[u].min(perm[v]), perm[u].max(perm[v])))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut mask = vec![0u8; n];
    for v in base_n..n {
        mask[perm[v]] = 1;
    }

    let d = config.feature_dim;
    let mut degree = vec![0usize; n];
    for &(u, v) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut features: Vec<f64> = (0..n * d)
        .map(|_| rng.random::<f64>() * config.feature_noise)
        .collect();
    for (v, &k) in degree.iter().enumerate() {
        match config.features {
            FeatureKind::Constant => features[v * d..(v + 1) * d]
                .iter_mut()
                .for_each(|x| *x += 1.0),
            FeatureKind::Degree => features[v * d + k.clamp(1, d) - 1] += 1.0,
        }
    }
    Graph::new(
        id,
        n,
        &edges,
        Tensor::matrix(n, d, features).expect("n*d features"),
        label,
        Some(mask),
    )
}

// ---------------------------------------------------------------------------
// Class splits and episodes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitRole {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(DataError::Config(format!("unknown split role '{other}'"))),
        }
    }
}

/// Disjoint train/validation/test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl DatasetSplit {
    pub fn classes(&self, role: SplitRole) -> &[usize] {
        match role {
            SplitRole::Train => &self.train_classes,
            SplitRole::Val => &self.val_classes,
            SplitRole::Test => &self.test_classes,
        }
    }
}

/// Shuffles class ids with `seed` and cuts them into `[train, val, test]` counts.
pub fn split_classes(
    num_classes: usize,
    counts: [usize; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if counts.iter().sum::<usize>() != num_classes {
        return Err(DataError::Config(format!(
            "split counts {counts:?} do not sum to {num_classes} classes"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |k: usize| {
        let mut part: Vec<usize> = ids.drain(..k).collect();
        part.sort_unstable();
        part
    };
    Ok(DatasetSplit {
        train_classes: take(counts[0]),
        val_classes: take(counts[1]),
        test_classes: take(counts[2]),
    })
}

#[derive(Debug, Clone)]
pub struct Shot {
    pub graph: Arc<Graph>,
    /// Episode-local label in `0..n_way`.
    pub label: usize,
}

/// One N-way K-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<Shot>,
    pub query: Vec<Shot>,
    /// `class_map[local]` is the global class id behind local label `local`.
    pub class_map: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
}

impl Episode {
    pub fn support_ids(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.graph.id).collect()
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.graph.id).collect()
    }
}

/// Samples `n_way` distinct classes of `role`, then `k_shot` support and
/// `query_per_class` query graphs per class, all without replacement.
pub fn sample_episode(
    dataset: &Dataset,
    split: &DatasetSplit,
    role: SplitRole,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode, DataError> {
    let classes = split.classes(role);
    if n_way == 0 || k_shot == 0 {
        return Err(DataError::Config(
            "n_way and k_shot must be positive".into(),
        ));
    }
    if classes.len() < n_way {
        return Err(DataError::Sampling(format!(
            "{role:?} split has {} classes, {n_way}-way episodes need {} more",
            classes.len(),
            n_way - classes.len()
        )));
    }
    let need = k_shot + query_per_class;
    let class_map: Vec<usize> = sample_indices(rng, classes.len(), n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_per_class);
    for (local, &class) in class_map.iter().enumerate() {
        let members = dataset.class_members(class);
        if members.len() < need {
            return Err(DataError::Sampling(format!(
                "class {class} has {} graphs, episode needs {need} ({} short)",
                members.len(),
                need - members.len()
            )));
        }
        let picks = sample_indices(rng, members.len(), need);
        for (j, p) in picks.into_iter().enumerate() {
            let shot = Shot {
                graph: Arc::clone(&dataset.graphs[members[p]]),
                label: local,
            };
            if j < k_shot {
                support.push(shot);
            } else {
                query.push(shot);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        class_map,
        n_way,
        k_shot,
        query_per_class,
    })
}

// ---------------------------------------------------------------------------
// Line-delimited JSON storage

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    d: usize,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    provenance: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: usize,
    num_nodes: usize,
    /// Nonzero adjacency entries; both directions of every edge are listed.
    edges: Vec<[usize; 2]>,
    /// Row-major `num_nodes × d`.
    features: Vec<f64>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_mask: Option<Vec<u8>>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<(), DataError> {
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        d: dataset.feature_dim,
        num_classes: dataset.num_classes,
        provenance: dataset.provenance.clone(),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for g in &dataset.graphs {
        let record = Record {
            id: g.id,
            num_nodes: g.num_nodes(),
            edges: g
                .neighbors
                .iter()
                .enumerate()
                .flat_map(|(u, ns)| ns.iter().map(move |&v| [u, v]))
                .collect(),
            features: g.features.data().to_vec(),
            label: g.label,
            truth_mask: g.truth_mask.clone(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn read_dataset(reader: impl BufRead) -> Result<Dataset, DataError> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (line_no, first) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty dataset file".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| DataError::Parse {
        line: line_no,
        message: format!("bad header: {e}"),
    })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::Validation {
            line: Some(line_no),
            message: format!("unsupported format_version {}", header.format_version),
        });
    }
    let mut graphs = Vec::new();
    for (line, text) in lines {
        let record: Record = serde_json::from_str(&text?).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        graphs.push(record_to_graph(record, header.d).map_err(|message| {
            DataError::Validation {
                line: Some(line),
                message,
            }
        })?);
    }
    let dataset = Dataset::new(graphs, header.num_classes).map_err(|e| match e {
        DataError::Validation { message, .. } => DataError::Validation {
            line: None,
            message,
        },
        other => other,
    })?;
    Ok(dataset.with_provenance(header.provenance))
}

fn record_to_graph(r: Record, d: usize) -> Result<Graph, String> {
    let n = r.num_nodes;
    if r.features.len() != n * d {
        return Err(format!(
            "graph {}: {} feature values, expected {n}×{d}",
            r.id,
            r.features.len()
        ));
    }
    let pairs: HashSet<(usize, usize)> = r.edges.iter().map(|&[u, v]| (u, v)).collect();
    for &(u, v) in &pairs {
        if u >= n || v >= n {
            return Err(format!("graph {}: edge [{u}, {v}] out of range", r.id));
        }
        if u == v {
            return Err(format!("graph {}: self-loop on node {u}", r.id));
        }
        if !pairs.contains(&(v, u)) {
            return Err(format!(
                "graph {}: adjacency is not symmetric, [{u}, {v}] has no reverse",
                r.id
            ));
        }
    }
    let edges: Vec<_> = pairs.into_iter().filter(|(u, v)| u < v).collect();
    let features = Tensor::matrix(n, d, r.features).map_err(|e| e.to_string())?;
    Graph::new(r.id, n, &edges, features, r.label, r.truth_mask).map_err(|e| match e {
        DataError::Validation { message, .. } => message,
        other => other.to_string(),
    })
}
