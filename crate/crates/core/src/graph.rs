//! Three-layer hierarchical graph: similarity graph over the bottom series,
//! a cluster layer, and a single aggregate root.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ClusterFeatures;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_with, profile_features};
use crate::par::{self, Execution};
use crate::series::SeriesTable;

pub const BOTTOM: usize = 0;
pub const MIDDLE: usize = 1;
pub const TOP: usize = 2;
pub const NUM_LAYERS: usize = 3;
pub const LAYER_NAMES: [&str; NUM_LAYERS] = ["bottom", "middle", "top"];

/// Pearson correlation. A constant vector has no defined correlation; it
/// is reported as 0 with a warning so it never wins a top-K pick.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        warn!("pearson on a zero-variance series; similarity set to 0");
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise Pearson coefficients between rows.
pub fn similarity_matrix(profiles: &Array2<f64>) -> Result<Array2<f64>> {
    similarity_matrix_with(profiles, Execution::default())
}

pub fn similarity_matrix_with(profiles: &Array2<f64>, exec: Execution) -> Result<Array2<f64>> {
    let n = profiles.nrows();
    let rows: Vec<Vec<f64>> = profiles.rows().into_iter().map(|r| r.to_vec()).collect();
    let upper: Vec<Result<Vec<f64>>> =
        par::map_range(exec, n, |i| (i + 1..n).map(|j| pearson(&rows[i], &rows[j])).collect());
    let mut s = Array2::from_elem((n, n), 1.0);
    for (i, r) in upper.into_iter().enumerate() {
        for (off, v) in r?.into_iter().enumerate() {
            let j = i + 1 + off;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Each node links to its `k` most similar other nodes; ties break by node
/// id. The union of all picks is returned as sorted `(i, j)` with `i < j`.
pub fn top_k_edges(similarity: &Array2<f64>, ids: &[String], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = ids.len();
    if similarity.dim() != (n, n) {
        return Err(Error::dim(format!("similarity {:?} for {n} nodes", similarity.dim())));
    }
    if k == 0 || k >= n {
        return Err(Error::config(format!(
            "top-K must satisfy 0 < K < {n} (node count), got {k}"
        )));
    }
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| {
            similarity[(i, b)]
                .total_cmp(&similarity[(i, a)])
                .then_with(|| ids[a].cmp(&ids[b]))
        });
        for &j in &cand[..k] {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Top-K Pearson graph over the given per-node profiles.
pub fn build_bottom_graph(profiles: &Array2<f64>, ids: &[String], k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k >= ids.len() {
        return Err(Error::config(format!(
            "top-K must satisfy 0 < K < {} (node count), got {k}",
            ids.len()
        )));
    }
    top_k_edges(&similarity_matrix(profiles)?, ids, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub layer: usize,
    pub index: usize,
}

/// Which layers' nodes are forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionLayerMode {
    /// Bottom nodes only.
    Bottom,
    BottomTop,
    /// Every node of every layer.
    #[default]
    All,
}

impl std::str::FromStr for PredictionLayerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(Self::Bottom),
            "bottom-top" => Ok(Self::BottomTop),
            "all" => Ok(Self::All),
            other => Err(Error::config(format!(
                "unknown prediction layer `{other}` (bottom, bottom-top, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerGraph {
    /// Node ids per layer, bottom first.
    pub layers: Vec<Vec<String>>,
    /// Undirected intra-layer edges per layer as sorted `(i, j)`, `i < j`.
    pub edges: Vec<Vec<(usize, usize)>>,
    /// `parents[0][i]` is the middle parent of bottom node `i`,
    /// `parents[1][j]` the top parent of middle node `j`.
    pub parents: Vec<Vec<usize>>,
    /// Forecast targets, bottom layer first, in layer order.
    pub prediction_layer: Vec<NodeRef>,
}

impl MultiLayerGraph {
    pub fn layer_size(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn layer_sizes(&self) -> [usize; 3] {
        [self.layers[0].len(), self.layers[1].len(), self.layers[2].len()]
    }

    pub fn node_id(&self, n: NodeRef) -> &str {
        &self.layers[n.layer][n.index]
    }

    pub fn parent(&self, n: NodeRef) -> Option<NodeRef> {
        (n.layer < TOP).then(|| NodeRef {
            layer: n.layer + 1,
            index: self.parents[n.layer][n.index],
        })
    }

    pub fn children(&self, n: NodeRef) -> Vec<usize> {
        if n.layer == BOTTOM {
            return Vec::new();
        }
        self.parents[n.layer - 1]
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == n.index)
            .map(|(c, _)| c)
            .collect()
    }

    /// Bottom-layer indices under `n` (itself for a bottom node).
    pub fn bottom_descendants(&self, n: NodeRef) -> Vec<usize> {
        match n.layer {
            BOTTOM => vec![n.index],
            MIDDLE => self.children(n),
            _ => (0..self.layer_size(BOTTOM))
                .filter(|&b| self.parents[1][self.parents[0][b]] == n.index)
                .collect(),
        }
    }

    /// Neighbour lists for one layer.
    pub fn neighbours(&self, layer: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.layer_size(layer)];
        for &(i, j) in &self.edges[layer] {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    pub fn prediction_index(&self, n: NodeRef) -> Option<usize> {
        self.prediction_layer.iter().position(|p| *p == n)
    }

    pub fn prediction_ids(&self) -> Vec<String> {
        self.prediction_layer
            .iter()
            .map(|n| self.node_id(*n).to_string())
            .collect()
    }

    pub fn set_prediction_layer(&mut self, mode: PredictionLayerMode) {
        let layers: &[usize] = match mode {
            PredictionLayerMode::Bottom => &[BOTTOM],
            PredictionLayerMode::BottomTop => &[BOTTOM, TOP],
            PredictionLayerMode::All => &[BOTTOM, MIDDLE, TOP],
        };
        self.prediction_layer = layers
            .iter()
            .flat_map(|&l| (0..self.layer_size(l)).map(move |i| NodeRef { layer: l, index: i }))
            .collect();
    }

    /// Series for every layer from the bottom series: each parent row is the
    /// sum of its children's rows.
    pub fn layer_values(&self, bottom: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if bottom.nrows() != self.layer_size(BOTTOM) {
            return Err(Error::dim(format!(
                "{} bottom series for {} bottom nodes",
                bottom.nrows(),
                self.layer_size(BOTTOM)
            )));
        }
        let mut out = vec![bottom.clone()];
        for layer in [MIDDLE, TOP] {
            let below = &out[layer - 1];
            let mut v = Array2::zeros((self.layer_size(layer), bottom.ncols()));
            for (c, &p) in self.parents[layer - 1].iter().enumerate() {
                let mut row = v.row_mut(p);
                row += &below.row(c);
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Rows of `layer_values` arranged in prediction-layer order.
    pub fn prediction_values(&self, layers: &[Array2<f64>]) -> Array2<f64> {
        let cols = layers[0].ncols();
        let mut out = Array2::zeros((self.prediction_layer.len(), cols));
        for (r, n) in self.prediction_layer.iter().enumerate() {
            out.row_mut(r).assign(&layers[n.layer].row(n.index));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.layers.len() != NUM_LAYERS || self.edges.len() != NUM_LAYERS || self.parents.len() != 2 {
            return Err(Error::Graph("a hierarchy needs exactly three layers".into()));
        }
        if self.layers.iter().any(Vec::is_empty) {
            return Err(Error::Graph("every layer needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.layers.iter().flatten() {
            if !seen.insert(id) {
                return Err(Error::Graph(format!("node id `{id}` appears twice")));
            }
        }
        for l in 0..2 {
            if self.parents[l].len() != self.layer_size(l) {
                return Err(Error::Graph(format!("layer {l} has nodes without a parent")));
            }
            if self.parents[l].iter().any(|&p| p >= self.layer_size(l + 1)) {
                return Err(Error::Graph(format!("layer {l} references a missing parent")));
            }
        }
        for (l, es) in self.edges.iter().enumerate() {
            for &(i, j) in es {
                if i >= j || j >= self.layer_size(l) {
                    return Err(Error::Graph(format!(
                        "edge ({i}, {j}) in layer {l} is a self-loop, unsorted or out of range"
                    )));
                }
            }
        }
        for n in &self.prediction_layer {
            if n.layer >= NUM_LAYERS || n.index >= self.layer_size(n.layer) {
                return Err(Error::Graph(format!("prediction node {n:?} does not exist")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: GraphJson = serde_json::from_str(s)?;
        j.try_into()
    }
}

/// Id-based interchange form of [`MultiLayerGraph`].
#[derive(Debug, Serialize, Deserialize)]
struct GraphJson {
    layers: Vec<Vec<String>>,
    edges: Vec<Vec<(String, String)>>,
    parents: BTreeMap<String, String>,
    prediction_layer: Vec<String>,
}

impl From<&MultiLayerGraph> for GraphJson {
    fn from(g: &MultiLayerGraph) -> Self {
        let edges = g
            .edges
            .iter()
            .enumerate()
            .map(|(l, es)| {
                es.iter()
                    .map(|&(i, j)| (g.layers[l][i].clone(), g.layers[l][j].clone()))
                    .collect()
            })
            .collect();
        let mut parents = BTreeMap::new();
        for l in 0..2 {
            for (c, &p) in g.parents[l].iter().enumerate() {
                parents.insert(g.layers[l][c].clone(), g.layers[l + 1][p].clone());
            }
        }
        GraphJson {
            layers: g.layers.clone(),
            edges,
            parents,
            prediction_layer: g.prediction_ids(),
        }
    }
}

impl TryFrom<GraphJson> for MultiLayerGraph {
    type Error = Error;
    fn try_from(j: GraphJson) -> Result<Self> {
        if j.layers.len() != NUM_LAYERS || j.edges.len() != NUM_LAYERS {
            return Err(Error::Graph("hierarchy JSON needs three layers".into()));
        }
        let mut where_is: HashMap<&str, NodeRef> = HashMap::new();
        for (l, ids) in j.layers.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                where_is.insert(id, NodeRef { layer: l, index: i });
            }
        }
        let find = |id: &str| {
            where_is
                .get(id)
                .copied()
                .ok_or_else(|| Error::Graph(format!("unknown node `{id}`")))
        };
        let mut edges = vec![Vec::new(); NUM_LAYERS];
        for (l, es) in j.edges.iter().enumerate() {
            for (a, b) in es {
                let (x, y) = (find(a)?, find(b)?);
                if x.layer != l || y.layer != l {
                    return Err(Error::Graph(format!("edge {a}-{b} leaves layer {l}")));
                }
                edges[l].push((x.index.min(y.index), x.index.max(y.index)));
            }
            edges[l].sort_unstable();
            edges[l].dedup();
        }
        let mut parents = vec![vec![usize::MAX; j.layers[0].len()], vec![usize::MAX; j.layers[1].len()]];
        for (c, p) in &j.parents {
            let (cn, pn) = (find(c)?, find(p)?);
            if cn.layer >= TOP || pn.layer != cn.layer + 1 {
                return Err(Error::Graph(format!("`{p}` cannot be the parent of `{c}`")));
            }
            parents[cn.layer][cn.index] = pn.index;
        }
        let prediction_layer = j
            .prediction_layer
            .iter()
            .map(|id| find(id))
            .collect::<Result<Vec<_>>>()?;
        let g = MultiLayerGraph {
            layers: j.layers,
            edges,
            parents,
            prediction_layer,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Assemble the three layers from bottom ids, bottom edges and a cluster
/// assignment. Empty clusters are dropped and the rest renumbered in order
/// of their first member, so equal partitions give equal graphs.
pub fn build_hierarchy(
    bottom_ids: &[String],
    bottom_edges: &[(usize, usize)],
    assignment: &[usize],
    mode: PredictionLayerMode,
) -> Result<MultiLayerGraph> {
    if assignment.len() != bottom_ids.len() {
        return Err(Error::dim(format!(
            "assignment covers {} of {} bottom nodes",
            assignment.len(),
            bottom_ids.len()
        )));
    }
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut first_seen = Vec::new();
    for &c in assignment {
        if let std::collections::btree_map::Entry::Vacant(e) = relabel.entry(c) {
            e.insert(first_seen.len());
            first_seen.push(c);
        }
    }
    let k = first_seen.len();
    let taken: BTreeSet<&String> = bottom_ids.iter().collect();
    let fresh = |base: String| {
        let mut id = base;
        while taken.contains(&id) {
            id = format!("_{id}");
        }
        id
    };
    let middle: Vec<String> = (0..k).map(|c| fresh(format!("cluster_{c}"))).collect();
    let top = vec![fresh("total".to_string())];
    let middle_edges = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let mut edges: Vec<(usize, usize)> = bottom_edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    edges.sort_unstable();
    edges.dedup();
    let mut g = MultiLayerGraph {
        layers: vec![bottom_ids.to_vec(), middle, top],
        edges: vec![edges, middle_edges, Vec::new()],
        parents: vec![assignment.iter().map(|c| relabel[c]).collect(), vec![0; k]],
        prediction_layer: Vec::new(),
    };
    g.set_prediction_layer(mode);
    g.validate()?;
    Ok(g)
}

/// Knobs for building a hierarchy straight from a series table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchySettings {
    pub top_k: usize,
    pub clusters: usize,
    pub features: ClusterFeatures,
    pub slots_per_day: usize,
    /// Only `[0, span_end)` feeds the daily profiles.
    pub span_end: usize,
    pub seed: u64,
    pub mode: PredictionLayerMode,
}

/// Daily profiles over the span, top-K Pearson graph on them, k-means on
/// their features, then the three layers.
pub fn construct_hierarchy(table: &SeriesTable, s: &HierarchySettings, exec: Execution) -> Result<MultiLayerGraph> {
    let profiles = table.daily_profiles(s.slots_per_day, s.span_end)?;
    if s.top_k == 0 || s.top_k >= table.num_nodes() {
        return Err(Error::config(format!(
            "top-K must satisfy 0 < K < {} (node count), got {}",
            table.num_nodes(),
            s.top_k
        )));
    }
    let edges = top_k_edges(&similarity_matrix_with(&profiles, exec)?, &table.node_ids, s.top_k)?;
    let km = kmeans_with(&profile_features(&profiles, s.features), s.clusters, s.seed, exec)?;
    build_hierarchy(&table.node_ids, &edges, &km.assignment, s.mode)
}

/// 0/1 matrix mapping bottom values to prediction-layer values.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyMatrix {
    /// `[V_pr × V_bottom]`
    pub matrix: Array2<f64>,
    pub row_nodes: Vec<NodeRef>,
    pub col_nodes: Vec<usize>,
}

impl HierarchyMatrix {
    pub fn to_csv(&self, graph: &MultiLayerGraph) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["node_id".to_string()];
        header.extend(self.col_nodes.iter().map(|&c| graph.layers[BOTTOM][c].clone()));
        w.write_record(&header)?;
        for (r, n) in self.row_nodes.iter().enumerate() {
            let mut rec = vec![graph.node_id(*n).to_string()];
            rec.extend(self.matrix.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// `H × bottom` for `[V_bottom × T]` bottom values.
    pub fn apply(&self, bottom: &Array2<f64>) -> Array2<f64> {
        self.matrix.dot(bottom)
    }
}

pub fn build_hr(graph: &MultiLayerGraph) -> Result<HierarchyMatrix> {
    if !graph.prediction_layer.iter().any(|n| n.layer == BOTTOM) {
        return Err(Error::config("coordination needs bottom nodes in the prediction layer"));
    }
    let cols = graph.layer_size(BOTTOM);
    let mut m = Array2::zeros((graph.prediction_layer.len(), cols));
    for (r, n) in graph.prediction_layer.iter().enumerate() {
        for b in graph.bottom_descendants(*n) {
            m[(r, b)] = 1.0;
        }
    }
    Ok(HierarchyMatrix {
        matrix: m,
        row_nodes: graph.prediction_layer.clone(),
        col_nodes: (0..cols).collect(),
    })
}
