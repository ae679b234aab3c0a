//! Graph topology, node data, hop-distance queries and the synthetic
//! stochastic-block-model generator.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GridError, Result};
use crate::rng;

/// Undirected simple graph. Edges are stored canonically as `(u, v)` with
/// `u < v`, sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Duplicate edges (in either
    /// orientation) collapse into one; self-loops and out-of-range endpoints
    /// are rejected.
    pub fn from_edges<I>(num_nodes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(GridError::Validation(format!("self-loop on node {u}")));
            }
            if u >= num_nodes || v >= num_nodes {
                return Err(GridError::Validation(format!(
                    "edge ({u},{v}) out of range for {num_nodes} nodes"
                )));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Graph {
            num_nodes,
            edges,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.num_nodes && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Shortest-path distances from `src`, explored no further than `cap`
    /// hops. Nodes beyond the cap (or unreachable) get `None`.
    pub fn bfs_capped(&self, src: usize, cap: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes];
        dist[src] = Some(0);
        let mut frontier = vec![src];
        let mut depth = 0;
        while !frontier.is_empty() && depth < cap {
            depth += 1;
            let mut next = Vec::new();
            for &u in &frontier {
                for &w in &self.adjacency[u] {
                    if dist[w].is_none() {
                        dist[w] = Some(depth);
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    /// Edge list serialization used by golden tests and the edge file writer.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for &(u, v) in &self.edges {
            let _ = writeln!(out, "{u}\t{v}");
        }
        out
    }
}

/// Per-node attributes and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeData {
    pub attributes: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl NodeData {
    pub fn new(attributes: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if attributes.len() != labels.len() {
            return Err(GridError::Validation(format!(
                "{} attribute rows but {} labels",
                attributes.len(),
                labels.len()
            )));
        }
        let dim = attributes.first().map_or(0, Vec::len);
        if let Some(i) = attributes.iter().position(|a| a.len() != dim) {
            return Err(GridError::Validation(format!(
                "node {i} has attribute dimension {} (expected {dim})",
                attributes[i].len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(GridError::Validation(format!(
                "node {i} label {} outside [0,{num_classes})",
                labels[i]
            )));
        }
        Ok(NodeData {
            attributes,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }
}

/// Cached BFS rings: for every node, the sorted sets of nodes at distance
/// exactly `1..=cap`.
#[derive(Clone, Debug)]
pub struct HopIndex {
    cap: usize,
    rings: Vec<Vec<Vec<usize>>>,
}

impl HopIndex {
    pub fn build(graph: &Graph, cap: usize) -> Self {
        let build_one = |i: usize| {
            let dist = graph.bfs_capped(i, cap);
            let mut rings = vec![Vec::new(); cap];
            for (j, d) in dist.iter().enumerate() {
                if let Some(d) = *d {
                    if d >= 1 {
                        rings[d - 1].push(j);
                    }
                }
            }
            rings
        };
        #[cfg(feature = "parallel")]
        let rings = {
            use rayon::prelude::*;
            (0..graph.num_nodes()).into_par_iter().map(build_one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rings = (0..graph.num_nodes()).map(build_one).collect();
        HopIndex { cap, rings }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn num_nodes(&self) -> usize {
        self.rings.len()
    }

    /// Nodes at distance exactly `d` from `i` (`1 <= d <= cap`).
    pub fn ring(&self, i: usize, d: usize) -> &[usize] {
        assert!(d >= 1 && d <= self.cap, "ring {d} outside cap {}", self.cap);
        &self.rings[i][d - 1]
    }

    /// Distance between `i` and `j`, or `None` if it exceeds the cap.
    pub fn distance(&self, i: usize, j: usize) -> Option<usize> {
        if i == j {
            return Some(0);
        }
        self.rings[i]
            .iter()
            .position(|ring| ring.binary_search(&j).is_ok())
            .map(|k| k + 1)
    }
}

/// Samples up to `max_pairs` unordered pairs `(i, j)`, `i < j`, at
/// shortest-path distance exactly `n`. Returned sorted.
pub fn n_hop_pairs(graph: &Graph, n: usize, max_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(GridError::Validation(format!("hop count must be >= 2, got {n}")));
    }
    let index = HopIndex::build(graph, n);
    Ok(n_hop_pairs_indexed(&index, n, max_pairs, seed))
}

pub fn n_hop_pairs_indexed(index: &HopIndex, n: usize, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..index.num_nodes())
        .flat_map(|i| {
            index
                .ring(i, n)
                .iter()
                .filter(move |&&j| j > i)
                .map(move |&j| (i, j))
        })
        .collect();
    sample_sorted(&all, max_pairs, &mut rng::seeded(seed))
}

/// Samples up to `max_pairs` distinct non-adjacent pairs (distance >= 2 or
/// disconnected). Used when no exact-distance pairs exist.
pub fn non_adjacent_pairs(graph: &Graph, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let n = graph.num_nodes();
    let all: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !graph.has_edge(i, j))
        .collect();
    sample_sorted(&all, max_pairs, &mut rng::seeded(seed))
}

fn sample_sorted<T: Copy + Ord>(pool: &[T], k: usize, rng: &mut impl Rng) -> Vec<T> {
    let k = k.min(pool.len());
    let mut out: Vec<T> = index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|ix| pool[ix])
        .collect();
    out.sort_unstable();
    out
}

/// Direct neighbours `P_i` of `i` and a seeded sample `Q_i` of at most
/// `max_q` nodes at distance exactly `n`.
pub fn adjacent_and_nhop_sets(
    index: &HopIndex,
    graph: &Graph,
    i: usize,
    n: usize,
    max_q: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let p = graph.neighbors(i).to_vec();
    let q = sample_sorted(index.ring(i, n), max_q, &mut rng::derive(seed, i as u64));
    (p, q)
}

/// Parameters for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmParams {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub attr_dim: usize,
}

impl Default for SbmParams {
    fn default() -> Self {
        SbmParams {
            blocks: 4,
            nodes_per_block: 50,
            p_in: 0.1,
            p_out: 0.005,
            attr_dim: 8,
        }
    }
}

/// Standard deviation of the Gaussian perturbation on one-hot attributes.
pub const ATTR_NOISE_STD: f64 = 0.3;

/// Stochastic block model: block id doubles as the label, attributes are
/// `one_hot(label) + N(0, 0.3)` in `attr_dim` dimensions.
pub fn generate_synthetic(seed: u64, params: &SbmParams) -> Result<(Graph, NodeData)> {
    let SbmParams {
        blocks,
        nodes_per_block,
        p_in,
        p_out,
        attr_dim,
    } = *params;
    let num_nodes = blocks * nodes_per_block;
    if num_nodes == 0 {
        return Err(GridError::Validation("synthetic graph has zero nodes".into()));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out >= p_in {
        return Err(GridError::Validation(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if attr_dim < blocks {
        return Err(GridError::Validation(format!(
            "attr_dim {attr_dim} cannot hold a one-hot encoding of {blocks} labels"
        )));
    }

    let mut rng = rng::seeded(seed);
    let labels: Vec<usize> = (0..num_nodes).map(|i| i / nodes_per_block).collect();
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in (i + 1)..num_nodes {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let normal = Normal::new(0.0, ATTR_NOISE_STD).expect("valid std");
    let attributes = labels
        .iter()
        .map(|&l| {
            (0..attr_dim)
                .map(|k| f64::from(u8::from(k == l)) + normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let graph = Graph::from_edges(num_nodes, edges)?;
    let data = NodeData::new(attributes, labels, blocks)?;
    Ok((graph, data))
}

/// Parses an edge file: one `u<TAB>v` pair per line, `#` comments, blank
/// lines ignored.
pub fn parse_edges(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (ix, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(GridError::parse(path, ix + 1, format!("expected two node ids, got {line:?}")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| GridError::parse(path, ix + 1, format!("bad node id {s:?}: {e}")))
        };
        let (u, v) = (parse(fields[0])?, parse(fields[1])?);
        if u == v {
            return Err(GridError::parse(path, ix + 1, format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Loads node data from CSV with header `id,label,f0,...,f{d-1}`. Ids must
/// be exactly `0..n` (any order).
pub fn load_nodes(path: &Path) -> Result<NodeData> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(GridError::parse(path, 1, "header must start with id,label"));
    }
    let dim = headers.len() - 2;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (ix, rec) in reader.records().enumerate() {
        let line = ix + 2;
        let rec = rec.map_err(|e| GridError::parse(path, line, e.to_string()))?;
        if rec.len() != dim + 2 {
            return Err(GridError::parse(path, line, format!("expected {} fields, got {}", dim + 2, rec.len())));
        }
        let id = rec[0]
            .parse::<usize>()
            .map_err(|e| GridError::parse(path, line, format!("bad id: {e}")))?;
        let label = rec[1]
            .parse::<usize>()
            .map_err(|e| GridError::parse(path, line, format!("bad label: {e}")))?;
        let feats = (2..rec.len())
            .map(|k| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| GridError::parse(path, line, format!("bad feature f{}: {e}", k - 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, label, feats));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(pos) = rows.iter().enumerate().position(|(k, r)| r.0 != k) {
        return Err(GridError::Validation(format!(
            "node ids must be 0..{}; missing or duplicate id near {pos}",
            rows.len()
        )));
    }
    let num_classes = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let (labels, attributes) = rows.into_iter().map(|(_, l, f)| (l, f)).unzip();
    NodeData::new(attributes, labels, num_classes)
}

/// Loads an edge file plus node file. The node file fixes the node count, so
/// isolated nodes are allowed.
pub fn load_graph(edge_file: &Path, node_file: &Path) -> Result<(Graph, NodeData)> {
    let data = load_nodes(node_file)?;
    let text = fs::read_to_string(edge_file)?;
    let edges = parse_edges(edge_file, &text)?;
    let graph = Graph::from_edges(data.len(), edges)?;
    Ok((graph, data))
}

pub fn write_edges(path: &Path, graph: &Graph) -> Result<()> {
    fs::write(path, graph.to_edge_text())?;
    Ok(())
}

pub fn write_nodes(path: &Path, data: &NodeData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..data.attr_dim()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (i, (label, attrs)) in data.labels.iter().zip(&data.attributes).enumerate() {
        let mut rec = vec![i.to_string(), label.to_string()];
        rec.extend(attrs.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Graph {
        Graph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn adjacency_from_edge_list() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn self_loop_rejected() {
        let err = parse_edges(Path::new("e.tsv"), "0\t1\n0\t0\n").unwrap_err();
        match err {
            GridError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Graph::from_edges(2, [(0, 0)]).is_err());
    }

    #[test]
    fn duplicate_orientations_collapse() {
        let edges = parse_edges(Path::new("e.tsv"), "# comment\n0\t1\n1\t0\n\n").unwrap();
        let g = Graph::from_edges(2, edges).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_edges(Path::new("e.tsv"), "0\t1\n1\tx\n").unwrap_err();
        assert!(err.to_string().contains("e.tsv:2"), "{err}");
        let err = parse_edges(Path::new("e.tsv"), "0 1 2\n").unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            Graph::from_edges(2, [(0, 2)]),
            Err(GridError::Validation(_))
        ));
    }

    #[test]
    fn path_two_hop_pairs() {
        let g = path(4);
        assert_eq!(n_hop_pairs(&g, 2, 100, 0).unwrap(), vec![(0, 2), (1, 3)]);
        assert_eq!(n_hop_pairs(&g, 3, 100, 0).unwrap(), vec![(0, 3)]);
        assert!(n_hop_pairs(&g, 1, 100, 0).is_err());
    }

    #[test]
    fn complete_graph_has_no_two_hop_pairs() {
        let k4 = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        assert!(n_hop_pairs(&k4, 2, 100, 0).unwrap().is_empty());
    }

    #[test]
    fn star_sets() {
        let star = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let idx = HopIndex::build(&star, 2);
        let (p, q) = adjacent_and_nhop_sets(&idx, &star, 0, 2, 32, 0);
        assert_eq!(p, vec![1, 2, 3]);
        assert!(q.is_empty());
        let (p, q) = adjacent_and_nhop_sets(&idx, &star, 1, 2, 32, 0);
        assert_eq!(p, vec![0]);
        assert_eq!(q, vec![2, 3]);
    }

    #[test]
    fn hop_index_distances() {
        let g = path(5);
        let idx = HopIndex::build(&g, 3);
        assert_eq!(idx.distance(0, 0), Some(0));
        assert_eq!(idx.distance(0, 1), Some(1));
        assert_eq!(idx.distance(3, 0), Some(3));
        assert_eq!(idx.distance(0, 4), None);
    }

    #[test]
    fn degenerate_synthetic() {
        let params = SbmParams {
            blocks: 2,
            nodes_per_block: 1,
            p_in: 0.5,
            p_out: 0.0,
            attr_dim: 2,
        };
        let (g, d) = generate_synthetic(3, &params).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 0);
        assert_eq!(d.labels, vec![0, 1]);
    }

    #[test]
    fn synthetic_validation() {
        let mut p = SbmParams::default();
        p.nodes_per_block = 0;
        assert!(generate_synthetic(0, &p).is_err());
        let mut p = SbmParams::default();
        p.p_out = 0.2;
        assert!(generate_synthetic(0, &p).is_err());
    }

    #[test]
    fn synthetic_is_homophilous() {
        let params = SbmParams {
            blocks: 4,
            nodes_per_block: 50,
            p_in: 0.1,
            p_out: 0.005,
            attr_dim: 4,
        };
        let (g, d) = generate_synthetic(11, &params).unwrap();
        let intra = g
            .edges()
            .iter()
            .filter(|&&(u, v)| d.labels[u] == d.labels[v])
            .count();
        let inter = g.num_edges() - intra;
        assert!(intra > inter, "intra={intra} inter={inter}");
    }
}
