//! Threshold-based core node selection and estimation of the similarity
//! threshold `delta`.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::graphio::{self, Graph, HopIndex};
use crate::simkit::{mean_pair_similarity, MetricKind, PredictionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub u: usize,
    pub v: usize,
    /// Combined similarity of the endpoint posteriors.
    pub weight: f64,
}

/// Result of [`estimate_delta`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta: f64,
    /// Number of pairs the mean was taken over.
    pub num_pairs: usize,
    /// Set when no pair at exactly `n` hops existed and the mean was taken
    /// over non-adjacent pairs instead.
    pub fallback: bool,
}

/// Mean combined similarity over sampled pairs at exactly `n` hops.
pub fn estimate_delta(
    graph: &Graph,
    preds: &PredictionMatrix,
    n: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<DeltaEstimate> {
    let index = HopIndex::build(graph, n.max(2));
    estimate_delta_indexed(graph, &index, preds, n, max_pairs, seed)
}

pub fn estimate_delta_indexed(
    graph: &Graph,
    index: &HopIndex,
    preds: &PredictionMatrix,
    n: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<DeltaEstimate> {
    if graph.num_nodes() < 3 {
        return Err(GridError::InsufficientStructure(format!(
            "{} nodes; need at least 3 to estimate a hop threshold",
            graph.num_nodes()
        )));
    }
    if n < 2 || max_pairs == 0 {
        return Err(GridError::Validation(format!(
            "need n >= 2 and max_pairs >= 1 (got n={n}, max_pairs={max_pairs})"
        )));
    }
    let pairs = graphio::n_hop_pairs_indexed(index, n, max_pairs, seed);
    if !pairs.is_empty() {
        return Ok(DeltaEstimate {
            delta: mean_pair_similarity(preds, &pairs, MetricKind::CombinedCorrCos)?,
            num_pairs: pairs.len(),
            fallback: false,
        });
    }
    warn!("no node pairs at exactly {n} hops; estimating delta over non-adjacent pairs");
    let pairs = graphio::non_adjacent_pairs(graph, max_pairs, seed);
    if pairs.is_empty() {
        return Err(GridError::InsufficientStructure(
            "graph is complete; no non-adjacent pairs to estimate delta".into(),
        ));
    }
    Ok(DeltaEstimate {
        delta: mean_pair_similarity(preds, &pairs, MetricKind::CombinedCorrCos)?,
        num_pairs: pairs.len(),
        fallback: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSet {
    /// Selected node ids, ascending.
    pub members: Vec<usize>,
    pub delta: f64,
    /// Similarity-weighted degree of every node.
    pub degrees: Vec<f64>,
    /// Weight of every graph edge, aligned with `Graph::edges()`.
    pub edge_weights: Vec<WeightedEdge>,
    pub num_covered: usize,
    pub num_dropped: usize,
}

impl CoreSet {
    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    pub fn covered_edges(&self) -> impl Iterator<Item = &WeightedEdge> {
        self.edge_weights.iter().filter(move |e| e.weight >= self.delta)
    }

    pub fn dropped_edges(&self) -> impl Iterator<Item = &WeightedEdge> {
        self.edge_weights.iter().filter(move |e| e.weight < self.delta)
    }

    pub fn empty(graph: &Graph, delta: f64) -> Self {
        CoreSet {
            members: Vec::new(),
            delta,
            degrees: vec![0.0; graph.num_nodes()],
            edge_weights: Vec::new(),
            num_covered: 0,
            num_dropped: 0,
        }
    }
}

/// Greedy cover of all edges whose endpoint similarity is at least `delta`.
///
/// Edges are scanned by descending weight (ties by endpoint order). For an
/// edge with neither endpoint selected, the endpoint with the larger
/// similarity-weighted degree joins the core; equal degrees go to the lower
/// node id. Degrees are computed once up front.
pub fn select_core(graph: &Graph, preds: &PredictionMatrix, delta: f64) -> CoreSet {
    let edge_weights: Vec<WeightedEdge> = graph
        .edges()
        .iter()
        .map(|&(u, v)| WeightedEdge {
            u,
            v,
            weight: preds.similarity(u, v, MetricKind::CombinedCorrCos),
        })
        .collect();

    let mut degrees = vec![0.0; graph.num_nodes()];
    for e in &edge_weights {
        degrees[e.u] += e.weight;
        degrees[e.v] += e.weight;
    }

    let mut order: Vec<&WeightedEdge> = edge_weights.iter().collect();
    order.sort_by(|a, b| b.weight.total_cmp(&a.weight).then((a.u, a.v).cmp(&(b.u, b.v))));

    let mut selected = vec![false; graph.num_nodes()];
    let mut num_covered = 0;
    for e in &order {
        if e.weight < delta {
            // descending order: everything after is below the threshold too
            break;
        }
        num_covered += 1;
        if selected[e.u] || selected[e.v] {
            continue;
        }
        let pick = if degrees[e.v] > degrees[e.u] { e.v } else { e.u };
        selected[pick] = true;
    }

    let members = (0..graph.num_nodes()).filter(|&i| selected[i]).collect();
    let num_dropped = edge_weights.len() - num_covered;
    CoreSet {
        members,
        delta,
        degrees,
        edge_weights,
        num_covered,
        num_dropped,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverCheck {
    pub ok: bool,
    pub uncovered: Vec<(usize, usize)>,
}

/// Checks that every edge with weight `>= core.delta` touches a member.
pub fn verify_cover(graph: &Graph, core: &CoreSet) -> CoverCheck {
    let weight_of = |u: usize, v: usize| {
        // edge_weights follows the graph's sorted edge order
        core.edge_weights
            .binary_search_by_key(&(u, v), |e| (e.u, e.v))
            .map_or(f64::NEG_INFINITY, |k| core.edge_weights[k].weight)
    };
    let uncovered: Vec<_> = graph
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| weight_of(u, v) >= core.delta)
        .filter(|&(u, v)| !core.contains(u) && !core.contains(v))
        .collect();
    CoverCheck {
        ok: uncovered.is_empty(),
        uncovered,
    }
}

#[derive(Serialize)]
struct CoreSidecar {
    delta: f64,
    n: usize,
    num_covered: usize,
    num_dropped: usize,
}

/// Writes the member list as CSV (`node_id`) and a JSON sidecar with the
/// threshold and edge partition counts.
pub fn write_core(csv_path: &Path, json_path: &Path, core: &CoreSet, n: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["node_id"])?;
    for m in &core.members {
        w.write_record([m.to_string()])?;
    }
    w.flush()?;
    let sidecar = CoreSidecar {
        delta: core.delta,
        n,
        num_covered: core.num_covered,
        num_dropped: core.num_dropped,
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_preds(n: usize) -> PredictionMatrix {
        // distinct non-constant rows that are all highly similar
        PredictionMatrix::new(
            (0..n)
                .map(|i| {
                    let t = 0.6 + 0.01 * i as f64;
                    vec![t, 1.0 - t - 0.1, 0.1]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_pair_delta() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let p = PredictionMatrix::new(vec![vec![0.7, 0.2, 0.1], vec![0.5, 0.3, 0.2], vec![0.1, 0.3, 0.6]]).unwrap();
        let est = estimate_delta(&g, &p, 2, 10, 0).unwrap();
        assert!(!est.fallback);
        assert_eq!(est.num_pairs, 1);
        assert_eq!(est.delta, p.similarity(0, 2, MetricKind::CombinedCorrCos));
    }

    #[test]
    fn complete_graph_falls_back() {
        let k4 = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        let err = estimate_delta(&k4, &uniform_preds(4), 2, 10, 0).unwrap_err();
        assert!(matches!(err, GridError::InsufficientStructure(_)));

        // K4 plus an isolated node: no 2-hop pairs, but non-adjacent ones exist
        let g = Graph::from_edges(5, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        let est = estimate_delta(&g, &uniform_preds(5), 2, 10, 0).unwrap();
        assert!(est.fallback);
        assert_eq!(est.num_pairs, 4);
    }

    #[test]
    fn too_small_graph() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let p = PredictionMatrix::new(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        assert!(matches!(
            estimate_delta(&g, &p, 2, 10, 0),
            Err(GridError::InsufficientStructure(_))
        ));
    }

    #[test]
    fn triangle_picks_two_highest_degree() {
        // rows chosen so every edge weight is high and degrees are d0 > d1 > d2
        let p = PredictionMatrix::new(vec![
            vec![0.68, 0.20, 0.12],
            vec![0.70, 0.20, 0.10],
            vec![0.60, 0.20, 0.20],
        ])
        .unwrap();
        let g = Graph::from_edges(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let core = select_core(&g, &p, 0.0);
        assert!(core.degrees[0] > core.degrees[1] && core.degrees[1] > core.degrees[2]);
        // heaviest edge (0,1) adds 0; (0,2) covered by 0; (1,2) adds 1
        assert_eq!(core.members, vec![0, 1]);
        assert!(verify_cover(&g, &core).ok);
    }

    #[test]
    fn low_weight_edge_dropped() {
        let p = PredictionMatrix::new(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let core = select_core(&g, &p, 0.5);
        assert!(core.members.is_empty());
        assert_eq!((core.num_covered, core.num_dropped), (0, 1));
        assert_eq!(core.dropped_edges().count(), 1);
    }

    #[test]
    fn star_picks_center() {
        let g = Graph::from_edges(6, (1..6).map(|i| (0, i))).unwrap();
        let core = select_core(&g, &uniform_preds(6), 0.0);
        assert_eq!(core.members, vec![0]);
    }

    #[test]
    fn degree_tie_goes_to_lower_id() {
        let p = PredictionMatrix::new(vec![vec![0.7, 0.2, 0.1], vec![0.7, 0.2, 0.1]]).unwrap();
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(select_core(&g, &p, 0.0).members, vec![0]);
    }

    #[test]
    fn edge_at_threshold_is_kept() {
        let p = PredictionMatrix::new(vec![vec![0.7, 0.2, 0.1], vec![0.5, 0.3, 0.2]]).unwrap();
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let w = p.similarity(0, 1, MetricKind::CombinedCorrCos);
        assert_eq!(select_core(&g, &p, w).members.len(), 1);
    }

    #[test]
    fn verify_cover_reports_uncovered() {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let p = uniform_preds(3);
        let mut core = select_core(&g, &p, 0.0);
        core.members.clear();
        let check = verify_cover(&g, &core);
        assert!(!check.ok);
        assert_eq!(check.uncovered, vec![(0, 1), (1, 2)]);
        core.members = vec![0, 1, 2];
        assert!(verify_cover(&g, &core).ok);
    }
}
