//! Two-layer GCN used to produce posteriors for synthetic graphs:
//! `softmax(Â · relu(Â · F · W1) · W2)` with `Â` the symmetric-normalised
//! adjacency with self-loops.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::graphio::{Graph, NodeData};
use crate::rng;
use crate::simkit::PredictionMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
}

fn to_nested(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_nested(rows: Vec<Vec<f64>>) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat).map_err(|e| GridError::Validation(format!("ragged weight matrix: {e}")))
}

impl ToyModel {
    /// Glorot-uniform initialisation.
    pub fn init(attr_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        let w1 = glorot(attr_dim, hidden);
        let w2 = glorot(hidden, classes);
        ToyModel { w1, w2 }
    }

    pub fn attr_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        let json = ModelJson {
            w1: to_nested(&self.w1),
            w2: to_nested(&self.w2),
        };
        Ok(serde_json::to_string_pretty(&json)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: ModelJson = serde_json::from_str(text)?;
        let model = ToyModel {
            w1: from_nested(json.w1)?,
            w2: from_nested(json.w2)?,
        };
        if model.w1.ncols() != model.w2.nrows() {
            return Err(GridError::Validation("hidden widths of w1 and w2 differ".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// `Â · x` without materialising `Â`.
fn propagate(graph: &Graph, x: &Array2<f64>) -> Array2<f64> {
    let scale: Vec<f64> = (0..graph.num_nodes())
        .map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt())
        .collect();
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..graph.num_nodes() {
        let mut row = out.row_mut(i);
        row.scaled_add(scale[i] * scale[i], &x.row(i));
        for &j in graph.neighbors(i) {
            row.scaled_add(scale[i] * scale[j], &x.row(j));
        }
    }
    out
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn features(data: &NodeData) -> Array2<f64> {
    let d = data.attr_dim();
    Array2::from_shape_fn((data.len(), d), |(i, k)| data.attributes[i][k])
}

struct Activations {
    agg_x: Array2<f64>,
    pre1: Array2<f64>,
    agg_h: Array2<f64>,
    probs: Array2<f64>,
}

fn forward_pass(model: &ToyModel, graph: &Graph, x: &Array2<f64>) -> Activations {
    let agg_x = propagate(graph, x);
    let pre1 = agg_x.dot(&model.w1);
    let h1 = pre1.mapv(|v| v.max(0.0));
    let agg_h = propagate(graph, &h1);
    let probs = softmax_rows(&agg_h.dot(&model.w2));
    Activations {
        agg_x,
        pre1,
        agg_h,
        probs,
    }
}

fn check_shapes(model: &ToyModel, graph: &Graph, data: &NodeData) -> Result<()> {
    if data.len() != graph.num_nodes() {
        return Err(GridError::Validation(format!(
            "{} node rows for {} graph nodes",
            data.len(),
            graph.num_nodes()
        )));
    }
    if data.attr_dim() != model.attr_dim() {
        return Err(GridError::Validation(format!(
            "attribute dimension {} does not match model input {}",
            data.attr_dim(),
            model.attr_dim()
        )));
    }
    Ok(())
}

/// Posterior probability vectors for every node.
pub fn forward(model: &ToyModel, graph: &Graph, data: &NodeData) -> Result<PredictionMatrix> {
    check_shapes(model, graph, data)?;
    let act = forward_pass(model, graph, &features(data));
    let rows = act.probs.rows().into_iter().map(|r| r.to_vec()).collect();
    PredictionMatrix::new(rows)
}

/// Mean cross-entropy over all nodes and its gradients w.r.t. `w1`, `w2`.
pub fn loss_and_grads(model: &ToyModel, graph: &Graph, data: &NodeData) -> (f64, Array2<f64>, Array2<f64>) {
    let x = features(data);
    let act = forward_pass(model, graph, &x);
    let n = data.len() as f64;
    let loss = -data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| act.probs[[i, y]].ln())
        .sum::<f64>()
        / n;

    let mut dz = act.probs.clone();
    for (i, &y) in data.labels.iter().enumerate() {
        dz[[i, y]] -= 1.0;
    }
    dz /= n;
    let dw2 = act.agg_h.t().dot(&dz);
    // Â is symmetric, so back-propagating through it is another propagate
    let dh1 = propagate(graph, &dz.dot(&model.w2.t()));
    let mut dpre1 = dh1;
    dpre1.zip_mut_with(&act.pre1, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let dw1 = act.agg_x.t().dot(&dpre1);
    (loss, dw1, dw2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 16,
            epochs: 50,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Full-batch gradient descent on cross-entropy over all labelled nodes.
pub fn train(graph: &Graph, data: &NodeData, cfg: &TrainConfig, seed: u64) -> Result<(ToyModel, TrainStats)> {
    let present: std::collections::BTreeSet<_> = data.labels.iter().collect();
    if present.len() < 2 {
        return Err(GridError::Validation("training needs at least 2 classes present".into()));
    }
    let mut model = ToyModel::init(data.attr_dim(), cfg.hidden, data.num_classes, seed);
    check_shapes(&model, graph, data)?;
    let mut loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let (l, dw1, dw2) = loss_and_grads(&model, graph, data);
        if !l.is_finite() {
            return Err(GridError::Diverged(format!(
                "loss became {l} at epoch {epoch}; try a smaller learning rate"
            )));
        }
        loss = l;
        model.w1.scaled_add(-cfg.lr, &dw1);
        model.w2.scaled_add(-cfg.lr, &dw2);
        if model.w1.iter().chain(model.w2.iter()).any(|w| !w.is_finite()) {
            return Err(GridError::Diverged(format!(
                "weights became non-finite at epoch {epoch}; try a smaller learning rate"
            )));
        }
    }
    let (final_loss, _, _) = loss_and_grads(&model, graph, data);
    if !final_loss.is_finite() || (cfg.epochs > 0 && !loss.is_finite()) {
        return Err(GridError::Diverged("non-finite final loss; try a smaller learning rate".into()));
    }
    let preds = forward(&model, graph, data)?;
    let correct = (0..data.len()).filter(|&i| preds.argmax(i) == data.labels[i]).count();
    let stats = TrainStats {
        final_loss,
        train_accuracy: correct as f64 / data.len() as f64,
    };
    Ok((model, stats))
}

/// Row-wise mean of the posterior matrix; handy for summary output.
pub fn mean_posterior(preds: &PredictionMatrix) -> Vec<f64> {
    let rows: Vec<f64> = preds.rows().flatten().copied().collect();
    let m = Array2::from_shape_vec((preds.num_rows(), preds.num_classes()), rows).expect("consistent shape");
    m.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny() -> (Graph, NodeData) {
        let g = Graph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap();
        let attrs = vec![
            vec![1.0, 0.2, -0.3],
            vec![0.9, 0.1, 0.4],
            vec![-0.2, 1.1, 0.0],
            vec![0.1, 0.8, 0.5],
            vec![0.3, -0.4, 1.2],
        ];
        let d = NodeData::new(attrs, vec![0, 0, 1, 1, 2], 3).unwrap();
        (g, d)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let (g, d) = tiny();
        let model = ToyModel::init(3, 4, 3, 7);
        let (_, dw1, dw2) = loss_and_grads(&model, &g, &d);
        let h = 1e-6;
        for (which, grad) in [(1, &dw1), (2, &dw2)] {
            let shape = grad.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let (wp, wm) = if which == 1 {
                        (&mut plus.w1, &mut minus.w1)
                    } else {
                        (&mut plus.w2, &mut minus.w2)
                    };
                    wp[[r, c]] += h;
                    wm[[r, c]] -= h;
                    let fd = (loss_and_grads(&plus, &g, &d).0 - loss_and_grads(&minus, &g, &d).0) / (2.0 * h);
                    assert_abs_diff_eq!(grad[[r, c]], fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn edgeless_graph_uses_own_features_only() {
        let g = Graph::from_edges(3, []).unwrap();
        let d = NodeData::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], vec![0, 1, 0], 2).unwrap();
        let eye = Array2::eye(2);
        let model = ToyModel { w1: eye.clone(), w2: eye };
        let p = forward(&model, &g, &d).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.row(0)[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p.row(1)[1], e / (e + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (g, d) = tiny();
        let model = ToyModel::init(4, 4, 3, 0);
        assert!(matches!(forward(&model, &g, &d), Err(GridError::Validation(_))));
    }

    #[test]
    fn zero_epochs_still_valid() {
        let (g, d) = tiny();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (model, _) = train(&g, &d, &cfg, 1).unwrap();
        assert_eq!(model, ToyModel::init(3, 16, 3, 1));
    }

    #[test]
    fn huge_lr_diverges() {
        let (g, d) = tiny();
        let cfg = TrainConfig { epochs: 200, lr: 1e300, hidden: 4 };
        assert!(matches!(train(&g, &d, &cfg, 1), Err(GridError::Diverged(_))));
    }

    #[test]
    fn json_round_trip() {
        let m = ToyModel::init(3, 2, 2, 5);
        assert_eq!(ToyModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn single_class_rejected() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let d = NodeData::new(vec![vec![1.0], vec![1.0]], vec![0, 0], 2).unwrap();
        assert!(train(&g, &d, &TrainConfig::default(), 0).is_err());
    }
}
