//! Similarity-based link-stealing attacks and their scoring.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::graphio::{Graph, HopIndex, NodeData};
use crate::rng;
use crate::simkit::{similarity, MetricKind, PredictionMatrix};

/// Decision threshold on attack confidence.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Attack-0: similarity scores, 2-means hard labels.
    Unsupervised,
    /// Attack-1 style: classifier trained on a shadow graph.
    Supervised,
    /// Supervised attack whose training labels mark every pair within `n`
    /// hops as linked.
    Adaptive,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Unsupervised, AttackKind::Supervised, AttackKind::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Unsupervised => "unsupervised",
            AttackKind::Supervised => "supervised",
            AttackKind::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" | "attack0" => Ok(AttackKind::Unsupervised),
            "supervised" | "attack1" => Ok(AttackKind::Supervised),
            "adaptive" => Ok(AttackKind::Adaptive),
            other => Err(GridError::Validation(format!("unknown attack {other:?}"))),
        }
    }
}

/// Node pair with its ground truth; `u < v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledPair {
    pub u: usize,
    pub v: usize,
    pub linked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pair: LabeledPair,
    pub features: Vec<f64>,
}

impl PairSample {
    pub fn linked(&self) -> bool {
        self.pair.linked
    }
}

/// Balanced seeded sample: `num_pos` edges and `num_neg` distinct
/// non-adjacent pairs, positives first.
pub fn sample_pairs(graph: &Graph, num_pos: usize, num_neg: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    if graph.num_edges() < num_pos {
        return Err(GridError::Validation(format!(
            "asked for {num_pos} linked pairs but the graph has {} edges",
            graph.num_edges()
        )));
    }
    let n = graph.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    if total_pairs - graph.num_edges() < num_neg {
        return Err(GridError::Validation(format!(
            "asked for {num_neg} unlinked pairs but only {} exist",
            total_pairs - graph.num_edges()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut pairs: Vec<LabeledPair> = index::sample(&mut rng, graph.num_edges(), num_pos)
        .into_iter()
        .map(|ix| {
            let (u, v) = graph.edges()[ix];
            LabeledPair { u, v, linked: true }
        })
        .collect();
    pairs.sort();

    let mut negatives = Vec::with_capacity(num_neg);
    let dense = num_neg * 2 > total_pairs - graph.num_edges();
    if dense {
        let pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !graph.has_edge(i, j))
            .collect();
        negatives.extend(index::sample(&mut rng, pool.len(), num_neg).into_iter().map(|ix| pool[ix]));
    } else {
        let mut seen = HashSet::new();
        while negatives.len() < num_neg {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let (u, v) = (i.min(j), i.max(j));
            if u != v && !graph.has_edge(u, v) && seen.insert((u, v)) {
                negatives.push((u, v));
            }
        }
    }
    negatives.sort_unstable();
    pairs.extend(negatives.into_iter().map(|(u, v)| LabeledPair { u, v, linked: false }));
    Ok(pairs)
}

fn metric_features(x: &[f64], y: &[f64], out: &mut Vec<f64>) {
    out.extend(MetricKind::ALL.iter().map(|&k| similarity(x, y, k)));
}

/// Features of one pair: the six metrics over the posteriors, followed by
/// the same six over the attributes when `data` is given. All metrics are
/// symmetric, so the feature vector does not depend on pair order.
pub fn pair_features(preds: &PredictionMatrix, data: Option<&NodeData>, u: usize, v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(12);
    metric_features(preds.row(u), preds.row(v), &mut out);
    if let Some(d) = data {
        metric_features(&d.attributes[u], &d.attributes[v], &mut out);
    }
    out
}

pub fn featurize(pairs: &[LabeledPair], preds: &PredictionMatrix, data: Option<&NodeData>) -> Vec<PairSample> {
    pairs
        .iter()
        .map(|&pair| PairSample {
            pair,
            features: pair_features(preds, data, pair.u, pair.v),
        })
        .collect()
}

pub fn build_pair_dataset(
    graph: &Graph,
    preds: &PredictionMatrix,
    data: &NodeData,
    num_pos: usize,
    num_neg: usize,
    seed: u64,
    with_attributes: bool,
) -> Result<Vec<PairSample>> {
    let pairs = sample_pairs(graph, num_pos, num_neg, seed)?;
    Ok(featurize(&pairs, preds, with_attributes.then_some(data)))
}

/// Rank-based AUC (Mann-Whitney), ties counted as one half. `None` if only
/// one class is present.
pub fn auc(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[k]] {
            end += 1;
        }
        // ranks are 1-based; tied block shares the average rank
        let avg_rank = (k + end) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[k..=end].iter().filter(|&&i| truths[i]).count() as f64;
        k = end + 1;
    }
    let pos_f = pos as f64;
    Some((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Accuracy, precision and recall of hard predictions. Precision is 0 when
/// nothing is predicted linked; recall is 0 when nothing is truly linked.
pub fn confusion(predicted: &[bool], truths: &[bool]) -> Confusion {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in predicted.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        if p == t {
            correct += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Confusion {
        accuracy: ratio(correct, predicted.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_kind: AttackKind,
    pub n_pairs: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    pub threshold: f64,
    #[serde(skip)]
    pub pairs: Vec<LabeledPair>,
    #[serde(skip)]
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub predicted: Vec<bool>,
}

impl AttackReport {
    fn from_scores(
        kind: AttackKind,
        pairs: Vec<LabeledPair>,
        scores: Vec<f64>,
        predicted: Option<Vec<bool>>,
        threshold: f64,
    ) -> Self {
        let truths: Vec<bool> = pairs.iter().map(|p| p.linked).collect();
        let auc = auc(&scores, &truths);
        let conf = predicted.as_ref().map(|p| confusion(p, &truths));
        AttackReport {
            attack_kind: kind,
            n_pairs: pairs.len(),
            accuracy: conf.map(|c| c.accuracy),
            precision: conf.map(|c| c.precision),
            recall: conf.map(|c| c.recall),
            auc,
            threshold,
            pairs,
            scores,
            predicted: predicted.unwrap_or_default(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Per-pair scores as CSV `u,v,linked,score,predicted`.
    pub fn write_scores_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["u", "v", "linked", "score", "predicted"])?;
        for (k, p) in self.pairs.iter().enumerate() {
            let predicted = self.predicted.get(k).map_or(String::new(), |b| u8::from(*b).to_string());
            w.write_record([
                p.u.to_string(),
                p.v.to_string(),
                u8::from(p.linked).to_string(),
                self.scores[k].to_string(),
                predicted,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Two-means clustering of scalar values, seeded at the 25th and 75th
/// percentiles. Returns the cluster centres (low, high) and per-value
/// membership in the high cluster, or `None` when all values coincide.
pub fn kmeans_1d(values: &[f64], iterations: usize) -> Option<(f64, f64, Vec<bool>)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (first, last) = (*sorted.first()?, *sorted.last()?);
    if first == last {
        return None;
    }
    let pct = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let (mut low, mut high) = (pct(0.25), pct(0.75));
    if low == high {
        low = first;
        high = last;
    }
    let mut in_high = vec![false; values.len()];
    for _ in 0..iterations {
        for (flag, &x) in in_high.iter_mut().zip(values) {
            *flag = (x - high).abs() < (x - low).abs();
        }
        let centre = |want: bool| {
            let (sum, count) = values
                .iter()
                .zip(&in_high)
                .filter(|(_, &f)| f == want)
                .fold((0.0, 0usize), |(s, c), (&x, _)| (s + x, c + 1));
            (count > 0).then(|| sum / count as f64)
        };
        let (new_low, new_high) = (centre(false).unwrap_or(low), centre(true).unwrap_or(high));
        if new_low == low && new_high == high {
            break;
        }
        low = new_low;
        high = new_high;
    }
    Some((low, high, in_high))
}

pub const KMEANS_ITERATIONS: usize = 50;

/// Attack-0: score each pair by the combined similarity of its posteriors.
/// Hard labels come from 2-means on the distance `2 - similarity`; the
/// lower-distance cluster is predicted linked.
pub fn attack0_scores(preds: &PredictionMatrix, pairs: &[LabeledPair]) -> Result<AttackReport> {
    if pairs.len() < 2 {
        return Err(GridError::Validation("attack needs at least 2 pairs".into()));
    }
    let scores: Vec<f64> = pairs
        .iter()
        .map(|p| preds.similarity(p.u, p.v, MetricKind::CombinedCorrCos))
        .collect();
    let distances: Vec<f64> = scores.iter().map(|s| 2.0 - s).collect();
    let (predicted, threshold) = match kmeans_1d(&distances, KMEANS_ITERATIONS) {
        Some((low, high, in_high)) => {
            let linked = in_high.into_iter().map(|h| !h).collect();
            // boundary expressed back in similarity units
            (Some(linked), 2.0 - (low + high) / 2.0)
        }
        None => {
            log::warn!("all pair similarities are identical; clustering is degenerate");
            (None, scores[0])
        }
    };
    Ok(AttackReport::from_scores(
        AttackKind::Unsupervised,
        pairs.to_vec(),
        scores,
        predicted,
        threshold,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        AttackTrainConfig {
            hidden: 32,
            epochs: 300,
            lr: 0.01,
        }
    }
}

/// One-hidden-layer classifier over z-normalised pair features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub kind: AttackKind,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `hidden x inputs`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grads[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grads[k] * grads[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl AttackModel {
    fn inputs(&self) -> usize {
        self.feature_mean.len()
    }

    fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn normalise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn hidden_pre(&self, z: &[f64]) -> Vec<f64> {
        let d = self.inputs();
        (0..self.hidden())
            .map(|h| self.b1[h] + (0..d).map(|k| self.w1[h * d + k] * z[k]).sum::<f64>())
            .collect()
    }

    /// Link confidence in `[0, 1]`.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let z = self.normalise(features);
        let pre = self.hidden_pre(&z);
        let logit = self.b2 + pre.iter().zip(&self.w2).map(|(p, w)| p.max(0.0) * w).sum::<f64>();
        sigmoid(logit)
    }
}

/// Trains the shadow classifier with full-batch Adam on binary
/// cross-entropy.
pub fn train_supervised(
    train_pairs: &[PairSample],
    kind: AttackKind,
    cfg: &AttackTrainConfig,
    seed: u64,
) -> Result<AttackModel> {
    let pos = train_pairs.iter().filter(|p| p.linked()).count();
    if pos == 0 || pos == train_pairs.len() {
        return Err(GridError::Validation("attack training needs both linked and unlinked pairs".into()));
    }
    let d = train_pairs[0].features.len();
    let n = train_pairs.len() as f64;
    let mut mean = vec![0.0; d];
    for p in train_pairs {
        for (m, x) in mean.iter_mut().zip(&p.features) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; d];
    for p in train_pairs {
        for k in 0..d {
            std[k] += (p.features[k] - mean[k]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();

    let hidden = cfg.hidden;
    let mut rng = rng::seeded(seed);
    let lim1 = (6.0 / (d + hidden) as f64).sqrt();
    let lim2 = (6.0 / (hidden + 1) as f64).sqrt();
    let mut model = AttackModel {
        kind,
        feature_mean: mean,
        feature_std: std,
        w1: (0..hidden * d).map(|_| rng.random_range(-lim1..lim1)).collect(),
        b1: vec![0.0; hidden],
        w2: (0..hidden).map(|_| rng.random_range(-lim2..lim2)).collect(),
        b2: 0.0,
    };
    let inputs: Vec<Vec<f64>> = train_pairs.iter().map(|p| model.normalise(&p.features)).collect();
    let targets: Vec<f64> = train_pairs.iter().map(|p| f64::from(u8::from(p.linked()))).collect();

    let n_params = hidden * d + hidden + hidden + 1;
    let mut adam = Adam::new(n_params);
    for epoch in 0..cfg.epochs {
        let mut grads = vec![0.0; n_params];
        let mut loss = 0.0;
        for (z, &t) in inputs.iter().zip(&targets) {
            let pre = model.hidden_pre(z);
            let logit = model.b2 + pre.iter().zip(&model.w2).map(|(p, w)| p.max(0.0) * w).sum::<f64>();
            let p = sigmoid(logit);
            loss -= t * p.max(1e-15).ln() + (1.0 - t) * (1.0 - p).max(1e-15).ln();
            let dlogit = (p - t) / n;
            let (gw1, rest) = grads.split_at_mut(hidden * d);
            let (gb1, rest) = rest.split_at_mut(hidden);
            let (gw2, gb2) = rest.split_at_mut(hidden);
            gb2[0] += dlogit;
            for h in 0..hidden {
                let a = pre[h].max(0.0);
                gw2[h] += dlogit * a;
                if pre[h] > 0.0 {
                    let dh = dlogit * model.w2[h];
                    gb1[h] += dh;
                    for k in 0..d {
                        gw1[h * d + k] += dh * z[k];
                    }
                }
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(GridError::Diverged(format!("attack training diverged at epoch {epoch}")));
        }
        let mut params: Vec<f64> = model
            .w1
            .iter()
            .chain(&model.b1)
            .chain(&model.w2)
            .copied()
            .chain(std::iter::once(model.b2))
            .collect();
        adam.step(&mut params, &grads, cfg.lr);
        let (w1, rest) = params.split_at(hidden * d);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(hidden);
        model.w1.copy_from_slice(w1);
        model.b1.copy_from_slice(b1);
        model.w2.copy_from_slice(w2);
        model.b2 = b2[0];
    }
    Ok(model)
}

/// Scores pairs with a trained model; hard labels at confidence 0.5.
pub fn evaluate_attack(model: &AttackModel, test_pairs: &[PairSample]) -> AttackReport {
    let scores: Vec<f64> = test_pairs.iter().map(|p| model.predict(&p.features)).collect();
    let predicted = scores.iter().map(|&s| s > DECISION_THRESHOLD).collect();
    AttackReport::from_scores(
        model.kind,
        test_pairs.iter().map(|p| p.pair).collect(),
        scores,
        Some(predicted),
        DECISION_THRESHOLD,
    )
}

/// Rewrites training labels so every pair within `n` hops counts as linked.
pub fn adaptive_relabel(graph: &Graph, n: usize, pairs: &[PairSample]) -> Vec<PairSample> {
    let index = HopIndex::build(graph, n.max(1));
    pairs
        .iter()
        .map(|p| {
            let mut out = p.clone();
            let within = index.distance(p.pair.u, p.pair.v).is_some_and(|d| d >= 1 && d <= n);
            out.pair.linked = p.pair.linked || within;
            out
        })
        .collect()
}
