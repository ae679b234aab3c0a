//! Per-node noise crafting.
//!
//! For every core node `i` we minimise the similarity gap
//!
//! ```text
//! D_i(s) = sum_{j in P_i} sim(v_i + s, v_j) - (|P_i| / |Q_i|) sum_{k in Q_i} sim(v_i + s, v_k)
//! ```
//!
//! where `P_i` are the direct neighbours and `Q_i` a sample of nodes exactly
//! `n` hops away, subject to
//!
//! * label preservation: `argmax(v + s) = argmax(v)`,
//! * simplex validity: `sum(s) = 0` and `0 <= v + s <= 1`,
//! * distortion budget: `||s|| <= theta`.
//!
//! The solver is Lagrangian gradient descent with projected iterates and
//! subgradient multiplier updates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coresel::CoreSet;
use crate::error::{GridError, Result};
use crate::graphio::{self, Graph, HopIndex};
use crate::simkit::{self, strict_argmax, MetricKind, PredictionMatrix};

/// Minimum gap kept between the protected class and every other class after
/// label repair, so the argmax is never decided by a tie.
pub const LABEL_MARGIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetNorm {
    #[default]
    L1,
    L2,
}

impl BudgetNorm {
    pub fn norm(self, s: &[f64]) -> f64 {
        match self {
            BudgetNorm::L1 => s.iter().map(|x| x.abs()).sum(),
            BudgetNorm::L2 => s.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// A subgradient of the norm at `s`; zero at the origin.
    pub fn subgradient(self, s: &[f64]) -> Vec<f64> {
        match self {
            BudgetNorm::L1 => s
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .collect(),
            BudgetNorm::L2 => {
                let n = self.norm(s);
                if n == 0.0 {
                    vec![0.0; s.len()]
                } else {
                    s.iter().map(|x| x / n).collect()
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Distortion budget.
    pub theta: f64,
    pub learning_rate: f64,
    pub multiplier_step: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    /// Hop distance of the disguise targets.
    pub n: usize,
    /// Cap on the per-node sample of `n`-hop targets.
    pub max_q: usize,
    /// Cap on the pair sample used to estimate the threshold.
    pub max_pairs: usize,
    pub budget_norm: BudgetNorm,
    /// Extra descents, from the extreme points of the budget set with the
    /// smallest gap; 0 runs the single descent from zero noise.
    pub extra_starts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            theta: 0.4,
            learning_rate: 0.05,
            multiplier_step: 0.1,
            tolerance: 1e-5,
            max_iters: 200,
            n: 3,
            max_q: 32,
            max_pairs: 1000,
            budget_norm: BudgetNorm::L1,
            extra_starts: 1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GridError::Validation(m));
        if !(self.theta >= 0.0) {
            return bad(format!("theta must be >= 0, got {}", self.theta));
        }
        if !(self.learning_rate > 0.0) || !(self.multiplier_step > 0.0) {
            return bad("learning_rate and multiplier_step must be > 0".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if self.n < 2 {
            return bad(format!("n must be >= 2, got {}", self.n));
        }
        Ok(())
    }
}

/// Similarity gap of one node as a function of its noise vector.
#[derive(Clone, Debug)]
pub struct GapObjective {
    pub v: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Mean similarity used in place of the target sum when `targets` is
    /// empty.
    pub fallback_target: f64,
}

impl GapObjective {
    pub fn new(v: Vec<f64>, neighbors: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, fallback_target: f64) -> Self {
        GapObjective {
            v,
            neighbors,
            targets,
            fallback_target,
        }
    }

    fn target_weight(&self) -> f64 {
        if self.targets.is_empty() {
            0.0
        } else {
            self.neighbors.len() as f64 / self.targets.len() as f64
        }
    }

    /// Gap value and its gradient with respect to `s`.
    pub fn evaluate(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let x: Vec<f64> = self.v.iter().zip(s).map(|(a, b)| a + b).collect();
        let kind = MetricKind::CombinedCorrCos;
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        let mut accumulate = |rows: &[Vec<f64>], weight: f64| {
            for y in rows {
                let (sim, g) = simkit::similarity_with_grad(&x, y, kind).expect("combined metric has a gradient");
                value += weight * sim;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += weight * gi;
                }
            }
        };
        accumulate(&self.neighbors, 1.0);
        if self.targets.is_empty() {
            value -= self.neighbors.len() as f64 * self.fallback_target;
        } else {
            accumulate(&self.targets, -self.target_weight());
        }
        (value, grad)
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        self.evaluate(s).0
    }
}

/// Projects `s` back onto the feasible set of `v`.
///
/// 1. Simplex: shift `s` by a constant and clip each entry into
///    `[-v_a, 1 - v_a]`. The shift is the plain mean when no clipping is
///    needed, otherwise the constant that keeps the clipped sum at zero.
/// 2. Budget: rescale to `theta` if `||s|| > theta`.
/// 3. Label: for every class that reaches the protected class, move half
///    the excess (plus a tiny margin) onto the protected class.
///
/// A final shrink toward zero repairs the rare case where step 3 pushes an
/// entry past a bound.
pub fn constraint_check(s: &[f64], v: &[f64], theta: f64, norm: BudgetNorm) -> Vec<f64> {
    assert_eq!(s.len(), v.len(), "noise/prediction length mismatch");
    let top = strict_argmax(v).expect("prediction row must have a strict argmax");
    let mut s = project_simplex_box(s, v);

    let current = norm.norm(&s);
    if current > theta {
        let scale = if current > 0.0 { theta / current } else { 0.0 };
        s.iter_mut().for_each(|x| *x *= scale);
    }

    let margin = label_margin(v, top);
    for _pass in 0..v.len() {
        let mut changed = false;
        for a in 0..v.len() {
            if a == top {
                continue;
            }
            let gap = (v[top] + s[top]) - (v[a] + s[a]);
            if gap < margin {
                let delta = (margin - gap) / 2.0;
                s[a] -= delta;
                s[top] += delta;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    if !is_feasible(&s, v, theta, norm, top) {
        shrink_to_feasible(&mut s, v, theta, norm, top);
    }
    s
}

fn label_margin(v: &[f64], top: usize) -> f64 {
    let second = v
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != top)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    LABEL_MARGIN.min((v[top] - second) / 2.0)
}

fn clip(x: f64, v: f64) -> f64 {
    x.max(-v).min(1.0 - v)
}

fn project_simplex_box(s: &[f64], v: &[f64]) -> Vec<f64> {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let shifted: Vec<f64> = s.iter().map(|x| x - mean).collect();
    if shifted.iter().zip(v).all(|(&x, &va)| x >= -va && x <= 1.0 - va) {
        return shifted;
    }
    // clipped sum is non-increasing in the shift; bracket and bisect
    let clipped_sum = |tau: f64| s.iter().zip(v).map(|(&x, &va)| clip(x - tau, va)).sum::<f64>();
    let mut lo = s.iter().zip(v).map(|(&x, &va)| x - (1.0 - va)).fold(f64::INFINITY, f64::min);
    let mut hi = s.iter().zip(v).map(|(&x, &va)| x + va).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clipped_sum(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut out: Vec<f64> = s.iter().zip(v).map(|(&x, &va)| clip(x - tau, va)).collect();
    // spread the residual over coordinates strictly inside their box
    let residual: f64 = out.iter().sum();
    if residual != 0.0 {
        let free: Vec<usize> = (0..out.len())
            .filter(|&a| out[a] > -v[a] && out[a] < 1.0 - v[a])
            .collect();
        if !free.is_empty() {
            let share = residual / free.len() as f64;
            for a in free {
                out[a] = clip(out[a] - share, v[a]);
            }
        }
    }
    out
}

fn is_feasible(s: &[f64], v: &[f64], theta: f64, norm: BudgetNorm, top: usize) -> bool {
    let in_box = s.iter().zip(v).all(|(&x, &va)| {
        let u = va + x;
        (0.0..=1.0).contains(&u)
    });
    let label = (0..v.len()).all(|a| a == top || v[top] + s[top] > v[a] + s[a]);
    in_box && label && norm.norm(s) <= theta && s.iter().sum::<f64>().abs() <= 1e-9
}

/// Scales `s` toward zero until it is feasible. `s = 0` is always feasible
/// for a row with a strict argmax, and every constraint is convex along the
/// segment, so bisection finds the largest feasible scale.
fn shrink_to_feasible(s: &mut [f64], v: &[f64], theta: f64, norm: BudgetNorm, top: usize) {
    let scaled = |c: f64| s.iter().map(|x| x * c).collect::<Vec<_>>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if is_feasible(&scaled(mid), v, theta, norm, top) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = scaled(lo);
    s.copy_from_slice(&out);
}

/// Primal residuals of a noise vector; all zero (or negative, for the
/// inequality constraints) when feasible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_a (v_a + s_a) - (v_top + s_top)` over `a != top`; negative when
    /// the label is preserved.
    pub label: f64,
    /// `|sum(s)|`.
    pub simplex_sum: f64,
    /// Largest distance of any `v + s` entry outside `[0, 1]`.
    pub simplex_box: f64,
    /// `||s|| - theta`.
    pub budget: f64,
}

impl Residuals {
    pub fn of(s: &[f64], v: &[f64], theta: f64, norm: BudgetNorm) -> Self {
        let top = simkit::argmax(v);
        let u: Vec<f64> = v.iter().zip(s).map(|(a, b)| a + b).collect();
        let label = (0..u.len())
            .filter(|&a| a != top)
            .map(|a| u[a] - u[top])
            .fold(f64::NEG_INFINITY, f64::max);
        let simplex_box = u
            .iter()
            .map(|&x| (-x).max(x - 1.0).max(0.0))
            .fold(0.0, f64::max);
        Residuals {
            label,
            simplex_sum: s.iter().sum::<f64>().abs(),
            simplex_box,
            budget: norm.norm(s) - theta,
        }
    }

    pub fn satisfied(&self) -> bool {
        self.label < 0.0 && self.simplex_sum <= 1e-6 && self.simplex_box == 0.0 && self.budget <= 1e-9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub residuals: Residuals,
    /// Per-class label multipliers (the protected class entry stays 0).
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub nu: f64,
    /// Start the returned iterate descends from: 0 is zero noise, `k > 0`
    /// the `k`-th best vertex start.
    pub start: usize,
    /// Set when the solve was abandoned and zero noise returned.
    pub aborted: Option<String>,
}

/// One descent from a fixed start.
struct Descent {
    best_gap: f64,
    best: Vec<f64>,
    iterations: usize,
    converged: bool,
    lambda: Vec<f64>,
    mu: f64,
    nu: f64,
}

/// Lagrangian gradient descent from `start`.
///
/// Each iteration steps along `grad D + sum_a lambda_a C_a + mu 1 + nu dnorm`,
/// projects with [`constraint_check`], then updates the multipliers:
/// `lambda_a <- max(0, lambda_a + beta (u_a - u_top))`,
/// `nu <- max(0, nu + beta (||s|| - theta))`, `mu <- mu + beta sum(s)`.
/// The residuals are taken at the raw gradient step, before projection, so
/// the multipliers track how hard the objective pushes against each
/// constraint. Stops when both the iterate (L2) and the multipliers move
/// less than `tolerance`, or after `max_iters` steps. `Err` carries the
/// reason when a non-finite value shows up.
fn descend(obj: &GapObjective, v: &[f64], top: usize, start: Vec<f64>, cfg: &SolverConfig) -> std::result::Result<Descent, String> {
    let dim = v.len();
    let beta = cfg.multiplier_step;
    let mut s = start;
    let mut lambda = vec![0.0; dim];
    let (mut mu, mut nu) = (0.0, 0.0);
    let mut best = (f64::INFINITY, s.clone());
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        let (gap, grad_d) = obj.evaluate(&s);
        if !gap.is_finite() {
            return Err(format!("non-finite gap after {iterations} iterations"));
        }
        if gap < best.0 {
            best = (gap, s.clone());
        }
        let subgrad = cfg.budget_norm.subgradient(&s);
        let label_sum: f64 = lambda.iter().sum();
        let grad: Vec<f64> = (0..dim)
            .map(|a| {
                let label_term = if a == top { -label_sum } else { lambda[a] };
                grad_d[a] + label_term + mu + nu * subgrad[a]
            })
            .collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(format!("non-finite gradient after {iterations} iterations"));
        }

        let stepped: Vec<f64> = s.iter().zip(&grad).map(|(x, g)| x - cfg.learning_rate * g).collect();
        let next = constraint_check(&stepped, v, cfg.theta, cfg.budget_norm);
        iterations += 1;

        let before = (lambda.clone(), mu, nu);
        // residuals of the raw step; after the projection they are never positive
        for a in 0..dim {
            if a != top {
                lambda[a] = (lambda[a] + beta * ((v[a] + stepped[a]) - (v[top] + stepped[top]))).max(0.0);
            }
        }
        nu = (nu + beta * (cfg.budget_norm.norm(&stepped) - cfg.theta)).max(0.0);
        mu += beta * stepped.iter().sum::<f64>();

        let moved = s.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dual_moved = before.0.iter().zip(&lambda).map(|(a, b)| (a - b).abs()).sum::<f64>()
            + (before.1 - mu).abs()
            + (before.2 - nu).abs();
        s = next;
        if moved < cfg.tolerance && dual_moved < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let last_gap = obj.value(&s);
    if last_gap < best.0 {
        best = (last_gap, s);
    }
    Ok(Descent {
        best_gap: best.0,
        best: best.1,
        iterations,
        converged,
        lambda,
        mu,
        nu,
    })
}

/// Extreme points of the budget set, `theta / 2 (e_a - e_b)` for every
/// ordered class pair, made feasible with [`constraint_check`].
fn vertex_starts(v: &[f64], cfg: &SolverConfig) -> Vec<Vec<f64>> {
    let dim = v.len();
    let half = match cfg.budget_norm {
        BudgetNorm::L1 => cfg.theta / 2.0,
        BudgetNorm::L2 => cfg.theta / std::f64::consts::SQRT_2,
    };
    let mut starts = Vec::with_capacity(dim * (dim - 1));
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                let mut s = vec![0.0; dim];
                s[a] = half;
                s[b] = -half;
                starts.push(constraint_check(&s, v, cfg.theta, cfg.budget_norm));
            }
        }
    }
    starts
}

/// Minimises the gap of one node under the noise constraints.
///
/// Runs [`descend`] from zero noise and from the `extra_starts` entries of
/// [`vertex_starts`] with the smallest gap; the gap is nonconvex and a single
/// descent can stall in a poor basin. The feasible iterate with the smallest gap over all runs
/// is returned, so the gap never ends above its noiseless value. A run that
/// hits a non-finite value is discarded; if the run from zero does, zero
/// noise is returned with the reason in the diagnostics.
pub fn solve_node(obj: &GapObjective, v: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, NodeDiagnostics)> {
    let top = strict_argmax(v).ok_or_else(|| GridError::TiedArgmax(Vec::new()))?;
    let dim = v.len();
    let zero = vec![0.0; dim];
    let initial_gap = obj.value(&zero);
    let abort = |reason: String, iterations: usize| {
        let diagnostics = NodeDiagnostics {
            iterations,
            converged: false,
            initial_gap,
            final_gap: initial_gap,
            residuals: Residuals::of(&zero, v, cfg.theta, cfg.budget_norm),
            lambda: vec![0.0; dim],
            mu: 0.0,
            nu: 0.0,
            start: 0,
            aborted: Some(reason),
        };
        Ok((zero.clone(), diagnostics))
    };
    if !initial_gap.is_finite() {
        return abort("non-finite gap at s = 0".into(), 0);
    }

    let mut winner = match descend(obj, v, top, zero.clone(), cfg) {
        Ok(run) => (0, run),
        Err(reason) => return abort(reason, 0),
    };
    if cfg.extra_starts > 0 && cfg.theta > 0.0 {
        let mut starts: Vec<(f64, Vec<f64>)> = vertex_starts(v, cfg).into_iter().map(|s| (obj.value(&s), s)).collect();
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (k, (_, start)) in starts.into_iter().take(cfg.extra_starts).enumerate() {
            if let Ok(run) = descend(obj, v, top, start, cfg) {
                if run.best_gap < winner.1.best_gap {
                    winner = (k + 1, run);
                }
            }
        }
    }
    let (start, run) = winner;
    let diagnostics = NodeDiagnostics {
        iterations: run.iterations,
        converged: run.converged,
        initial_gap,
        final_gap: run.best_gap,
        residuals: Residuals::of(&run.best, v, cfg.theta, cfg.budget_norm),
        lambda: run.lambda,
        mu: run.mu,
        nu: run.nu,
        start,
        aborted: None,
    };
    Ok((run.best, diagnostics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeNoise {
    pub node: usize,
    pub noise: Vec<f64>,
    pub diagnostics: NodeDiagnostics,
}

/// Noise vectors for the core nodes; every other node gets zero noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub theta: f64,
    pub budget_norm: BudgetNorm,
    /// Sorted by node id.
    pub entries: Vec<NodeNoise>,
}

impl NoisePlan {
    pub fn zero(num_nodes: usize, num_classes: usize, cfg: &SolverConfig) -> Self {
        NoisePlan {
            num_nodes,
            num_classes,
            theta: cfg.theta,
            budget_norm: cfg.budget_norm,
            entries: Vec::new(),
        }
    }

    pub fn noise_for(&self, node: usize) -> Option<&[f64]> {
        self.entries
            .binary_search_by_key(&node, |e| e.node)
            .ok()
            .map(|ix| self.entries[ix].noise.as_slice())
    }

    /// Nodes whose noise violates a constraint.
    pub fn violations(&self, preds: &PredictionMatrix) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| {
                let v = preds.row(e.node);
                let r = Residuals::of(&e.noise, v, self.theta, self.budget_norm);
                !r.satisfied() || strict_argmax(v) != strict_argmax(&add(v, &e.noise))
            })
            .map(|e| e.node)
            .collect()
    }

    /// CSV `node_id,s0,...` (core nodes only) plus JSON diagnostics.
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header = vec!["node_id".to_string()];
        header.extend((0..self.num_classes).map(|a| format!("s{a}")));
        w.write_record(&header)?;
        for e in &self.entries {
            let mut rec = vec![e.node.to_string()];
            rec.extend(e.noise.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        #[derive(Serialize)]
        struct Diag<'a> {
            node: usize,
            #[serde(flatten)]
            diagnostics: &'a NodeDiagnostics,
        }
        let diags: Vec<Diag> = self
            .entries
            .iter()
            .map(|e| Diag {
                node: e.node,
                diagnostics: &e.diagnostics,
            })
            .collect();
        std::fs::write(json_path, serde_json::to_string_pretty(&diags)? + "\n")?;
        Ok(())
    }
}

fn add(v: &[f64], s: &[f64]) -> Vec<f64> {
    v.iter().zip(s).map(|(a, b)| a + b).collect()
}

/// Builds the gap objective of node `i` against the original posteriors.
pub fn gap_objective_for(
    index: &HopIndex,
    graph: &Graph,
    preds: &PredictionMatrix,
    i: usize,
    cfg: &SolverConfig,
    fallback_target: f64,
) -> GapObjective {
    let (p, q) = graphio::adjacent_and_nhop_sets(index, graph, i, cfg.n, cfg.max_q, cfg.seed);
    let rows = |ids: &[usize]| ids.iter().map(|&j| preds.row(j).to_vec()).collect();
    GapObjective::new(preds.row(i).to_vec(), rows(&p), rows(&q), fallback_target)
}

/// Solves every core node independently against the original posteriors.
/// Runs on the ambient rayon pool when the `parallel` feature is on; the
/// result does not depend on the number of workers.
pub fn craft_plan(graph: &Graph, preds: &PredictionMatrix, core: &CoreSet, cfg: &SolverConfig) -> Result<NoisePlan> {
    cfg.validate()?;
    if preds.num_rows() != graph.num_nodes() {
        return Err(GridError::Validation(format!(
            "{} prediction rows for {} nodes",
            preds.num_rows(),
            graph.num_nodes()
        )));
    }
    let tied: Vec<usize> = core
        .members
        .iter()
        .copied()
        .filter(|&i| strict_argmax(preds.row(i)).is_none())
        .collect();
    if !tied.is_empty() {
        return Err(GridError::TiedArgmax(tied));
    }
    let mut plan = NoisePlan::zero(graph.num_nodes(), preds.num_classes(), cfg);
    if core.members.is_empty() {
        return Ok(plan);
    }
    let index = HopIndex::build(graph, cfg.n);
    let solve = |&i: &usize| -> Result<NodeNoise> {
        let obj = gap_objective_for(&index, graph, preds, i, cfg, core.delta);
        let (noise, diagnostics) = solve_node(&obj, preds.row(i), cfg)?;
        if let Some(reason) = &diagnostics.aborted {
            log::warn!("node {i}: solve aborted ({reason}); using zero noise");
        }
        Ok(NodeNoise {
            node: i,
            noise,
            diagnostics,
        })
    };
    #[cfg(feature = "parallel")]
    let entries: Result<Vec<NodeNoise>> = {
        use rayon::prelude::*;
        core.members.par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let entries: Result<Vec<NodeNoise>> = core.members.iter().map(solve).collect();
    plan.entries = entries?;
    Ok(plan)
}

/// Adds the plan to the predictions row-wise. Entries are clamped into
/// `[0, 1]` to absorb last-ulp rounding; any real violation is reported as
/// an internal error.
pub fn apply_plan(preds: &PredictionMatrix, plan: &NoisePlan) -> Result<PredictionMatrix> {
    if plan.num_nodes != preds.num_rows() || plan.num_classes != preds.num_classes() {
        return Err(GridError::Validation("noise plan shape does not match predictions".into()));
    }
    let rows = (0..preds.num_rows())
        .map(|i| {
            let v = preds.row(i);
            match plan.noise_for(i) {
                None => Ok(v.to_vec()),
                Some(s) => {
                    let r: Vec<f64> = add(v, s);
                    if r.iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
                        return Err(GridError::Invariant(format!("node {i}: noisy row leaves [0,1]: {r:?}")));
                    }
                    let r: Vec<f64> = r.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
                    if strict_argmax(&r) != Some(simkit::argmax(v)) {
                        return Err(GridError::Invariant(format!("node {i}: noise changed the predicted label")));
                    }
                    Ok(r)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionMatrix::new(rows).map_err(|e| GridError::Invariant(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn l1(s: &[f64]) -> f64 {
        BudgetNorm::L1.norm(s)
    }

    #[test]
    fn zero_noise_is_fixed_point() {
        let v = [0.5, 0.3, 0.2];
        assert_eq!(constraint_check(&[0.0; 3], &v, 0.4, BudgetNorm::L1), vec![0.0; 3]);
    }

    #[test]
    fn label_repair_fires() {
        let v = [0.7, 0.3];
        let s = constraint_check(&[-0.5, 0.5], &v, 10.0, BudgetNorm::L1);
        let u = add(&v, &s);
        assert_eq!(strict_argmax(&u), Some(0));
        assert_abs_diff_eq!(s[0], -0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(s[1], 0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn budget_scaling() {
        let v = [0.5, 0.3, 0.2];
        let s = constraint_check(&[0.3, -0.1, -0.2], &v, 0.2, BudgetNorm::L1);
        assert_abs_diff_eq!(l1(&s), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], -0.1 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_budget_scaling() {
        let v = [0.5, 0.3, 0.2];
        let s = constraint_check(&[0.3, -0.1, -0.2], &v, 0.2, BudgetNorm::L2);
        assert_abs_diff_eq!(BudgetNorm::L2.norm(&s), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn clipping_keeps_sum_zero() {
        // mean-shift then clip would leave sum = -0.2 here
        let v = [0.9, 0.1];
        let s = constraint_check(&[0.3, -0.3], &v, 10.0, BudgetNorm::L1);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        assert!(add(&v, &s).iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn theta_zero_gives_zero_noise() {
        let obj = GapObjective::new(vec![0.9, 0.1], vec![vec![0.9, 0.1]], vec![vec![0.1, 0.9]], 0.0);
        let cfg = SolverConfig {
            theta: 0.0,
            ..SolverConfig::default()
        };
        let (s, diag) = solve_node(&obj, &[0.9, 0.1], &cfg).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        assert_eq!(diag.final_gap, diag.initial_gap);
    }

    #[test]
    fn identical_sets_cancel() {
        let rows = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]];
        let obj = GapObjective::new(vec![0.5, 0.3, 0.2], rows.clone(), rows, 0.0);
        assert_abs_diff_eq!(obj.value(&[0.0; 3]), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(obj.value(&[0.1, -0.05, -0.05]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gap_matches_direct_arithmetic() {
        // node (0.6, 0.3, 0.1); neighbour (0.5, 0.4, 0.1); target (0.1, 0.2, 0.7)
        let v = [0.6, 0.3, 0.1];
        let (p, q) = ([0.5, 0.4, 0.1], [0.1, 0.2, 0.7]);
        let corr = |x: &[f64], y: &[f64]| {
            let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
            let sxy: f64 = (0..3).map(|k| (x[k] - mx) * (y[k] - my)).sum();
            let sxx: f64 = (0..3).map(|k| (x[k] - mx).powi(2)).sum();
            let syy: f64 = (0..3).map(|k| (y[k] - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = (0..3).map(|k| x[k] * y[k]).sum();
            d / (x.iter().map(|a| a * a).sum::<f64>().sqrt() * y.iter().map(|a| a * a).sum::<f64>().sqrt())
        };
        let expected = corr(&v, &p) + cos(&v, &p) - corr(&v, &q) - cos(&v, &q);
        let obj = GapObjective::new(v.to_vec(), vec![p.to_vec()], vec![q.to_vec()], 0.0);
        assert_abs_diff_eq!(obj.value(&[0.0; 3]), expected, epsilon = 1e-12);
    }

    #[test]
    fn fallback_target_used_when_no_targets() {
        let obj = GapObjective::new(vec![0.6, 0.4], vec![vec![0.6, 0.4], vec![0.7, 0.3]], vec![], 0.5);
        let raw: f64 = [vec![0.6, 0.4], vec![0.7, 0.3]]
            .iter()
            .map(|y| simkit::similarity(&[0.6, 0.4], y, MetricKind::CombinedCorrCos))
            .sum();
        assert_abs_diff_eq!(obj.value(&[0.0, 0.0]), raw - 2.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_input_aborts_with_zero_noise() {
        let obj = GapObjective::new(vec![0.6, 0.4], vec![vec![f64::NAN, 0.5]], vec![], 0.0);
        let (s, diag) = solve_node(&obj, &[0.6, 0.4], &SolverConfig::default()).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        assert!(diag.aborted.is_some());
    }

    #[test]
    fn two_class_toy_reduces_gap() {
        let v = [0.9, 0.1];
        let obj = GapObjective::new(v.to_vec(), vec![v.to_vec()], vec![vec![0.1, 0.9]], 0.0);
        let (s, diag) = solve_node(&obj, &v, &SolverConfig::default()).unwrap();
        assert!(diag.final_gap < diag.initial_gap);
        assert_eq!(strict_argmax(&add(&v, &s)), Some(0));
        assert!(diag.residuals.satisfied(), "{:?}", diag.residuals);
        assert!(diag.lambda.iter().all(|&l| l >= 0.0) && diag.nu >= 0.0);
    }

    #[test]
    fn vertex_starts_are_feasible() {
        let v = [0.5, 0.3, 0.2];
        let cfg = SolverConfig::default();
        let starts = vertex_starts(&v, &cfg);
        assert_eq!(starts.len(), 6);
        for s in &starts {
            assert!(Residuals::of(s, &v, cfg.theta, cfg.budget_norm).satisfied(), "{s:?}");
        }
        assert_eq!(starts[0], vec![0.2, -0.2, 0.0]);
    }

    #[test]
    fn extra_start_never_worse() {
        let v = [0.44, 0.34, 0.22];
        let obj = GapObjective::new(
            v.to_vec(),
            vec![vec![0.5, 0.3, 0.2], vec![0.6, 0.3, 0.1]],
            vec![vec![0.1, 0.2, 0.7], vec![0.2, 0.7, 0.1]],
            0.0,
        );
        let single = SolverConfig {
            extra_starts: 0,
            ..SolverConfig::default()
        };
        let (_, one) = solve_node(&obj, &v, &single).unwrap();
        let (s, many) = solve_node(&obj, &v, &SolverConfig::default()).unwrap();
        assert!(many.final_gap <= one.final_gap);
        assert_eq!(obj.value(&s), many.final_gap);
        assert!(many.residuals.satisfied());
    }

    #[test]
    fn budget_multiplier_activates_when_budget_binds() {
        // the gap keeps falling past any budget, so the norm constraint binds
        let v = [0.9, 0.1];
        let obj = GapObjective::new(v.to_vec(), vec![v.to_vec()], vec![vec![0.1, 0.9]], 0.0);
        let cfg = SolverConfig {
            theta: 0.1,
            extra_starts: 0,
            ..SolverConfig::default()
        };
        let (s, diag) = solve_node(&obj, &v, &cfg).unwrap();
        assert_abs_diff_eq!(l1(&s), 0.1, epsilon = 1e-9);
        assert!(diag.nu > 0.0, "{diag:?}");
    }

    #[test]
    fn tied_row_rejected() {
        let obj = GapObjective::new(vec![0.5, 0.5], vec![], vec![], 0.0);
        assert!(matches!(
            solve_node(&obj, &[0.5, 0.5], &SolverConfig::default()),
            Err(GridError::TiedArgmax(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { theta: -0.1, ..Default::default() },
            SolverConfig { learning_rate: 0.0, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
            SolverConfig { n: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: SolverConfig = serde_json::from_str(r#"{"theta": 0.7, "budget_norm": "l2"}"#).unwrap();
        assert_eq!(cfg.theta, 0.7);
        assert_eq!(cfg.budget_norm, BudgetNorm::L2);
        assert_eq!(cfg.n, 3);
        assert!(serde_json::from_str::<SolverConfig>(r#"{"thetaa": 1}"#).is_err());
    }

    #[test]
    fn subgradients() {
        assert_eq!(BudgetNorm::L1.subgradient(&[0.2, 0.0, -0.1]), vec![1.0, 0.0, -1.0]);
        assert_eq!(BudgetNorm::L2.subgradient(&[0.0, 0.0]), vec![0.0, 0.0]);
        let g = BudgetNorm::L2.subgradient(&[0.3, -0.4]);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-15);
    }
}
