//! Utility metrics, the end-to-end defense pipeline, parameter sweeps and
//! report files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackKind, AttackModel, AttackReport, AttackTrainConfig, LabeledPair, PairSample};
use crate::coresel::{self, CoreSet, DeltaEstimate};
use crate::error::{GridError, Result};
use crate::graphio::{self, Graph, HopIndex, NodeData, SbmParams};
use crate::noisecraft::{self, NoisePlan, SolverConfig};
use crate::rng::sub_seed;
use crate::simkit::{argmax, PredictionMatrix};
use crate::toygnn::{self, TrainConfig, TrainStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    /// Graph-averaged noise: total L1 distortion over core nodes divided by
    /// the total node count.
    pub gan: f64,
    /// Fraction of all nodes whose predicted label changed.
    pub als: f64,
    /// `(node, ||v - r||_1)` for every core node.
    pub distortions: Vec<(usize, f64)>,
    pub max_distortion: f64,
}

pub fn utility_metrics(original: &PredictionMatrix, noisy: &PredictionMatrix, core: &CoreSet) -> Result<UtilityReport> {
    if original.num_rows() != noisy.num_rows() || original.num_classes() != noisy.num_classes() {
        return Err(GridError::Validation("original and noisy predictions differ in shape".into()));
    }
    let n = original.num_rows();
    let l1 = |i: usize| -> f64 {
        original
            .row(i)
            .iter()
            .zip(noisy.row(i))
            .map(|(a, b)| (a - b).abs())
            .sum()
    };
    let distortions: Vec<(usize, f64)> = core.members.iter().map(|&i| (i, l1(i))).collect();
    let total: f64 = distortions.iter().map(|d| d.1).sum();
    let changed = (0..n)
        .filter(|&i| argmax(original.row(i)) != argmax(noisy.row(i)))
        .count();
    let ratio = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(UtilityReport {
        gan: ratio(total),
        als: ratio(changed as f64),
        max_distortion: distortions.iter().map(|d| d.1).fold(0.0, f64::max),
        distortions,
    })
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub selection: f64,
    pub solving: f64,
    pub attacks: f64,
}

/// Wall clock; wasm32-unknown-unknown has none, so timings read zero there.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    started: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            started: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.started.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Output of [`run_defense`].
#[derive(Clone, Debug)]
pub struct Defense {
    pub delta: DeltaEstimate,
    pub core: CoreSet,
    pub plan: NoisePlan,
    pub noisy: PredictionMatrix,
    pub timings: Timings,
}

/// Threshold estimation, core selection, per-node solves and application.
pub fn run_defense(graph: &Graph, preds: &PredictionMatrix, cfg: &SolverConfig) -> Result<Defense> {
    cfg.validate()?;
    let tied = preds.tied_argmax_rows();
    if !tied.is_empty() {
        return Err(GridError::TiedArgmax(tied));
    }
    let started = Stopwatch::start();
    let index = HopIndex::build(graph, cfg.n);
    let delta = coresel::estimate_delta_indexed(graph, &index, preds, cfg.n, cfg.max_pairs, cfg.seed)?;
    let core = coresel::select_core(graph, preds, delta.delta);
    let selection = started.seconds();

    let started = Stopwatch::start();
    let plan = noisecraft::craft_plan(graph, preds, &core, cfg)?;
    let noisy = noisecraft::apply_plan(preds, &plan)?;
    let solving = started.seconds();
    Ok(Defense {
        delta,
        core,
        plan,
        noisy,
        timings: Timings {
            selection,
            solving,
            attacks: 0.0,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub num_pos: usize,
    pub num_neg: usize,
    /// Append attribute-space metrics to the supervised features.
    pub with_attributes: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            num_pos: 300,
            num_neg: 300,
            with_attributes: false,
        }
    }
}

/// Everything needed to build a target graph, its posteriors and the
/// attacker's shadow data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sbm: SbmParams,
    pub model: TrainConfig,
    pub pairs: PairConfig,
    pub attack_training: AttackTrainConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            sbm: SbmParams::default(),
            model: TrainConfig::default(),
            pairs: PairConfig::default(),
            attack_training: AttackTrainConfig::default(),
            seed: 0,
        }
    }
}

// sub-stream tags
const TARGET_GRAPH: u64 = 1;
const TARGET_MODEL: u64 = 2;
const SHADOW_GRAPH: u64 = 3;
const SHADOW_MODEL: u64 = 4;
const TEST_PAIRS: u64 = 5;
const SHADOW_PAIRS: u64 = 6;
const ATTACK_MODEL: u64 = 7;

/// Generates the target graph for `cfg` and trains its posterior model.
pub fn synthesize_target(
    cfg: &ScenarioConfig,
) -> Result<(Graph, NodeData, toygnn::ToyModel, TrainStats, PredictionMatrix)> {
    let (graph, data) = graphio::generate_synthetic(sub_seed(cfg.seed, TARGET_GRAPH), &cfg.sbm)?;
    let (model, stats) = toygnn::train(&graph, &data, &cfg.model, sub_seed(cfg.seed, TARGET_MODEL))?;
    let preds = toygnn::forward(&model, &graph, &data)?;
    Ok((graph, data, model, stats, preds))
}

/// Target data plus the attacker's shadow graph (same generator, disjoint
/// seed, separately trained model) and fixed pair samples.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: Graph,
    pub data: NodeData,
    pub preds: PredictionMatrix,
    pub shadow_graph: Graph,
    pub shadow_data: NodeData,
    pub shadow_preds: PredictionMatrix,
    pub test_pairs: Vec<LabeledPair>,
    pub shadow_pairs: Vec<PairSample>,
}

impl Scenario {
    pub fn synthetic(cfg: &ScenarioConfig) -> Result<Self> {
        let (graph, data, _, _, preds) = synthesize_target(cfg)?;
        Self::with_target(cfg, graph, data, preds)
    }

    /// Uses the given target; the shadow side is always synthetic.
    pub fn with_target(cfg: &ScenarioConfig, graph: Graph, data: NodeData, preds: PredictionMatrix) -> Result<Self> {
        let (shadow_graph, shadow_data) = graphio::generate_synthetic(sub_seed(cfg.seed, SHADOW_GRAPH), &cfg.sbm)?;
        let (shadow_model, _) =
            toygnn::train(&shadow_graph, &shadow_data, &cfg.model, sub_seed(cfg.seed, SHADOW_MODEL))?;
        let shadow_preds = toygnn::forward(&shadow_model, &shadow_graph, &shadow_data)?;
        let p = &cfg.pairs;
        let test_pairs = attacks::sample_pairs(&graph, p.num_pos, p.num_neg, sub_seed(cfg.seed, TEST_PAIRS))?;
        let shadow_pairs = attacks::build_pair_dataset(
            &shadow_graph,
            &shadow_preds,
            &shadow_data,
            p.num_pos,
            p.num_neg,
            sub_seed(cfg.seed, SHADOW_PAIRS),
            p.with_attributes,
        )?;
        Ok(Scenario {
            config: cfg.clone(),
            graph,
            data,
            preds,
            shadow_graph,
            shadow_data,
            shadow_preds,
            test_pairs,
            shadow_pairs,
        })
    }

    pub fn attack_data(&self) -> Option<&NodeData> {
        self.config.pairs.with_attributes.then_some(&self.data)
    }

    /// Trains the attack model of `kind` on the shadow pairs. `n` is the hop
    /// count the adaptive attacker assumes.
    pub fn train_attack(&self, kind: AttackKind, n: usize) -> Result<Option<AttackModel>> {
        let seed = sub_seed(self.config.seed, ATTACK_MODEL);
        let cfg = &self.config.attack_training;
        match kind {
            AttackKind::Unsupervised => Ok(None),
            AttackKind::Supervised => attacks::train_supervised(&self.shadow_pairs, kind, cfg, seed).map(Some),
            AttackKind::Adaptive => {
                let relabeled = attacks::adaptive_relabel(&self.shadow_graph, n, &self.shadow_pairs);
                attacks::train_supervised(&relabeled, kind, cfg, seed).map(Some)
            }
        }
    }

    /// Runs one attack against the given (possibly noisy) target posteriors.
    pub fn evaluate(&self, kind: AttackKind, model: Option<&AttackModel>, preds: &PredictionMatrix) -> Result<AttackReport> {
        match (kind, model) {
            (AttackKind::Unsupervised, _) => attacks::attack0_scores(preds, &self.test_pairs),
            (_, Some(m)) => {
                let samples = attacks::featurize(&self.test_pairs, preds, self.attack_data());
                Ok(attacks::evaluate_attack(m, &samples))
            }
            (_, None) => Err(GridError::Validation(format!("{kind} attack needs a trained model"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Theta,
    N,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Theta => "theta",
            SweepParam::N => "n",
        })
    }
}

impl FromStr for SweepParam {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(SweepParam::Theta),
            "n" => Ok(SweepParam::N),
            other => Err(GridError::Validation(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub delta: Option<f64>,
    pub core_size: Option<usize>,
    pub attacks: Vec<AttackReport>,
    pub utility: Option<UtilityReport>,
    pub seconds: Timings,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: SweepParam,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn auc_series(&self, kind: AttackKind) -> Vec<Option<f64>> {
        self.points
            .iter()
            .map(|p| p.attacks.iter().find(|r| r.attack_kind == kind).and_then(|r| r.auc))
            .collect()
    }
}

/// Runs the defense at every parameter value and scores the configured
/// attacks on the same fixed pairs. Failures at a point are recorded and
/// the sweep moves on. With `record_timing` off every duration is reported
/// as zero, which makes the result byte-reproducible.
pub fn run_sweep(
    scenario: &Scenario,
    base: &SolverConfig,
    parameter: SweepParam,
    values: &[f64],
    kinds: &[AttackKind],
    record_timing: bool,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(GridError::Validation("sweep needs at least one value".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GridError::Validation("sweep values must be strictly increasing".into()));
    }
    // the supervised model never depends on the swept parameter
    let supervised = if kinds.contains(&AttackKind::Supervised) {
        scenario.train_attack(AttackKind::Supervised, base.n)?
    } else {
        None
    };

    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match parameter {
            SweepParam::Theta => cfg.theta = value,
            SweepParam::N => {
                if value.fract() != 0.0 || value < 2.0 {
                    points.push(failed_point(value, format!("n must be an integer >= 2, got {value}")));
                    continue;
                }
                cfg.n = value as usize;
            }
        }
        match sweep_point(scenario, &cfg, value, kinds, supervised.as_ref()) {
            Ok(mut point) => {
                if !record_timing {
                    point.seconds = Timings::default();
                }
                points.push(point);
            }
            Err(e) => {
                log::warn!("sweep point {parameter}={value} failed: {e}");
                points.push(failed_point(value, e.to_string()));
            }
        }
    }
    Ok(SweepResult { parameter, points })
}

fn failed_point(value: f64, error: String) -> SweepPoint {
    SweepPoint {
        value,
        delta: None,
        core_size: None,
        attacks: Vec::new(),
        utility: None,
        seconds: Timings::default(),
        error: Some(error),
    }
}

fn sweep_point(
    scenario: &Scenario,
    cfg: &SolverConfig,
    value: f64,
    kinds: &[AttackKind],
    supervised: Option<&AttackModel>,
) -> Result<SweepPoint> {
    let defense = run_defense(&scenario.graph, &scenario.preds, cfg)?;
    let started = Stopwatch::start();
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let adaptive;
        let model = match kind {
            AttackKind::Unsupervised => None,
            AttackKind::Supervised => supervised,
            AttackKind::Adaptive => {
                adaptive = scenario.train_attack(kind, cfg.n)?;
                adaptive.as_ref()
            }
        };
        reports.push(scenario.evaluate(kind, model, &defense.noisy)?);
    }
    let mut seconds = defense.timings;
    seconds.attacks = started.seconds();
    Ok(SweepPoint {
        value,
        delta: Some(defense.delta.delta),
        core_size: Some(defense.core.members.len()),
        attacks: reports,
        utility: Some(utility_metrics(&scenario.preds, &defense.noisy, &defense.core)?),
        seconds,
        error: None,
    })
}

/// Writes `sweep.json` (full result) and `sweep.csv` with one row per point
/// and attack: `param,attack,accuracy,precision,recall,auc,gan,als,seconds`.
pub fn report(sweep: &SweepResult, out: &Path) -> Result<()> {
    if sweep.points.is_empty() {
        return Err(GridError::Validation("cannot report an empty sweep".into()));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(sweep)? + "\n")?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["param", "attack", "accuracy", "precision", "recall", "auc", "gan", "als", "seconds"])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for p in &sweep.points {
        let seconds = p.seconds.selection + p.seconds.solving + p.seconds.attacks;
        let (gan, als) = p.utility.as_ref().map_or((None, None), |u| (Some(u.gan), Some(u.als)));
        for r in &p.attacks {
            w.write_record([
                p.value.to_string(),
                r.attack_kind.to_string(),
                opt(r.accuracy),
                opt(r.precision),
                opt(r.recall),
                opt(r.auc),
                opt(gan),
                opt(als),
                seconds.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_sweep(path: &Path) -> Result<SweepResult> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_predictions_cost_nothing() {
        let p = PredictionMatrix::new(vec![vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let core = CoreSet::empty(&g, 0.0);
        let u = utility_metrics(&p, &p, &core).unwrap();
        assert_eq!((u.gan, u.als), (0.0, 0.0));
    }

    #[test]
    fn gan_arithmetic() {
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![0.7, 0.2, 0.1]).collect();
        let original = PredictionMatrix::new(rows.clone()).unwrap();
        let mut noisy_rows = rows;
        noisy_rows[3] = vec![0.5, 0.3, 0.2];
        let noisy = PredictionMatrix::new(noisy_rows).unwrap();
        let g = Graph::from_edges(10, []).unwrap();
        let mut core = CoreSet::empty(&g, 0.0);
        core.members = vec![3];
        let u = utility_metrics(&original, &noisy, &core).unwrap();
        assert_abs_diff_eq!(u.gan, 0.04, epsilon = 1e-12);
        assert_eq!(u.als, 0.0);
        assert_abs_diff_eq!(u.max_distortion, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn als_counts_changed_labels() {
        let original = PredictionMatrix::new(vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let noisy = PredictionMatrix::new(vec![vec![0.4, 0.6], vec![0.3, 0.7], vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let g = Graph::from_edges(4, []).unwrap();
        let u = utility_metrics(&original, &noisy, &CoreSet::empty(&g, 0.0)).unwrap();
        assert_eq!(u.als, 0.25);
    }

    #[test]
    fn sweep_value_order_enforced() {
        let cfg = ScenarioConfig {
            sbm: SbmParams {
                blocks: 2,
                nodes_per_block: 15,
                p_in: 0.3,
                p_out: 0.02,
                attr_dim: 2,
            },
            pairs: PairConfig {
                num_pos: 20,
                num_neg: 20,
                with_attributes: false,
            },
            ..Default::default()
        };
        let s = Scenario::synthetic(&cfg).unwrap();
        let base = SolverConfig::default();
        assert!(run_sweep(&s, &base, SweepParam::Theta, &[0.2, 0.1], &[AttackKind::Unsupervised], false).is_err());
        assert!(run_sweep(&s, &base, SweepParam::Theta, &[], &[AttackKind::Unsupervised], false).is_err());
        let r = run_sweep(&s, &base, SweepParam::N, &[1.0, 2.0], &[AttackKind::Unsupervised], false).unwrap();
        assert!(r.points[0].error.is_some());
        assert!(r.points[1].error.is_none());
    }
}
