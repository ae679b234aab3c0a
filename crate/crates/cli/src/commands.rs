use std::path::{Path, PathBuf};

use grid_core::attacks::AttackReport;
use grid_core::coresel;
use grid_core::evalkit::{self, Scenario, SweepResult, UtilityReport};
use grid_core::graphio::{self, Graph, NodeData};
use grid_core::simkit::PredictionMatrix;
use grid_core::GridError;
use serde::Serialize;

use crate::config::{ExperimentConfig, EDGES_FILE, NODES_FILE, PREDICTIONS_FILE};
use crate::Failure;

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;
    cfg.echo(&out)?;
    Ok(out)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    let path = path
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("no {what} file given (use --data DIR or the config's data section)")))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("{what} file {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_predictions(cfg: &ExperimentConfig) -> Result<(Graph, PredictionMatrix), Failure> {
    let pred_path = require(&cfg.data.predictions, "prediction")?;
    let edge_path = require(&cfg.data.edges, "edge")?;
    let preds = PredictionMatrix::load_csv(pred_path)?;
    let text = std::fs::read_to_string(edge_path).map_err(GridError::from)?;
    let graph = Graph::from_edges(preds.num_rows(), graphio::parse_edges(edge_path, &text)?)?;
    Ok((graph, preds))
}

fn load_scenario(cfg: &ExperimentConfig) -> Result<Scenario, Failure> {
    if cfg.data.is_empty() {
        return Ok(Scenario::synthetic(&cfg.scenario)?);
    }
    let (graph, preds) = load_predictions(cfg)?;
    let data: NodeData = graphio::load_nodes(require(&cfg.data.nodes, "node")?)?;
    if data.len() != graph.num_nodes() {
        return Err(Failure::Data(format!(
            "{} node rows for {} prediction rows",
            data.len(),
            graph.num_nodes()
        )));
    }
    Ok(Scenario::with_target(&cfg.scenario, graph, data, preds)?)
}

fn write_failure(path: &Path) -> impl Fn(GridError) -> Failure + '_ {
    move |e| Failure::Usage(format!("cannot write {}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| write_failure(path)(e.into()))
}

pub fn generate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = prepare_out(cfg)?;
    let (graph, data, model, stats, preds) = evalkit::synthesize_target(&cfg.scenario)?;
    let edges = out.join(EDGES_FILE);
    graphio::write_edges(&edges, &graph).map_err(write_failure(&edges))?;
    let nodes = out.join(NODES_FILE);
    graphio::write_nodes(&nodes, &data).map_err(write_failure(&nodes))?;
    let predictions = out.join(PREDICTIONS_FILE);
    preds.write_csv(&predictions).map_err(write_failure(&predictions))?;
    let model_path = out.join("model.json");
    model.save(&model_path).map_err(write_failure(&model_path))?;
    println!(
        "generated {} nodes, {} edges; train accuracy {:.3}, loss {:.4}",
        graph.num_nodes(),
        graph.num_edges(),
        stats.train_accuracy,
        stats.final_loss
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct DefenseSummary {
    delta: f64,
    delta_pairs: usize,
    delta_fallback: bool,
    core_size: usize,
    covered_edges: usize,
    dropped_edges: usize,
    violations: Vec<usize>,
    utility: UtilityReport,
}

pub fn defend(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let (graph, preds) = load_predictions(cfg)?;
    let tied = preds.tied_argmax_rows();
    if !tied.is_empty() {
        return Err(Failure::Data(format!(
            "{} prediction rows have a tied top class; offending nodes: {tied:?}",
            tied.len()
        )));
    }
    let out = prepare_out(cfg)?;
    let defense = evalkit::run_defense(&graph, &preds, &cfg.solver)?;
    log::info!(
        "selection {:.3}s, solving {:.3}s",
        defense.timings.selection,
        defense.timings.solving
    );
    let core = &defense.core;
    let (core_csv, core_json) = (out.join("core.csv"), out.join("core.json"));
    coresel::write_core(&core_csv, &core_json, core, cfg.solver.n).map_err(write_failure(&core_csv))?;
    let (noise_csv, noise_json) = (out.join("noise.csv"), out.join("noise_diagnostics.json"));
    defense.plan.write(&noise_csv, &noise_json).map_err(write_failure(&noise_csv))?;
    let noisy = out.join("noisy_predictions.csv");
    defense.noisy.write_csv(&noisy).map_err(write_failure(&noisy))?;

    let violations = defense.plan.violations(&preds);
    let utility = evalkit::utility_metrics(&preds, &defense.noisy, core)?;
    println!(
        "delta {:.4} from {} pairs{}",
        defense.delta.delta,
        defense.delta.num_pairs,
        if defense.delta.fallback { " (non-adjacent fallback)" } else { "" }
    );
    println!(
        "core {} of {} nodes, {} edges covered, {} below threshold",
        core.members.len(),
        graph.num_nodes(),
        core.num_covered,
        core.num_dropped
    );
    println!("GAN {:.4}, ALS {:.4}, max distortion {:.4}", utility.gan, utility.als, utility.max_distortion);
    println!("constraint violations: {}", violations.len());
    let summary = DefenseSummary {
        delta: defense.delta.delta,
        delta_pairs: defense.delta.num_pairs,
        delta_fallback: defense.delta.fallback,
        core_size: core.members.len(),
        covered_edges: core.num_covered,
        dropped_edges: core.num_dropped,
        violations: violations.clone(),
        utility,
    };
    write_json(&out.join("summary.json"), &summary)?;
    if !violations.is_empty() {
        return Err(Failure::Internal(format!("noise violates constraints at nodes {violations:?}")));
    }
    Ok(())
}

fn write_report(out: &Path, report: &AttackReport, stage: &str) -> Result<(), Failure> {
    let stem = format!("attack_{}_{stage}", report.attack_kind);
    let json = out.join(format!("{stem}.json"));
    report.write_json(&json).map_err(write_failure(&json))?;
    let scores = out.join(format!("{stem}_scores.csv"));
    report.write_scores_csv(&scores).map_err(write_failure(&scores))
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

pub fn attack(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let kinds = cfg.attack_kinds()?;
    let out = prepare_out(cfg)?;
    let scenario = load_scenario(cfg)?;
    let defense = evalkit::run_defense(&scenario.graph, &scenario.preds, &cfg.solver)?;
    println!("{:<13} {:>6} {:>10} {:>10} {:>10}", "attack", "stage", "accuracy", "recall", "auc");
    for kind in kinds {
        let model = scenario.train_attack(kind, cfg.solver.n)?;
        for (stage, preds) in [("before", &scenario.preds), ("after", &defense.noisy)] {
            let report = scenario.evaluate(kind, model.as_ref(), preds)?;
            write_report(&out, &report, stage)?;
            println!(
                "{:<13} {:>6} {:>10} {:>10} {:>10}",
                kind.name(),
                stage,
                show(report.accuracy),
                show(report.recall),
                show(report.auc)
            );
        }
    }
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let kinds = cfg.attack_kinds()?;
    let out = prepare_out(cfg)?;
    let scenario = load_scenario(cfg)?;
    let result = evalkit::run_sweep(
        &scenario,
        &cfg.solver,
        cfg.sweep.parameter,
        &cfg.sweep.values,
        &kinds,
        cfg.record_timing,
    )
    .map_err(|e| match e {
        GridError::Validation(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    evalkit::report(&result, &out).map_err(write_failure(&out))?;
    print_table(&result);
    Ok(())
}

pub fn report(cfg: &ExperimentConfig, sweep_path: &Path) -> Result<(), Failure> {
    if !sweep_path.is_file() {
        return Err(Failure::Usage(format!("sweep file {} does not exist", sweep_path.display())));
    }
    let result = evalkit::load_sweep(sweep_path)?;
    let out = prepare_out(cfg)?;
    evalkit::report(&result, &out).map_err(write_failure(&out))?;
    print_table(&result);
    Ok(())
}

fn print_table(result: &SweepResult) {
    println!(
        "{:>8} {:<13} {:>8} {:>8} {:>8} {:>8} {:>8}",
        result.parameter.to_string(),
        "attack",
        "acc",
        "recall",
        "auc",
        "gan",
        "core"
    );
    for p in &result.points {
        if let Some(e) = &p.error {
            println!("{:>8} failed: {e}", p.value);
            continue;
        }
        let gan = p.utility.as_ref().map(|u| u.gan);
        let core = p.core_size.map_or_else(|| "-".to_string(), |c| c.to_string());
        for r in &p.attacks {
            println!(
                "{:>8} {:<13} {:>8} {:>8} {:>8} {:>8} {:>8}",
                p.value,
                r.attack_kind.name(),
                show(r.accuracy),
                show(r.recall),
                show(r.auc),
                show(gan),
                core
            );
        }
    }
}

