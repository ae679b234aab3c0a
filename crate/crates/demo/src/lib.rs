//! WebAssembly bindings for the browser page in `www/`. Every export takes
//! plain strings and numbers and returns a JSON string.

use grid_core::attacks::AttackKind;
use grid_core::evalkit::{self, PairConfig, Scenario, ScenarioConfig, SweepParam};
use grid_core::graphio::SbmParams;
use grid_core::noisecraft::{self, BudgetNorm, GapObjective, Residuals, SolverConfig};
use grid_core::simkit::{self, strict_argmax, MetricKind};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Parses `"0.1, 0.2 0.7"` into numbers.
pub fn parse_vector(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// One vector per non-empty line.
pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_vector)
        .collect()
}

fn check_simplex(v: &[f64], what: &str) -> Result<(), String> {
    if v.len() < 2 {
        return Err(format!("{what} needs at least 2 entries"));
    }
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(format!("{what} must be a probability vector"));
    }
    Ok(())
}

pub fn similarity_report(x: &str, y: &str) -> Result<String, String> {
    let (x, y) = (parse_vector(x)?, parse_vector(y)?);
    if x.len() != y.len() || x.is_empty() {
        return Err(format!("vectors have lengths {} and {}", x.len(), y.len()));
    }
    let mut out = serde_json::Map::new();
    for kind in MetricKind::ALL {
        out.insert(kind.name().to_string(), json!(simkit::similarity(&x, &y, kind)));
    }
    Ok(serde_json::Value::Object(out).to_string())
}

pub fn solve_report(v: &str, neighbors: &str, targets: &str, theta: f64) -> Result<String, String> {
    let v = parse_vector(v)?;
    check_simplex(&v, "the node's vector")?;
    if strict_argmax(&v).is_none() {
        return Err("the node's top class is tied".into());
    }
    let (neighbors, targets) = (parse_rows(neighbors)?, parse_rows(targets)?);
    if neighbors.is_empty() {
        return Err("give at least one neighbor".into());
    }
    for row in neighbors.iter().chain(&targets) {
        if row.len() != v.len() {
            return Err(format!("every row needs {} entries", v.len()));
        }
    }
    let cfg = SolverConfig {
        theta,
        ..SolverConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let kind = MetricKind::CombinedCorrCos;
    let mean = |rows: &[Vec<f64>], x: &[f64]| -> Option<f64> {
        (!rows.is_empty()).then(|| rows.iter().map(|y| simkit::similarity(x, y, kind)).sum::<f64>() / rows.len() as f64)
    };
    // without targets the gap is the neighbor similarity alone; the offset does not move the solve
    let obj = GapObjective::new(v.clone(), neighbors.clone(), targets.clone(), 0.0);
    let (noise, diag) = noisecraft::solve_node(&obj, &v, &cfg).map_err(|e| e.to_string())?;
    let noisy: Vec<f64> = v.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let residuals = Residuals::of(&noise, &v, theta, BudgetNorm::L1);
    Ok(json!({
        "noise": noise,
        "noisy": noisy,
        "l1": BudgetNorm::L1.norm(&noise),
        "gap_before": diag.initial_gap,
        "gap_after": diag.final_gap,
        "neighbor_sim_before": mean(&neighbors, &v),
        "neighbor_sim_after": mean(&neighbors, &noisy),
        "target_sim_before": mean(&targets, &v),
        "target_sim_after": mean(&targets, &noisy),
        "iterations": diag.iterations,
        "converged": diag.converged,
        "feasible": residuals.satisfied(),
    })
    .to_string())
}

/// Small two-attack sweep over `theta` on a freshly generated graph.
pub fn sweep_report(seed: u64, thetas: &str) -> Result<String, String> {
    let values = parse_vector(thetas)?;
    let cfg = ScenarioConfig {
        sbm: SbmParams {
            blocks: 3,
            nodes_per_block: 30,
            p_in: 0.2,
            p_out: 0.01,
            attr_dim: 6,
        },
        pairs: PairConfig {
            num_pos: 120,
            num_neg: 120,
            with_attributes: false,
        },
        seed,
        ..ScenarioConfig::default()
    };
    let scenario = Scenario::synthetic(&cfg).map_err(|e| e.to_string())?;
    let base = SolverConfig {
        seed,
        ..SolverConfig::default()
    };
    let kinds = [AttackKind::Unsupervised, AttackKind::Supervised];
    let result =
        evalkit::run_sweep(&scenario, &base, SweepParam::Theta, &values, &kinds, false).map_err(|e| e.to_string())?;
    let points: Vec<_> = result
        .points
        .iter()
        .map(|p| {
            let auc = |kind| p.attacks.iter().find(|r| r.attack_kind == kind).and_then(|r| r.auc);
            json!({
                "theta": p.value,
                "core_size": p.core_size,
                "unsupervised_auc": auc(AttackKind::Unsupervised),
                "supervised_auc": auc(AttackKind::Supervised),
                "gan": p.utility.as_ref().map(|u| u.gan),
                "als": p.utility.as_ref().map(|u| u.als),
                "error": p.error,
            })
        })
        .collect();
    Ok(json!({
        "nodes": scenario.graph.num_nodes(),
        "edges": scenario.graph.num_edges(),
        "points": points,
    })
    .to_string())
}

fn to_js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn similarities(x: &str, y: &str) -> Result<String, JsError> {
    to_js(similarity_report(x, y))
}

#[wasm_bindgen(js_name = solveNode)]
pub fn solve_node(v: &str, neighbors: &str, targets: &str, theta: f64) -> Result<String, JsError> {
    to_js(solve_report(v, neighbors, targets, theta))
}

#[wasm_bindgen(js_name = sweepTheta)]
pub fn sweep_theta(seed: u32, thetas: &str) -> Result<String, JsError> {
    to_js(sweep_report(seed as u64, thetas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn parses_mixed_separators() {
        assert_eq!(parse_vector(" 0.1, 0.2  0.7 ").unwrap(), vec![0.1, 0.2, 0.7]);
        assert!(parse_vector("0.1, x").is_err());
        assert_eq!(parse_rows("1 0\n\n0 1\n").unwrap().len(), 2);
    }

    #[test]
    fn identical_vectors_are_fully_similar() {
        let r: Value = serde_json::from_str(&similarity_report("0.2,0.3,0.5", "0.2 0.3 0.5").unwrap()).unwrap();
        assert!((r["cosine"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity_report("0.2,0.8", "1,0,0").is_err());
    }

    #[test]
    fn solve_keeps_label_and_budget() {
        let out = solve_report("0.6,0.3,0.1", "0.7,0.2,0.1\n0.65,0.25,0.1", "0.1,0.3,0.6", 0.4).unwrap();
        let r: Value = serde_json::from_str(&out).unwrap();
        assert!(r["feasible"].as_bool().unwrap());
        assert!(r["l1"].as_f64().unwrap() <= 0.4 + 1e-9);
        assert!(r["gap_after"].as_f64().unwrap() <= r["gap_before"].as_f64().unwrap());
        let noisy: Vec<f64> = serde_json::from_value(r["noisy"].clone()).unwrap();
        assert_eq!(strict_argmax(&noisy), Some(0));
    }

    #[test]
    fn solve_rejects_bad_input() {
        assert!(solve_report("0.5,0.5", "0.6,0.4", "", 0.4).is_err());
        assert!(solve_report("0.6,0.4", "", "", 0.4).is_err());
        assert!(solve_report("0.6,0.4", "0.6,0.4,0", "", 0.4).is_err());
        assert!(solve_report("0.6,0.4", "0.7,0.3", "", -1.0).is_err());
    }

    #[test]
    fn sweep_reports_every_point() {
        let r: Value = serde_json::from_str(&sweep_report(1, "0, 0.5").unwrap()).unwrap();
        let points = r["points"].as_array().unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0]["gan"].as_f64(), Some(0.0));
        assert!(sweep_report(1, "0.5, 0.2").is_err());
    }
}
