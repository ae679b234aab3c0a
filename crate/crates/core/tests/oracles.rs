//! Independent checks of the analytic pieces: finite differences for the
//! gradients, brute force for the cover, direct rank counting for AUC.

use grid_core::attacks::{self, auc};
use grid_core::coresel;
use grid_core::graphio::Graph;
use grid_core::noisecraft::{constraint_check, BudgetNorm, GapObjective, Residuals};
use grid_core::simkit::{self, strict_argmax, MetricKind, PredictionMatrix};
use proptest::prelude::*;

fn simplex(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, dim).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    })
}

fn fd(f: impl Fn(&[f64]) -> f64, s: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..s.len())
        .map(|a| {
            let (mut p, mut m) = (s.to_vec(), s.to_vec());
            p[a] += h;
            m[a] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8)
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (3usize..=10).prop_flat_map(|d| {
        (
            simplex(d),
            prop::collection::vec(-0.05f64..0.05, d),
            prop::collection::vec(simplex(d), 1..5),
            prop::collection::vec(simplex(d), 0..6),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn similarity_gradients_match_finite_differences((v, s, p, _) in instance()) {
        for kind in [MetricKind::Correlation, MetricKind::Cosine, MetricKind::CombinedCorrCos] {
            let analytic = simkit::similarity_gradient(&v, &p[0], &s, kind).unwrap();
            let numeric = fd(|t| {
                let x: Vec<f64> = v.iter().zip(t).map(|(a, b)| a + b).collect();
                simkit::similarity(&x, &p[0], kind)
            }, &s);
            prop_assert!(rel_err(&analytic, &numeric) < 1e-4, "{kind}: {analytic:?} vs {numeric:?}");
        }
    }

    #[test]
    fn gap_gradient_matches_finite_differences((v, s, p, q) in instance()) {
        let obj = GapObjective::new(v, p, q, 0.3);
        let (_, analytic) = obj.evaluate(&s);
        let numeric = fd(|t| obj.value(t), &s);
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn constraint_check_output_is_feasible(
        (v, s) in (2usize..=8).prop_flat_map(|d| (simplex(d), prop::collection::vec(-1.0f64..1.0, d))),
        theta in 0.0f64..1.5,
        l2 in any::<bool>(),
    ) {
        prop_assume!(strict_argmax(&v).is_some());
        let norm = if l2 { BudgetNorm::L2 } else { BudgetNorm::L1 };
        let out = constraint_check(&s, &v, theta, norm);
        let r = Residuals::of(&out, &v, theta, norm);
        prop_assert!(r.satisfied(), "{r:?} for s={out:?}");
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scored in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60),
    ) {
        let (scores, truths): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
        let transformed: Vec<f64> = scores.iter().map(|x| (2.0 * x).exp() + 3.0).collect();
        prop_assert_eq!(auc(&scores, &truths), auc(&transformed, &truths));
    }

    #[test]
    fn pair_features_are_symmetric(rows in prop::collection::vec(simplex(4), 2..6)) {
        let preds = PredictionMatrix::new(rows).unwrap();
        let n = preds.num_rows();
        let a = attacks::pair_features(&preds, None, 0, n - 1);
        let b = attacks::pair_features(&preds, None, n - 1, 0);
        prop_assert_eq!(a, b);
    }
}

fn brute_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (i, &ti) in truths.iter().enumerate() {
        for (j, &tj) in truths.iter().enumerate() {
            if ti && !tj {
                total += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / total
}

proptest! {
    #[test]
    fn rank_auc_equals_pair_counting(
        scored in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = scored.iter().map(|p| p.0 as f64).collect();
        let truths: Vec<bool> = scored.iter().map(|p| p.1).collect();
        prop_assume!(truths.iter().any(|&t| t) && truths.iter().any(|&t| !t));
        let fast = auc(&scores, &truths).unwrap();
        prop_assert!((fast - brute_auc(&scores, &truths)).abs() < 1e-12);
    }

    #[test]
    fn core_covers_every_qualifying_edge(
        n in 2usize..=12,
        edge_bits in prop::collection::vec(any::<bool>(), 66),
        rows in prop::collection::vec(simplex(3), 12),
        delta in -1.0f64..2.0,
    ) {
        let mut edges = Vec::new();
        let mut k = 0;
        for u in 0..n {
            for v in u + 1..n {
                if edge_bits[k % edge_bits.len()] {
                    edges.push((u, v));
                }
                k += 1;
            }
        }
        let graph = Graph::from_edges(n, edges).unwrap();
        let preds = PredictionMatrix::new(rows[..n].to_vec()).unwrap();
        let core = coresel::select_core(&graph, &preds, delta);
        let check = coresel::verify_cover(&graph, &core);
        prop_assert!(check.ok, "uncovered {:?}", check.uncovered);
        for &(u, v) in graph.edges() {
            if preds.similarity(u, v, MetricKind::CombinedCorrCos) >= delta {
                prop_assert!(core.contains(u) || core.contains(v));
            }
        }
        prop_assert_eq!(core.num_covered + core.num_dropped, graph.num_edges());
    }
}
