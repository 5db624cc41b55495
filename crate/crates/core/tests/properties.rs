use std::collections::HashSet;

use cavprobe::debias::{self, MixMode};
use cavprobe::sampler::{build_split, subsample_for_replicate, ConceptSpec};
use cavprobe::synth::{self, SynthConfig};
use cavprobe::{stats, Attribute, Cav, EmbeddingRecord, LinearDecision, TrainerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cav(w: Vec<f64>, b: f64) -> Cav {
    Cav {
        concept_name: "c".into(),
        dim: w.len(),
        w,
        b,
        train_accuracy: 1.0,
        test_accuracy: None,
        converged: true,
        iterations: 0,
        trainer_config: TrainerConfig::default(),
        seed: None,
        replicate_index: None,
    }
}

fn coverage(m: usize, reps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
    let mut covered = 0;
    for _ in 0..reps {
        let xs: Vec<f64> = (0..20).map(|_| 0.5 + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let (lo, hi) = stats::corrected_ci(&xs, 0.05, m).expect("ci");
        if lo <= 0.5 && 0.5 <= hi {
            covered += 1;
        }
    }
    covered as f64 / reps as f64
}

#[test]
fn corrected_interval_has_nominal_coverage() {
    let single = coverage(1, 1000);
    assert!((single - 0.95).abs() <= 0.02, "coverage {single}");
    let family = coverage(4, 1000);
    assert!((family - (1.0 - 0.05 / 4.0)).abs() <= 0.02, "coverage {family}");
}

#[test]
fn t_cdf_approaches_normal() {
    for i in 0..=40 {
        let x = -5.0 + 0.25 * i as f64;
        let gap = (stats::student_t_cdf(x, 100_000) - stats::normal_cdf(x)).abs();
        assert!(gap < 1e-5, "x = {x}: {gap}");
    }
}

#[test]
fn null_t_test_rejects_at_nominal_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 2000;
    let rejected = (0..trials)
        .filter(|_| {
            let xs: Vec<f64> = (0..10).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect();
            stats::one_sample_t_test(&xs, 0.5).unwrap().p_two_sided < 0.05
        })
        .count();
    let rate = rejected as f64 / trials as f64;
    assert!((rate - 0.05).abs() <= 0.015, "rejection rate {rate}");
}

#[test]
fn replicate_subsets_are_distinct() {
    let (ds, _) = synth::generate(&SynthConfig::default()).expect("synth");
    let split = build_split(&ds, &ConceptSpec::new(Attribute::Gender, "female")).expect("split");
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    for r in 0..500 {
        let mut ids: Vec<String> = subsample_for_replicate(&split, 0.25, r).unwrap().into_iter().map(|e| e.id).collect();
        ids.sort();
        if !seen.insert(ids) {
            duplicates += 1;
        }
    }
    assert!(duplicates <= 5, "{duplicates} repeated subsets");
}

#[test]
fn recovered_direction_is_the_planted_one_under_strong_signal() {
    let mut world = SynthConfig::default();
    world.beta = 6.0;
    let (ds, truth) = synth::generate(&world).expect("synth");
    let split = build_split(&ds, &ConceptSpec::new(Attribute::Gender, "female")).expect("split");
    let cav = cavprobe::tcav::fit_split(&ds, &split, &TrainerConfig::default()).expect("fit");
    let err = synth::recovery_error(&cav, &truth, "gender=female").unwrap();
    assert!(err < 0.25, "recovery error {err}");
    assert!(cav.test_accuracy.unwrap() > 0.99);
}

fn records(points: &[Vec<f64>]) -> Vec<EmbeddingRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, v)| EmbeddingRecord {
            id: format!("r{i:03}"),
            vector: v.clone(),
            genre: "g".into(),
            gender: Some(if i % 2 == 0 { "male" } else { "female" }.into()),
            language: None,
        })
        .collect()
}

proptest! {
    #[test]
    fn projection_is_affine(
        w in prop::collection::vec(-5.0f64..5.0, 4),
        b in -5.0f64..5.0,
        x in prop::collection::vec(-5.0f64..5.0, 4),
        y in prop::collection::vec(-5.0f64..5.0, 4),
        t in -3.0f64..3.0,
    ) {
        let c = cav(w, b);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = c.project(&mixed).unwrap();
        let rhs = t * c.project(&x).unwrap() + (1.0 - t) * c.project(&y).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn ranking_ignores_positive_scale(
        w in prop::collection::vec(-3.0f64..3.0, 3),
        b in -3.0f64..3.0,
        exponent in -6i32..7,
        points in prop::collection::vec(prop::collection::vec(-4i32..4, 3), 2..30),
    ) {
        // Power-of-two scales are exact, so ties survive scaling.
        let scale = 2f64.powi(exponent);
        let points: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| *v as f64).collect()).collect();
        let recs = records(&points);
        let pool: Vec<&EmbeddingRecord> = recs.iter().collect();
        let base = debias::rank(&cav(w.clone(), b), &pool).unwrap();
        let scaled = debias::rank(&cav(w.iter().map(|v| v * scale).collect(), b * scale), &pool).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn adjust_endpoints(
        w1 in prop::collection::vec(-3.0f64..3.0, 3),
        w2 in prop::collection::vec(-3.0f64..3.0, 3),
        b1 in -1.0f64..1.0,
        b2 in -1.0f64..1.0,
    ) {
        prop_assume!(w1.iter().any(|v| v.abs() > 1e-3) && w2.iter().any(|v| v.abs() > 1e-3));
        let base = cav(w1.clone(), b1);
        let adj = cav(w2.clone(), b2);
        let start = debias::adjust(&base, &adj, 0.0, MixMode::Add).unwrap();
        prop_assert_eq!(start.w_adj, w1);
        prop_assert_eq!(start.b_adj, b1);
        let end = debias::adjust(&base, &adj, 1.0, MixMode::Subtract).unwrap();
        let neg: Vec<f64> = w2.iter().map(|v| -v).collect();
        prop_assert_eq!(end.w_adj, neg);
        prop_assert_eq!(end.b_adj, -b2);
    }

    #[test]
    fn bonferroni_is_monotone_and_clamped(p in 0.0f64..=1.0, m in 1usize..50) {
        let c = stats::bonferroni(p, m);
        prop_assert!(c >= p && c <= 1.0);
        prop_assert!(stats::bonferroni(p, m + 1) >= c);
    }
}
