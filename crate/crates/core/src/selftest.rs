//! End-to-end check on synthetic worlds with known answers: generate, split,
//! run the replicate protocol, sweep the debiaser, and compare every stage
//! with its ground truth.

use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset, EmbeddingRecord};
use crate::debias::{self, MixMode, SweepTarget};
use crate::error::Result;
use crate::probe::TrainerConfig;
use crate::report::{AuditReport, CheckOutcome, RunMetadata};
use crate::sampler::{build_split, ConceptSpec};
use crate::stats;
use crate::synth::{self, SynthConfig};
use crate::tcav::{self, Direction, ProtocolConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestConfig {
    pub seed: u64,
    pub dimension: usize,
    pub count_per_label: usize,
    pub replicates: usize,
    /// Genre shift along the female direction in the audit world.
    pub plant_strength: f64,
    /// Genre shift along the male direction for hip-hop in the debias world.
    pub debias_strength: f64,
    pub lambda_grid: String,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            seed: 42,
            dimension: 64,
            count_per_label: 100,
            replicates: 100,
            plant_strength: 3.0,
            debias_strength: 10.0,
            lambda_grid: "0:1:0.05".into(),
        }
    }
}

const PLANTED_GENRE: &str = "rock";
const FEMALE: &str = "gender=female";

fn check(checks: &mut Vec<CheckOutcome>, name: &str, passed: bool, detail: String) {
    checks.push(CheckOutcome {
        name: name.into(),
        passed,
        detail,
    });
}

fn world(cfg: &SelftestConfig) -> SynthConfig {
    let mut world = SynthConfig::default().with_seed(cfg.seed);
    world.dimension = cfg.dimension;
    for g in &mut world.genres {
        g.count_per_label = cfg.count_per_label;
    }
    world
}

/// Runs the full pipeline and returns a report whose `checks` say what
/// passed. Only infrastructure failures surface as `Err`.
pub fn run(cfg: &SelftestConfig, timestamp: bool) -> Result<AuditReport> {
    let mut checks = Vec::new();
    let trainer = TrainerConfig::default();

    // Special functions against reference values.
    let t = stats::student_t_cdf(1.812, 10);
    check(
        &mut checks,
        "t_cdf_reference",
        (t - 0.949_962_368_967_076_4).abs() <= 1e-8,
        format!("F(1.812; 10) = {t}"),
    );
    let cauchy = stats::student_t_cdf(2.0, 1);
    let exact = 0.5 + 2.0_f64.atan() / std::f64::consts::PI;
    check(
        &mut checks,
        "t_cdf_cauchy",
        (cauchy - exact).abs() <= 1e-12,
        format!("F(2; 1) = {cauchy}, closed form {exact}"),
    );

    // Null world: probe quality against the known direction.
    let null_world = world(cfg);
    let (null_ds, truth) = synth::generate(&null_world)?;
    let (again, _) = synth::generate(&null_world)?;
    check(
        &mut checks,
        "synth_deterministic",
        null_ds.records() == again.records(),
        format!("{} records, fingerprint {}", null_ds.len(), &null_ds.fingerprint()[..16]),
    );
    let dirs: Vec<&Vec<f64>> = truth.concept_directions.values().collect();
    let mut cross: f64 = 0.0;
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[i + 1..] {
            cross = cross.max(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>().abs());
        }
    }
    check(&mut checks, "directions_orthogonal", cross <= 1e-10, format!("max |di.dj| = {cross:e}"));
    let spec = ConceptSpec::new(Attribute::Gender, "female").with_seed(cfg.seed);
    let null_split = build_split(&null_ds, &spec)?;
    let full = tcav::fit_split(&null_ds, &null_split, &trainer)?;
    let acc = full.test_accuracy.unwrap_or(0.0);
    check(&mut checks, "cav_test_accuracy", acc >= 0.9, format!("test accuracy {acc:.4}"));
    let err = synth::recovery_error(&full, &truth, FEMALE)?;
    // A weakly regularised fit on near-separable data tilts away from the
    // class-mean direction, so this is a sanity bound (cos ≥ 0.75) only.
    check(&mut checks, "cav_recovery", err <= 0.25, format!("recovery error {err:.4}"));

    // Audit world: one genre shifted toward the female direction.
    let audit_world = world(cfg).with_plant(PLANTED_GENRE, FEMALE, cfg.plant_strength);
    let (ds, _) = synth::generate(&audit_world)?;
    let split = build_split(&ds, &spec)?;

    let protocol = ProtocolConfig {
        replicates: cfg.replicates,
        ..ProtocolConfig::default()
    };
    let genres = split.test_genres();
    let run = tcav::run_protocol(&ds, &split, &genres, &protocol, genres.len())?;
    check(
        &mut checks,
        "replicate_accounting",
        run.n_reliable() + run.n_unreliable() == cfg.replicates,
        format!("{} reliable, {} unreliable", run.n_reliable(), run.n_unreliable()),
    );
    let planted = run.results.iter().find(|r| r.genre == PLANTED_GENRE);
    let others_max = run
        .results
        .iter()
        .filter(|r| r.genre != PLANTED_GENRE)
        .map(|r| r.mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let detected = planted.is_some_and(|p| {
        p.direction == Direction::Positive && p.mean > others_max
    });
    check(
        &mut checks,
        "planted_genre_detected",
        detected,
        format!(
            "{PLANTED_GENRE} mean {:.4}, highest other mean {others_max:.4}",
            planted.map_or(f64::NAN, |p| p.mean)
        ),
    );

    // Debias world: hip-hop shifted toward the male direction.
    let debias_world = world(cfg).with_plant("hiphop", FEMALE, -cfg.debias_strength);
    let (dds, _) = synth::generate(&debias_world)?;
    let genre_split = build_split(&dds, &ConceptSpec::new(Attribute::Genre, "hiphop").with_seed(cfg.seed))?;
    let female_split = build_split(&dds, &ConceptSpec::new(Attribute::Gender, "female").with_seed(cfg.seed))?;
    let male_split = female_split.mirrored("gender=male");
    let hiphop = tcav::fit_split(&dds, &genre_split, &trainer)?;
    let female = tcav::fit_split(&dds, &female_split, &trainer)?;
    let male = tcav::fit_split(&dds, &male_split, &trainer)?;
    let pool: Vec<&EmbeddingRecord> = dds.records().iter().filter(|r| r.genre == "hiphop").collect();
    let lambdas = debias::parse_lambda_grid(&cfg.lambda_grid)?;
    let target = SweepTarget {
        attribute: Attribute::Gender,
        value: "male",
        top_fraction: 0.5,
    };
    let add = debias::sweep(&hiphop, &female, MixMode::Add, &pool, &dds, &lambdas, &target, false)?;
    let sub = debias::sweep(&hiphop, &male, MixMode::Subtract, &pool, &dds, &lambdas, &target, false)?;
    curve_checks(&mut checks, &add, &sub);

    let mut report = AuditReport::new(RunMetadata::new(
        cfg.seed,
        serde_json::to_value(cfg)?,
        genres.len(),
        protocol.alpha,
        timestamp,
    ));
    report.run_metadata.dataset_fingerprint = Some(fingerprints(&[&ds, &dds]));
    report.tcav = run.results.clone();
    report.attrition.push(crate::report::Attrition::from_run(&run));
    let consistent = report.consistency_problems();
    check(
        &mut checks,
        "report_consistent",
        consistent.is_empty(),
        if consistent.is_empty() { "ok".into() } else { consistent.join("; ") },
    );
    report.curves = vec![add, sub];
    report.checks = checks;
    Ok(report)
}

fn curve_checks(checks: &mut Vec<CheckOutcome>, add: &debias::DebiasCurve, sub: &debias::DebiasCurve) {
    let r = &add.ratios;
    let first = r[0];
    let last = r[r.len() - 1];
    check(checks, "debias_start", first >= 0.9, format!("ratio at λ=0 is {first:.3}"));
    check(checks, "debias_end", last <= 0.55, format!("ratio at λ=1 is {last:.3}"));
    let rises: Vec<String> = r
        .windows(2)
        .zip(&add.lambdas[1..])
        .filter(|(w, _)| w[1] > w[0])
        .map(|(w, l)| format!("λ={l}: {} → {}", w[0], w[1]))
        .collect();
    check(
        checks,
        "debias_monotone",
        rises.is_empty(),
        if rises.is_empty() { "non-increasing".into() } else { rises.join("; ") },
    );
    let gap = r
        .iter()
        .zip(&sub.ratios)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(checks, "debias_add_subtract_agree", gap <= 0.1, format!("max gap {gap:.3}"));
}

fn fingerprints(sets: &[&Dataset]) -> String {
    sets.iter().map(|d| d.fingerprint()).collect::<Vec<_>>().join("+")
}

pub fn all_passed(report: &AuditReport) -> bool {
    report.checks.iter().all(|c| c.passed)
}
