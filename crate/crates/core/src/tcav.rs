//! Projection-based TCAV scores and the bootstrap replicate protocol.
//!
//! A sample aligns with a concept when its projection `wᵀx + b` is strictly
//! positive. The TCAV score of a pool is the aligned fraction. Each
//! replicate trains a CAV on a balanced subset of the training side, gates it
//! on the full held-out side, and scores every requested genre pool; the
//! per-genre score distributions are then tested against 0.5.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::probe::{self, Cav, LinearDecision, Reliability, TrainerConfig};
use crate::sampler::{self, ConceptSplit, SplitEntry};
use crate::stats;

/// Null expectation of the score on a label-balanced pool.
pub const NULL_SCORE: f64 = 0.5;

/// `wᵀx + b`, no sigmoid.
pub fn project(cav: &impl LinearDecision, x: &[f64]) -> Result<f64> {
    cav.project(x)
}

/// Fraction of `xs` with a strictly positive projection.
pub fn tcav_score<V: AsRef<[f64]>>(cav: &impl LinearDecision, xs: &[V]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let mut aligned = 0usize;
    for x in xs {
        if cav.project(x.as_ref())? > 0.0 {
            aligned += 1;
        }
    }
    Ok(aligned as f64 / xs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub replicates: usize,
    pub fraction: f64,
    pub alpha: f64,
    pub trainer: TrainerConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            replicates: 500,
            fraction: 0.25,
            alpha: 0.05,
            trainer: TrainerConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidConfig("fraction must lie in (0, 1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        self.trainer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
    Null,
}

/// Per (concept, genre) outcome of the replicate protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    #[serde(rename = "concept")]
    pub concept_name: String,
    pub genre: String,
    /// One score per reliable replicate, in replicate order.
    pub scores: Vec<f64>,
    pub n_reliable: usize,
    pub n_unreliable: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    #[serde(with = "signed_float")]
    pub t_statistic: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_bonferroni: Option<f64>,
    pub significant: bool,
    pub direction: Direction,
    /// Bonferroni family size used for `p_bonferroni` and the interval.
    pub m: usize,
    /// Zero-variance score distribution.
    pub degenerate: bool,
    /// The t-interval extends outside `[0, 1]`; bounds are reported unclamped.
    pub ci_outside_unit: bool,
}

/// Serialises infinite t statistics as the strings `"inf"` / `"-inf"`.
mod signed_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(x),
            Some(x) if *x > 0.0 => s.serialize_some("inf"),
            Some(_) => s.serialize_some("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}

/// Runs the t-test and corrected interval on one genre's score distribution.
pub fn summarize(
    concept_name: &str,
    genre: &str,
    scores: Vec<f64>,
    n_unreliable: usize,
    alpha: f64,
    m: usize,
) -> TcavResult {
    let n = scores.len();
    let mean = stats::mean(&scores);
    let mut result = TcavResult {
        concept_name: concept_name.to_string(),
        genre: genre.to_string(),
        n_reliable: n,
        n_unreliable,
        mean,
        std: None,
        ci_low: None,
        ci_high: None,
        t_statistic: None,
        p_raw: None,
        p_bonferroni: None,
        significant: false,
        direction: Direction::Null,
        m,
        degenerate: false,
        ci_outside_unit: false,
        scores,
    };
    let Ok(test) = stats::one_sample_t_test(&result.scores, NULL_SCORE) else {
        return result;
    };
    let p_bonf = stats::bonferroni(test.p_two_sided, m);
    result.std = Some(test.std);
    result.t_statistic = Some(test.t_statistic);
    result.p_raw = Some(test.p_two_sided);
    result.p_bonferroni = Some(p_bonf);
    match stats::corrected_ci(&result.scores, alpha, m) {
        Ok((lo, hi)) => {
            result.ci_low = Some(lo);
            result.ci_high = Some(hi);
        }
        Err(_) => {
            // Zero variance: the interval collapses to the mean.
            result.degenerate = true;
            result.ci_low = Some(mean);
            result.ci_high = Some(mean);
        }
    }
    result.ci_outside_unit = result.ci_low.is_some_and(|v| v < 0.0)
        || result.ci_high.is_some_and(|v| v > 1.0);
    result.significant = p_bonf < alpha;
    result.direction = match (result.significant, mean.partial_cmp(&NULL_SCORE)) {
        (true, Some(std::cmp::Ordering::Greater)) => Direction::Positive,
        (true, Some(std::cmp::Ordering::Less)) => Direction::Negative,
        _ => Direction::Null,
    };
    result
}

/// Diagnostics of one trained replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate_index: u64,
    pub test_accuracy: f64,
    pub reliable: bool,
    pub converged: bool,
}

/// Everything the protocol produced for one concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRun {
    #[serde(rename = "concept")]
    pub concept_name: String,
    pub genres: Vec<String>,
    pub results: Vec<TcavResult>,
    pub replicates: Vec<ReplicateSummary>,
}

impl ConceptRun {
    pub fn n_reliable(&self) -> usize {
        self.replicates.iter().filter(|r| r.reliable).count()
    }

    pub fn n_unreliable(&self) -> usize {
        self.replicates.len() - self.n_reliable()
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        let acc: Vec<f64> = self.replicates.iter().map(|r| r.test_accuracy).collect();
        stats::mean(&acc)
    }

    /// Score matrix with one row per reliable replicate and one column per genre.
    pub fn score_matrix(&self) -> Vec<(u64, Vec<f64>)> {
        let reliable: Vec<u64> = self
            .replicates
            .iter()
            .filter(|r| r.reliable)
            .map(|r| r.replicate_index)
            .collect();
        reliable
            .iter()
            .enumerate()
            .map(|(row, idx)| (*idx, self.results.iter().map(|r| r.scores[row]).collect()))
            .collect()
    }
}

fn lookup<'a>(ds: &'a Dataset, entries: &[SplitEntry]) -> Result<Vec<(&'a [f64], bool)>> {
    entries
        .iter()
        .map(|e| {
            ds.get(&e.id)
                .map(|r| (r.vector.as_slice(), e.label))
                .ok_or_else(|| Error::UnknownId(e.id.clone()))
        })
        .collect()
}

/// Fits one CAV on the whole training side of `split` and records its
/// accuracy on the test side.
pub fn fit_split(ds: &Dataset, split: &ConceptSplit, trainer: &TrainerConfig) -> Result<Cav> {
    let train = lookup(ds, &split.train)?;
    let mut cav = probe::fit(&train, trainer, &split.concept.name)?;
    cav.seed = Some(split.concept.seed);
    if !split.test.is_empty() {
        let test = lookup(ds, &split.test)?;
        cav.test_accuracy = Some(probe::evaluate_accuracy(&cav, &test)?);
    }
    Ok(cav)
}

struct ReplicateOutcome {
    summary: ReplicateSummary,
    scores: Option<Vec<f64>>,
}

/// Runs the bootstrap protocol for one concept split.
///
/// `family_size` is the Bonferroni `m` for the whole invocation (concepts ×
/// genres); pass `genres.len()` for a single-concept run. Replicates execute
/// on the current rayon pool; results do not depend on its width.
pub fn run_protocol(
    ds: &Dataset,
    split: &ConceptSplit,
    genres: &[String],
    config: &ProtocolConfig,
    family_size: usize,
) -> Result<ConceptRun> {
    config.validate()?;
    if genres.is_empty() {
        return Err(Error::InvalidArgument("no genres to score".into()));
    }
    if family_size == 0 {
        return Err(Error::InvalidArgument("family size must be positive".into()));
    }
    let name = &split.concept.name;
    let test = lookup(ds, &split.test)?;
    let pools: Vec<Vec<&[f64]>> = genres
        .iter()
        .map(|g| {
            let pool: Vec<&[f64]> = lookup(ds, &split.test_pool(g).cloned().collect::<Vec<_>>())?
                .into_iter()
                .map(|(x, _)| x)
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "genre `{g}` has no test records for `{name}`"
                )));
            }
            Ok(pool)
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<ReplicateOutcome> {
            let subset = sampler::subsample_for_replicate(split, config.fraction, r)?;
            let samples = lookup(ds, &subset)?;
            let mut cav = probe::fit(&samples, &config.trainer, name)?;
            cav.replicate_index = Some(r);
            cav.seed = Some(split.concept.seed);
            let test_accuracy = if test.is_empty() {
                0.0
            } else {
                probe::evaluate_accuracy(&cav, &test)?
            };
            cav.test_accuracy = (!test.is_empty()).then_some(test_accuracy);
            let reliable = probe::reliability_gate(&cav, &config.trainer) == Reliability::Reliable;
            let scores = if reliable {
                Some(
                    pools
                        .iter()
                        .map(|pool| tcav_score(&cav, pool))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(ReplicateOutcome {
                summary: ReplicateSummary {
                    replicate_index: r,
                    test_accuracy,
                    reliable,
                    converged: cav.converged,
                },
                scores,
            })
        })
        .collect::<Result<_>>()?;

    let n_unreliable = outcomes.iter().filter(|o| !o.summary.reliable).count();
    if n_unreliable == outcomes.len() {
        return Err(Error::AllReplicatesUnreliable(name.clone()));
    }
    let results = genres
        .iter()
        .enumerate()
        .map(|(gi, genre)| {
            let scores: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.scores.as_ref().map(|s| s[gi]))
                .collect();
            summarize(name, genre, scores, n_unreliable, config.alpha, family_size)
        })
        .collect();
    Ok(ConceptRun {
        concept_name: name.clone(),
        genres: genres.to_vec(),
        results,
        replicates: outcomes.into_iter().map(|o| o.summary).collect(),
    })
}

/// Which genres to score for each concept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GenreSelection {
    /// Every genre with a nonempty test pool in the concept's split.
    All,
    Named(Vec<String>),
}

impl GenreSelection {
    pub fn resolve(&self, split: &ConceptSplit) -> Vec<String> {
        match self {
            GenreSelection::All => split.test_genres(),
            GenreSelection::Named(g) => g.clone(),
        }
    }
}

/// Outcome of a multi-concept audit. Concepts whose replicates all fail the
/// gate are reported in `failures` while the others proceed.
#[derive(Debug)]
pub struct AuditRun {
    pub family_size: usize,
    pub runs: Vec<ConceptRun>,
    pub failures: Vec<(String, Error)>,
}

/// Runs the protocol for several concepts with one Bonferroni family spanning
/// every (concept, genre) test in the invocation.
pub fn run_audit(
    ds: &Dataset,
    splits: &[ConceptSplit],
    genres: &GenreSelection,
    config: &ProtocolConfig,
) -> Result<AuditRun> {
    let per_concept: Vec<Vec<String>> = splits.iter().map(|s| genres.resolve(s)).collect();
    let family_size: usize = per_concept.iter().map(Vec::len).sum();
    if family_size == 0 {
        return Err(Error::InvalidArgument("no (concept, genre) pairs to test".into()));
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (split, genres) in splits.iter().zip(&per_concept) {
        match run_protocol(ds, split, genres, config, family_size) {
            Ok(run) => runs.push(run),
            Err(e @ Error::AllReplicatesUnreliable(_)) => {
                log::warn!("{e}");
                failures.push((split.concept.name.clone(), e));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AuditRun {
        family_size,
        runs,
        failures,
    })
}
