//! Machine-readable audit reports and plot-ready CSV exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::debias::DebiasCurve;
use crate::error::{Error, Result};
use crate::stats;
use crate::tcav::{AuditRun, ConceptRun, Direction, TcavResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub seed: u64,
    /// Echo of every option that shaped the run.
    pub config: serde_json::Value,
    pub dataset_fingerprint: Option<String>,
    /// Seconds since the Unix epoch; absent for reproducible output.
    pub timestamp: Option<u64>,
    pub m: usize,
    pub alpha: f64,
}

impl RunMetadata {
    pub fn new(seed: u64, config: serde_json::Value, m: usize, alpha: f64, timestamp: bool) -> Self {
        let timestamp = timestamp.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            dataset_fingerprint: None,
            timestamp,
            m,
            alpha,
        }
    }
}

/// Replicate bookkeeping for one concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attrition {
    pub concept: String,
    pub replicates: usize,
    pub n_reliable: usize,
    pub n_unreliable: usize,
    pub mean_test_accuracy: Option<f64>,
    pub reliable_replicates: Vec<u64>,
    /// Set when the concept was dropped, e.g. because no replicate passed the gate.
    pub error: Option<String>,
}

impl Attrition {
    pub fn from_run(run: &ConceptRun) -> Self {
        Attrition {
            concept: run.concept_name.clone(),
            replicates: run.replicates.len(),
            n_reliable: run.n_reliable(),
            n_unreliable: run.n_unreliable(),
            mean_test_accuracy: Some(run.mean_test_accuracy()),
            reliable_replicates: run
                .replicates
                .iter()
                .filter(|r| r.reliable)
                .map(|r| r.replicate_index)
                .collect(),
            error: None,
        }
    }

    pub fn failed(concept: &str, replicates: usize, error: &Error) -> Self {
        Attrition {
            concept: concept.to_string(),
            replicates,
            n_reliable: 0,
            n_unreliable: replicates,
            mean_test_accuracy: None,
            reliable_replicates: Vec::new(),
            error: Some(error.to_string()),
        }
    }
}

/// A named pass/fail check, used by the self-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub run_metadata: RunMetadata,
    pub tcav: Vec<TcavResult>,
    pub attrition: Vec<Attrition>,
    pub curves: Vec<DebiasCurve>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckOutcome>,
}

impl AuditReport {
    pub fn new(run_metadata: RunMetadata) -> Self {
        AuditReport {
            schema_version: SCHEMA_VERSION,
            run_metadata,
            tcav: Vec::new(),
            attrition: Vec::new(),
            curves: Vec::new(),
            checks: Vec::new(),
        }
    }

    /// Builds a report from an audit, taking `m` from the audit itself.
    pub fn from_audit(mut run_metadata: RunMetadata, audit: &AuditRun, replicates: usize) -> Self {
        run_metadata.m = audit.family_size;
        let mut report = AuditReport::new(run_metadata);
        for run in &audit.runs {
            report.tcav.extend(run.results.iter().cloned());
            report.attrition.push(Attrition::from_run(run));
        }
        for (concept, err) in &audit.failures {
            report.attrition.push(Attrition::failed(concept, replicates, err));
        }
        report
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: AuditReport = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported report schema_version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Inconsistencies between stored flags and a recomputation from
    /// `p_raw`, `m` and `alpha`. Empty when the report is coherent.
    pub fn consistency_problems(&self) -> Vec<String> {
        let m = self.run_metadata.m;
        let alpha = self.run_metadata.alpha;
        let mut problems = Vec::new();
        for r in &self.tcav {
            let tag = format!("{}/{}", r.concept_name, r.genre);
            if r.m != m {
                problems.push(format!("{tag}: m = {} but run m = {m}", r.m));
            }
            problems.extend(
                row_problems(r.p_raw, r.p_bonferroni, r.significant, r.direction, r.mean, m, alpha)
                    .into_iter()
                    .map(|p| format!("{tag}: {p}")),
            );
            if !r.scores.is_empty() && stats::mean(&r.scores) != r.mean {
                problems.push(format!("{tag}: mean does not match scores"));
            }
            if let (Some(lo), Some(hi)) = (r.ci_low, r.ci_high) {
                if !(lo <= r.mean && r.mean <= hi) {
                    problems.push(format!("{tag}: interval excludes mean"));
                }
            }
        }
        problems
    }
}

fn row_problems(
    p_raw: Option<f64>,
    p_bonferroni: Option<f64>,
    significant: bool,
    direction: Direction,
    mean: f64,
    m: usize,
    alpha: f64,
) -> Vec<String> {
    let mut problems = Vec::new();
    let expected_sig = match (p_raw, p_bonferroni) {
        (Some(p), Some(pb)) => {
            if stats::bonferroni(p, m) != pb {
                problems.push(format!("p_bonferroni {pb} != min(1, {p}·{m})"));
            }
            pb < alpha
        }
        (None, None) => false,
        _ => {
            problems.push("p_raw and p_bonferroni must both be present or absent".into());
            false
        }
    };
    if significant != expected_sig {
        problems.push(format!("significant = {significant}, recomputed {expected_sig}"));
    }
    let expected_dir = match (expected_sig, mean > 0.5, mean < 0.5) {
        (true, true, _) => Direction::Positive,
        (true, _, true) => Direction::Negative,
        _ => Direction::Null,
    };
    if direction != expected_dir {
        problems.push(format!("direction {direction:?}, recomputed {expected_dir:?}"));
    }
    problems
}

/// File-system friendly form of a concept name (`gender=female` → `gender_female`).
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) if x == f64::NEG_INFINITY => "-inf".into(),
        Some(x) => x.to_string(),
    }
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::Positive => "positive",
        Direction::Negative => "negative",
        Direction::Null => "null",
    }
}

pub const TCAV_CSV_HEADER: &str =
    "genre,mean,std,ci_low,ci_high,t,p_raw,p_bonferroni,significant,direction,n_reliable";

/// Summary table for one concept.
pub fn tcav_csv(results: &[&TcavResult]) -> String {
    let mut out = format!("{TCAV_CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.genre,
            r.mean,
            opt(r.std),
            opt(r.ci_low),
            opt(r.ci_high),
            opt(r.t_statistic),
            opt(r.p_raw),
            opt(r.p_bonferroni),
            r.significant,
            direction_str(r.direction),
            r.n_reliable
        );
    }
    out
}

/// Raw score matrix: one row per reliable replicate, one column per genre.
pub fn scores_csv(results: &[&TcavResult], replicate_ids: &[u64]) -> String {
    let mut out = String::from("replicate");
    for r in results {
        out.push(',');
        out.push_str(&r.genre);
    }
    out.push('\n');
    let rows = results.iter().map(|r| r.scores.len()).max().unwrap_or(0);
    for row in 0..rows {
        match replicate_ids.get(row) {
            Some(id) => out.push_str(&id.to_string()),
            None => out.push_str(&row.to_string()),
        }
        for r in results {
            out.push(',');
            if let Some(s) = r.scores.get(row) {
                out.push_str(&s.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Writes the JSON report and, when `csv_dir` is given, `tcav_<concept>.csv`,
/// `scores_<concept>.csv` and one `curve_<n>_<base>_<adjustment>.csv` per curve.
/// Returns the paths written.
pub fn emit(report: &AuditReport, json_path: &Path, csv_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let write = |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    let mut written = Vec::new();
    write(json_path, &report.to_json()?)?;
    written.push(json_path.to_path_buf());
    let Some(dir) = csv_dir else {
        return Ok(written);
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_concept: BTreeMap<&str, Vec<&TcavResult>> = BTreeMap::new();
    for r in &report.tcav {
        by_concept.entry(r.concept_name.as_str()).or_default().push(r);
    }
    for (concept, results) in &by_concept {
        let stem = file_stem(concept);
        let path = dir.join(format!("tcav_{stem}.csv"));
        write(&path, &tcav_csv(results))?;
        written.push(path);
        let ids = report
            .attrition
            .iter()
            .find(|a| a.concept == *concept)
            .map(|a| a.reliable_replicates.as_slice())
            .unwrap_or(&[]);
        let path = dir.join(format!("scores_{stem}.csv"));
        write(&path, &scores_csv(results, ids))?;
        written.push(path);
    }
    for (i, curve) in report.curves.iter().enumerate() {
        let path = dir.join(format!(
            "curve_{i}_{}_{}.csv",
            file_stem(&curve.base_concept),
            file_stem(&curve.adjustment_concept)
        ));
        write(&path, &curve.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

/// Checks a `tcav_<concept>.csv` file against itself: `p_bonferroni` must be
/// `min(1, p_raw·m)` and the flags must follow from it.
pub fn verify_tcav_csv(path: &Path, m: usize, alpha: f64) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::malformed(path, 1, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::malformed(path, 1, 0, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TCAV_CSV_HEADER {
        return Err(Error::malformed(path, 1, 0, "unexpected header"));
    }
    let parse_opt = |s: &str, line: u64| -> Result<Option<f64>> {
        match s {
            "" => Ok(None),
            "inf" => Ok(Some(f64::INFINITY)),
            "-inf" => Ok(Some(f64::NEG_INFINITY)),
            v => v
                .parse()
                .map(Some)
                .map_err(|_| Error::malformed(path, line, 0, format!("bad number `{v}`"))),
        }
    };
    let mut problems = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::malformed(path, line, 0, e.to_string()))?;
        let mean = parse_opt(&row[1], line)?
            .ok_or_else(|| Error::malformed(path, line, 0, "missing mean"))?;
        let p_raw = parse_opt(&row[6], line)?;
        let p_bonf = parse_opt(&row[7], line)?;
        let significant = match &row[8] {
            "true" => true,
            "false" => false,
            v => return Err(Error::malformed(path, line, 0, format!("bad flag `{v}`"))),
        };
        let direction = match &row[9] {
            "positive" => Direction::Positive,
            "negative" => Direction::Negative,
            "null" => Direction::Null,
            v => return Err(Error::malformed(path, line, 0, format!("bad direction `{v}`"))),
        };
        problems.extend(
            row_problems(p_raw, p_bonf, significant, direction, mean, m, alpha)
                .into_iter()
                .map(|p| format!("{}: {p}", &row[0])),
        );
    }
    Ok(problems)
}
