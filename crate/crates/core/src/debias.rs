//! Post-hoc debiasing by concept-vector interpolation, and the ranking
//! experiment that measures its effect.
//!
//! An adjusted CAV mixes a base direction (a genre CAV) with a demographic
//! concept direction: `(1 - λ)·base + λ·adjustment` in add mode, or
//! `(1 - λ)·base - λ·adjustment` in subtract mode. The intercept is mixed
//! with the same weights.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::probe::{Cav, LinearDecision};
use crate::sampler::ceil_fraction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    #[serde(alias = "add_concept")]
    Add,
    #[serde(alias = "subtract_concept")]
    Subtract,
}

impl std::str::FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "add_concept" => Ok(MixMode::Add),
            "subtract" | "subtract_concept" => Ok(MixMode::Subtract),
            other => Err(Error::InvalidArgument(format!("unknown mix mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustedCav {
    pub base: Cav,
    pub adjustment: Cav,
    pub lambda: f64,
    pub mode: MixMode,
    /// Both inputs were scaled to unit `‖w‖` before mixing.
    pub normalized: bool,
    pub w_adj: Vec<f64>,
    pub b_adj: f64,
}

impl LinearDecision for AdjustedCav {
    fn weights(&self) -> &[f64] {
        &self.w_adj
    }

    fn bias(&self) -> f64 {
        self.b_adj
    }
}

/// Mixes `adjustment` into `base` with weight `lambda`. The raw CAVs are
/// combined without renormalisation.
pub fn adjust(base: &Cav, adjustment: &Cav, lambda: f64, mode: MixMode) -> Result<AdjustedCav> {
    adjust_with(base, adjustment, lambda, mode, false)
}

/// As [`adjust`], optionally rescaling each CAV to unit weight norm first.
pub fn adjust_with(
    base: &Cav,
    adjustment: &Cav,
    lambda: f64,
    mode: MixMode,
    normalize: bool,
) -> Result<AdjustedCav> {
    if base.w.len() != adjustment.w.len() {
        return Err(Error::DimensionMismatch {
            id: adjustment.concept_name.clone(),
            expected: base.w.len(),
            found: adjustment.w.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let unit = |c: &Cav| -> Result<(Vec<f64>, f64)> {
        if !normalize {
            return Ok((c.w.clone(), c.b));
        }
        let norm = c.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok((c.w.iter().map(|v| v / norm).collect(), c.b / norm))
    };
    let (wb, bb) = unit(base)?;
    let (wa, ba) = unit(adjustment)?;
    let sign = match mode {
        MixMode::Add => 1.0,
        MixMode::Subtract => -1.0,
    };
    let (w_adj, b_adj) = if lambda == 0.0 {
        (wb, bb)
    } else {
        let keep = 1.0 - lambda;
        let mix = sign * lambda;
        (
            wb.iter().zip(&wa).map(|(b, a)| keep * b + mix * a).collect(),
            keep * bb + mix * ba,
        )
    };
    Ok(AdjustedCav {
        base: base.clone(),
        adjustment: adjustment.clone(),
        lambda,
        mode,
        normalized: normalize,
        w_adj,
        b_adj,
    })
}

/// Ids of `pool` by descending projection; ties go to the smaller id.
pub fn rank(cav: &impl LinearDecision, pool: &[&EmbeddingRecord]) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let mut scored = Vec::with_capacity(pool.len());
    for rec in pool {
        let p = cav.project(&rec.vector).map_err(|e| match e {
            Error::DimensionMismatch { expected, found, .. } => Error::DimensionMismatch {
                id: rec.id.clone(),
                expected,
                found,
            },
            other => other,
        })?;
        scored.push((p, rec.id.as_str()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

/// Share of the top `ceil(top_fraction · N)` ranked ids whose `attribute`
/// equals `value`.
pub fn demographic_ratio(
    ranking: &[String],
    ds: &Dataset,
    attribute: Attribute,
    value: &str,
    top_fraction: f64,
) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    if ranking.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let mut matches = Vec::with_capacity(ranking.len());
    for id in ranking {
        let rec = ds.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        let v = rec.attribute(attribute).ok_or_else(|| Error::MissingAttribute {
            id: id.clone(),
            attribute: attribute.to_string(),
        })?;
        matches.push(v == value);
    }
    let k = ceil_fraction(top_fraction, ranking.len()).max(1);
    let hits = matches[..k].iter().filter(|m| **m).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasCurve {
    pub base_concept: String,
    pub adjustment_concept: String,
    pub mode: MixMode,
    pub lambdas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub top_fraction: f64,
    pub attribute: Attribute,
    pub attribute_value_tracked: String,
}

impl DebiasCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,ratio\n");
        for (l, r) in self.lambdas.iter().zip(&self.ratios) {
            let _ = writeln!(out, "{l},{r}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// What to track in a sweep: the attribute value whose share among the
/// top-ranked records is measured.
#[derive(Clone, Debug)]
pub struct SweepTarget<'a> {
    pub attribute: Attribute,
    pub value: &'a str,
    pub top_fraction: f64,
}

/// Evaluates the tracked ratio under the adjusted ranking at each λ.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    base: &Cav,
    adjustment: &Cav,
    mode: MixMode,
    pool: &[&EmbeddingRecord],
    ds: &Dataset,
    lambdas: &[f64],
    target: &SweepTarget<'_>,
    normalize: bool,
) -> Result<DebiasCurve> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("lambdas must be strictly increasing".into()));
    }
    let ratios = lambdas
        .par_iter()
        .map(|&lambda| {
            let adjusted = adjust_with(base, adjustment, lambda, mode, normalize)?;
            let ranking = rank(&adjusted, pool)?;
            demographic_ratio(&ranking, ds, target.attribute, target.value, target.top_fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DebiasCurve {
        base_concept: base.concept_name.clone(),
        adjustment_concept: adjustment.concept_name.clone(),
        mode,
        lambdas: lambdas.to_vec(),
        ratios,
        top_fraction: target.top_fraction,
        attribute: target.attribute,
        attribute_value_tracked: target.value.to_string(),
    })
}

/// Parses `start:stop:step` (inclusive of `stop`) or a comma list.
pub fn parse_lambda_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad lambda grid `{spec}`"));
    let grid: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step).round() as usize;
        (0..=n)
            .map(|i| if i == n { stop } else { start + i as f64 * step })
            .collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::LambdaOutOfRange(*l));
    }
    Ok(grid)
}
