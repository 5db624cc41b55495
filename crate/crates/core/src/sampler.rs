//! Genre-balanced, disjoint train/test splits for binary concepts.
//!
//! For every stratum (by default: genre) the positives are the records whose
//! concept attribute equals the positive value and the negatives are all other
//! records with the attribute present. Records with the attribute absent never
//! enter a split.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_CELL_CAP: usize = 50;

/// A binary concept over one metadata attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub attribute: Attribute,
    pub positive_value: String,
    pub cell_cap: usize,
    pub seed: u64,
    /// Attribute whose values define the balancing strata. Genre for
    /// demographic concepts; a genre concept is stratified by e.g. gender.
    #[serde(default = "default_stratify")]
    pub stratify_by: Attribute,
}

fn default_stratify() -> Attribute {
    Attribute::Genre
}

impl ConceptSpec {
    pub fn new(attribute: Attribute, positive_value: impl Into<String>) -> Self {
        let positive_value = positive_value.into();
        let stratify_by = if attribute == Attribute::Genre {
            Attribute::Gender
        } else {
            Attribute::Genre
        };
        ConceptSpec {
            name: format!("{attribute}={positive_value}"),
            attribute,
            positive_value,
            cell_cap: DEFAULT_CELL_CAP,
            seed: 42,
            stratify_by,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cell_cap(mut self, cap: usize) -> Self {
        self.cell_cap = cap;
        self
    }

    pub fn with_stratify_by(mut self, attribute: Attribute) -> Self {
        self.stratify_by = attribute;
        self
    }

    fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.cell_cap == 0 {
            return Err(Error::InvalidConfig("cell_cap must be at least 1".into()));
        }
        if self.attribute == self.stratify_by {
            return Err(Error::InvalidConfig(format!(
                "concept attribute `{}` cannot also be the stratification attribute",
                self.attribute
            )));
        }
        let known = ds
            .vocabulary(self.attribute)
            .is_some_and(|v| v.contains(&self.positive_value));
        if !known {
            return Err(Error::UnknownPositiveValue {
                attribute: self.attribute.to_string(),
                value: self.positive_value.clone(),
            });
        }
        Ok(())
    }
}

/// Parses `attribute=value`, e.g. `gender=female` or `language=pt`.
impl FromStr for ConceptSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (attr, value) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected attribute=value, got `{s}`")))?;
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::InvalidArgument(format!("empty concept value in `{s}`")));
        }
        Ok(ConceptSpec::new(attr.parse()?, value))
    }
}

/// One record's membership in a split side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    #[serde(with = "label01")]
    pub label: bool,
    /// Value of the stratification attribute (the genre, by default).
    pub genre: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub genre: String,
    #[serde(with = "label01")]
    pub label: bool,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSplit {
    pub concept: ConceptSpec,
    pub train: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
    pub train_cells: Vec<CellCount>,
    pub test_cells: Vec<CellCount>,
}

mod label01 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(label: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*label))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl ConceptSplit {
    /// Strata that have a nonempty test pool, sorted.
    pub fn test_genres(&self) -> Vec<String> {
        let mut genres: Vec<String> = self.test.iter().map(|e| e.genre.clone()).collect();
        genres.sort();
        genres.dedup();
        genres
    }

    pub fn test_pool<'a>(&'a self, genre: &'a str) -> impl Iterator<Item = &'a SplitEntry> + 'a {
        self.test.iter().filter(move |e| e.genre == genre)
    }

    /// The same split with every label inverted, e.g. turning a
    /// `gender=female` split into its male-vocal mirror.
    pub fn mirrored(&self, name: impl Into<String>) -> ConceptSplit {
        let flip = |entries: &[SplitEntry]| {
            entries
                .iter()
                .map(|e| SplitEntry {
                    label: !e.label,
                    ..e.clone()
                })
                .collect::<Vec<_>>()
        };
        let flip_cells = |cells: &[CellCount]| {
            cells
                .iter()
                .map(|c| CellCount {
                    label: !c.label,
                    ..c.clone()
                })
                .collect::<Vec<_>>()
        };
        let mut concept = self.concept.clone();
        concept.name = name.into();
        ConceptSplit {
            concept,
            train: flip(&self.train),
            test: flip(&self.test),
            train_cells: flip_cells(&self.train_cells),
            test_cells: flip_cells(&self.test_cells),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl fmt::Display for ConceptSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} train / {} test records",
            self.concept.name,
            self.train.len(),
            self.test.len()
        )
    }
}

/// Per-class training allocation for a stratum whose smaller class has `m`
/// members.
pub fn train_per_class(m: usize, cap: usize) -> usize {
    if m > cap {
        return cap;
    }
    let mut k = (m * 4) / 5;
    if k == m && m >= 2 {
        k -= 1;
    }
    k
}

/// `ceil(fraction * n)`, ignoring rounding noise in the product
/// (so `0.3 * 10` gives 3, not 4).
pub(crate) fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let k = (exact - exact.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Builds the balanced split for `concept` over `ds`.
pub fn build_split(ds: &Dataset, concept: &ConceptSpec) -> Result<ConceptSplit> {
    concept.validate(ds)?;
    let mut strata: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for rec in ds.records() {
        let (Some(value), Some(stratum)) =
            (rec.attribute(concept.attribute), rec.attribute(concept.stratify_by))
        else {
            continue;
        };
        let cell = strata.entry(stratum).or_default();
        if value == concept.positive_value {
            cell.0.push(&rec.id);
        } else {
            cell.1.push(&rec.id);
        }
    }

    let mut split = ConceptSplit {
        concept: concept.clone(),
        train: Vec::new(),
        test: Vec::new(),
        train_cells: Vec::new(),
        test_cells: Vec::new(),
    };
    for (stratum, (mut pos, mut neg)) in strata {
        let m = pos.len().min(neg.len());
        if m == 0 {
            continue;
        }
        let k = train_per_class(m, concept.cell_cap);
        let mut rng = seed::rng(seed::derive(
            concept.seed,
            &[seed::TAG_SPLIT, seed::fnv1a(stratum)],
        ));
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let t = (pos.len() - k).min(neg.len() - k);

        let entry = |id: &str, label: bool| SplitEntry {
            id: id.to_string(),
            label,
            genre: stratum.to_string(),
        };
        split.train.extend(pos[..k].iter().map(|id| entry(id, true)));
        split.train.extend(neg[..k].iter().map(|id| entry(id, false)));
        split.test.extend(pos[k..k + t].iter().map(|id| entry(id, true)));
        split.test.extend(neg[k..k + t].iter().map(|id| entry(id, false)));
        for label in [true, false] {
            if k > 0 {
                split.train_cells.push(CellCount {
                    genre: stratum.to_string(),
                    label,
                    count: k,
                });
            }
            split.test_cells.push(CellCount {
                genre: stratum.to_string(),
                label,
                count: t,
            });
        }
    }
    if split.train.is_empty() && split.test.is_empty() {
        return Err(Error::NoEligibleGenre(concept.name.clone()));
    }
    Ok(split)
}

/// Draws the balanced training subset used by one bootstrap replicate.
///
/// Per stratum, `ceil(fraction * cell)` positives and as many negatives are
/// drawn without replacement. The result depends only on the split, the
/// fraction and `replicate_index`.
pub fn subsample_for_replicate(
    split: &ConceptSplit,
    fraction: f64,
    replicate_index: u64,
) -> Result<Vec<SplitEntry>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut strata: BTreeMap<&str, (Vec<&SplitEntry>, Vec<&SplitEntry>)> = BTreeMap::new();
    for e in &split.train {
        let cell = strata.entry(e.genre.as_str()).or_default();
        if e.label {
            cell.0.push(e);
        } else {
            cell.1.push(e);
        }
    }
    let base = seed::derive(split.concept.seed, &[seed::TAG_REPLICATE, replicate_index]);
    let mut out = Vec::new();
    for (stratum, (mut pos, mut neg)) in strata {
        let size = pos.len().min(neg.len());
        let k = ceil_fraction(fraction, size);
        let mut rng = seed::rng(seed::mix(base, seed::fnv1a(stratum)));
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        out.extend(pos[..k].iter().map(|e| (*e).clone()));
        out.extend(neg[..k].iter().map(|e| (*e).clone()));
    }
    let positives = out.iter().filter(|e| e.label).count();
    if out.len() < 2 || positives == 0 || positives == out.len() {
        return Err(Error::SubsetTooSmall(format!(
            "replicate {replicate_index} of `{}` draws {} record(s) with {positives} positive",
            split.concept.name,
            out.len()
        )));
    }
    out.shuffle(&mut seed::rng(seed::mix(base, seed::TAG_ORDER)));
    Ok(out)
}
