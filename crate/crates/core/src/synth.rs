//! Synthetic embedding worlds with known concept geometry.
//!
//! Every record of genre `g` is
//!
//! ```text
//! x = μ_g + Σ_c ỹ_c·β·d_c + Σ_{planted (g,c)} shift_{g,c} + ε
//! ```
//!
//! where `ỹ_c = ±1` is the record's label for concept `c`, `d_c` a unit
//! concept direction, `μ_g` a genre offset orthogonal to every `d_c`, and `ε`
//! isotropic Gaussian noise. A plant of strength `s` on `(g, c)` moves every
//! member of `g` by `s·d_c` ([`PlantMode::GenreShift`]), or pushes the two
//! label groups of `g` apart by `±s·d_c` ([`PlantMode::LabelSpread`]).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::probe::LinearDecision;
use crate::seed;

const TAG_DIRECTION: u64 = 0x4449_52;
const TAG_OFFSET: u64 = 0x4f46_46;
const TAG_LABEL: u64 = 0x4c42_4c;
const TAG_NOISE: u64 = 0x4e4f_49;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGenre {
    pub name: String,
    /// Records per label value, for every concept.
    pub count_per_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConcept {
    pub attribute: Attribute,
    pub positive_value: String,
    pub negative_value: String,
    pub direction_seed: u64,
}

impl SynthConcept {
    pub fn name(&self) -> String {
        format!("{}={}", self.attribute, self.positive_value)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantMode {
    #[default]
    GenreShift,
    LabelSpread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub genre: String,
    /// Concept name in `attribute=value` form.
    pub concept: String,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dimension: usize,
    pub genres: Vec<SynthGenre>,
    pub concepts: Vec<SynthConcept>,
    pub genre_offsets_seed: u64,
    /// Euclidean norm of every genre offset `μ_g`.
    pub genre_offset_norm: f64,
    pub noise_sigma: f64,
    pub beta: f64,
    pub plant: Vec<Plant>,
    pub plant_mode: PlantMode,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dimension: 64,
            genres: ["rock", "pop", "hiphop", "jazz"]
                .iter()
                .map(|g| SynthGenre {
                    name: (*g).into(),
                    count_per_label: 100,
                })
                .collect(),
            concepts: vec![
                SynthConcept {
                    attribute: Attribute::Gender,
                    positive_value: "female".into(),
                    negative_value: "male".into(),
                    direction_seed: 1,
                },
                SynthConcept {
                    attribute: Attribute::Language,
                    positive_value: "pt".into(),
                    negative_value: "en".into(),
                    direction_seed: 2,
                },
            ],
            genre_offsets_seed: 3,
            genre_offset_norm: 3.0,
            noise_sigma: 1.0,
            beta: 2.0,
            plant: Vec::new(),
            plant_mode: PlantMode::GenreShift,
            master_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(mut self, master_seed: u64) -> Self {
        self.master_seed = master_seed;
        self
    }

    pub fn with_plant(mut self, genre: &str, concept: &str, strength: f64) -> Self {
        self.plant.push(Plant {
            genre: genre.into(),
            concept: concept.into(),
            strength,
        });
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: SynthConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dimension == 0 {
            return bad("dimension must be positive".into());
        }
        if self.genres.is_empty() {
            return bad("at least one genre is required".into());
        }
        if self.concepts.is_empty() {
            return bad("at least one concept is required".into());
        }
        if self.concepts.len() >= self.dimension {
            return bad(format!(
                "{} concepts need more than {} dimensions",
                self.concepts.len(),
                self.dimension
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.genre_offset_norm >= 0.0 && self.genre_offset_norm.is_finite()) {
            return bad(format!("genre_offset_norm must be non-negative, got {}", self.genre_offset_norm));
        }
        let mut names = BTreeSet::new();
        for g in &self.genres {
            if g.name.is_empty() || !names.insert(g.name.as_str()) {
                return bad(format!("genre name `{}` is empty or repeated", g.name));
            }
            if g.count_per_label < 2 {
                return bad(format!("genre `{}` needs at least 2 records per label", g.name));
            }
        }
        let mut attributes = BTreeSet::new();
        for c in &self.concepts {
            if c.attribute == Attribute::Genre {
                return bad("genre is carried by the genre list, not a concept".into());
            }
            if !attributes.insert(c.attribute) {
                return bad(format!("attribute `{}` used by two concepts", c.attribute));
            }
            if c.positive_value.is_empty() || c.positive_value == c.negative_value {
                return bad(format!("concept `{}` needs two distinct values", c.name()));
            }
        }
        let concept_names: BTreeSet<String> = self.concepts.iter().map(SynthConcept::name).collect();
        for p in &self.plant {
            if !names.contains(p.genre.as_str()) {
                return bad(format!("plant names unknown genre `{}`", p.genre));
            }
            if !concept_names.contains(&p.concept) {
                return bad(format!("plant names unknown concept `{}`", p.concept));
            }
            if !p.strength.is_finite() {
                return bad("plant strength must be finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantTruth {
    pub genre: String,
    pub concept: String,
    pub strength: f64,
    /// `1`, `-1` or `0`.
    pub sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub concept_directions: BTreeMap<String, Vec<f64>>,
    pub genre_offsets: BTreeMap<String, Vec<f64>>,
    pub plants: Vec<PlantTruth>,
    pub plant_mode: PlantMode,
    pub beta: f64,
    pub noise_sigma: f64,
}

impl GroundTruth {
    pub fn direction(&self, concept: &str) -> Result<&[f64]> {
        self.concept_directions
            .get(concept)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for concept `{concept}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components of `v` along the orthonormal `basis`, twice for
/// numerical safety.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for u in basis {
            let c = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
        }
    }
}

fn unit_direction(seed_value: u64, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(seed_value, &[TAG_DIRECTION]));
    loop {
        let mut v = gaussian_vector(&mut rng, dim);
        orthogonalize(&mut v, basis);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Builds the dataset and its ground truth. Identical configs give
/// bit-identical output.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let dim = config.dimension;

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut directions = BTreeMap::new();
    for c in &config.concepts {
        let d = unit_direction(c.direction_seed, dim, &basis);
        directions.insert(c.name(), d.clone());
        basis.push(d);
    }

    let mut offsets = BTreeMap::new();
    let mut offset_rng = seed::rng(seed::derive(config.genre_offsets_seed, &[TAG_OFFSET]));
    for g in &config.genres {
        let mut v = gaussian_vector(&mut offset_rng, dim);
        orthogonalize(&mut v, &basis);
        let n = norm(&v);
        let scale = if n > 0.0 { config.genre_offset_norm / n } else { 0.0 };
        v.iter_mut().for_each(|x| *x *= scale);
        offsets.insert(g.name.clone(), v);
    }

    let mut records = Vec::new();
    for g in &config.genres {
        let size = 2 * g.count_per_label;
        let genre_key = seed::fnv1a(&g.name);
        let labels: Vec<Vec<bool>> = config
            .concepts
            .iter()
            .map(|c| {
                let mut l: Vec<bool> = (0..size).map(|i| i < g.count_per_label).collect();
                let mut rng = seed::rng(seed::derive(
                    config.master_seed,
                    &[TAG_LABEL, genre_key, seed::fnv1a(&c.name())],
                ));
                l.shuffle(&mut rng);
                l
            })
            .collect();
        let mut noise_rng = seed::rng(seed::derive(config.master_seed, &[TAG_NOISE, genre_key]));
        let mu = &offsets[&g.name];
        for i in 0..size {
            let mut x: Vec<f64> = gaussian_vector(&mut noise_rng, dim)
                .into_iter()
                .zip(mu)
                .map(|(e, m)| m + config.noise_sigma * e)
                .collect();
            let mut gender = None;
            let mut language = None;
            for (c, lab) in config.concepts.iter().zip(&labels) {
                let positive = lab[i];
                let sign = if positive { 1.0 } else { -1.0 };
                let name = c.name();
                let mut shift = sign * config.beta;
                for p in config.plant.iter().filter(|p| p.genre == g.name && p.concept == name) {
                    shift += match config.plant_mode {
                        PlantMode::GenreShift => p.strength,
                        PlantMode::LabelSpread => sign * p.strength,
                    };
                }
                let d = &directions[&name];
                x.iter_mut().zip(d).for_each(|(xi, di)| *xi += shift * di);
                let value = if positive { &c.positive_value } else { &c.negative_value };
                match c.attribute {
                    Attribute::Gender => gender = Some(value.clone()),
                    Attribute::Language => language = Some(value.clone()),
                    Attribute::Genre => unreachable!("rejected by validate"),
                }
            }
            records.push(EmbeddingRecord {
                id: format!("{}-{:05}", g.name, i),
                vector: x,
                genre: g.name.clone(),
                gender,
                language,
            });
        }
    }

    let plants = config
        .plant
        .iter()
        .map(|p| PlantTruth {
            genre: p.genre.clone(),
            concept: p.concept.clone(),
            strength: p.strength,
            sign: if p.strength > 0.0 {
                1
            } else if p.strength < 0.0 {
                -1
            } else {
                0
            },
        })
        .collect();
    let truth = GroundTruth {
        concept_directions: directions,
        genre_offsets: offsets,
        plants,
        plant_mode: config.plant_mode,
        beta: config.beta,
        noise_sigma: config.noise_sigma,
    };
    Ok((Dataset::new(records)?, truth))
}

/// `1 − |wᵀd| / ‖w‖` for the unit ground-truth direction `d` of `concept`.
pub fn recovery_error(cav: &impl LinearDecision, truth: &GroundTruth, concept: &str) -> Result<f64> {
    let d = truth.direction(concept)?;
    let w = cav.weights();
    if w.len() != d.len() {
        return Err(Error::DimensionMismatch {
            id: concept.to_string(),
            expected: d.len(),
            found: w.len(),
        });
    }
    let n = norm(w);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(1.0 - dot(w, d).abs() / (n * norm(d)))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Raw(Vec<f64>);

    impl LinearDecision for Raw {
        fn weights(&self) -> &[f64] {
            &self.0
        }
        fn bias(&self) -> f64 {
            0.0
        }
    }

    fn small() -> SynthConfig {
        SynthConfig {
            dimension: 8,
            genres: vec![
                SynthGenre { name: "a".into(), count_per_label: 5 },
                SynthGenre { name: "b".into(), count_per_label: 3 },
            ],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let (d1, t1) = generate(&small()).unwrap();
        let (d2, t2) = generate(&small()).unwrap();
        assert_eq!(d1.records(), d2.records());
        assert_eq!(t1, t2);
        assert_eq!(d1.len(), 16);
        assert_eq!(d1.dimension(), 8);
        let females = d1
            .records()
            .iter()
            .filter(|r| r.genre == "a" && r.gender.as_deref() == Some("female"))
            .count();
        assert_eq!(females, 5);
        let (d3, _) = generate(&small().with_seed(43)).unwrap();
        assert_ne!(d1.records(), d3.records());
    }

    #[test]
    fn directions_are_orthonormal() {
        let mut cfg = small();
        cfg.concepts[1].direction_seed = cfg.concepts[0].direction_seed;
        let (_, truth) = generate(&cfg).unwrap();
        let dirs: Vec<&Vec<f64>> = truth.concept_directions.values().collect();
        assert!((norm(dirs[0]) - 1.0).abs() < 1e-12);
        assert!((norm(dirs[1]) - 1.0).abs() < 1e-12);
        assert!(dot(dirs[0], dirs[1]).abs() <= 1e-10);
        for mu in truth.genre_offsets.values() {
            assert!((norm(mu) - 3.0).abs() < 1e-9);
            for d in &dirs {
                assert!(dot(mu, d).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn genre_shift_moves_whole_genre() {
        let base = small();
        let planted = small().with_plant("a", "gender=female", 3.0);
        let (d0, truth) = generate(&base).unwrap();
        let (d1, _) = generate(&planted).unwrap();
        let d = truth.direction("gender=female").unwrap();
        for (r0, r1) in d0.records().iter().zip(d1.records()) {
            let delta: Vec<f64> = r1.vector.iter().zip(&r0.vector).map(|(a, b)| a - b).collect();
            let expected = if r0.genre == "a" { 3.0 } else { 0.0 };
            assert!((dot(&delta, d) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn label_spread_pushes_labels_apart() {
        let mut cfg = small().with_plant("a", "gender=female", 1.5);
        cfg.plant_mode = PlantMode::LabelSpread;
        let (d1, truth) = generate(&cfg).unwrap();
        let (d0, _) = generate(&small()).unwrap();
        let d = truth.direction("gender=female").unwrap();
        for (r0, r1) in d0.records().iter().zip(d1.records()) {
            let delta: Vec<f64> = r1.vector.iter().zip(&r0.vector).map(|(a, b)| a - b).collect();
            let expected = match (r0.genre.as_str(), r0.gender.as_deref()) {
                ("a", Some("female")) => 1.5,
                ("a", _) => -1.5,
                _ => 0.0,
            };
            assert!((dot(&delta, d) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.genres[0].count_per_label = 1;
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
        let c = small().with_plant("zzz", "gender=female", 1.0);
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
        let mut c = small();
        c.noise_sigma = 0.0;
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
        let mut c = small();
        c.dimension = 2;
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn recovery_error_examples() {
        let (_, truth) = generate(&small()).unwrap();
        let d = truth.direction("gender=female").unwrap().to_vec();
        assert!(recovery_error(&Raw(d.clone()), &truth, "gender=female").unwrap() < 1e-12);
        let neg: Vec<f64> = d.iter().map(|x| -2.0 * x).collect();
        assert!(recovery_error(&Raw(neg), &truth, "gender=female").unwrap() < 1e-12);
        let other = truth.direction("language=pt").unwrap().to_vec();
        assert!((recovery_error(&Raw(other), &truth, "gender=female").unwrap() - 1.0).abs() < 1e-10);
        assert!(matches!(
            recovery_error(&Raw(vec![0.0; 8]), &truth, "gender=female"),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            recovery_error(&Raw(vec![1.0; 3]), &truth, "gender=female"),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
