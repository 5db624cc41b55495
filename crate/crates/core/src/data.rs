//! Embedding records, datasets, and the on-disk ingestion formats.
//!
//! Embeddings and metadata live in separate files joined on `id`:
//!
//! * CSV embeddings: header `id,v0,...,v{d-1}`, one row per record.
//! * JSONL embeddings: one `{"id": "...", "vector": [...]}` object per line.
//! * Binary embeddings: `CAVE`, version byte `1`, `u32` dimension, `u64` count,
//!   then per record a `u16` id length, the UTF-8 id, and `d` `f32` values.
//!   All integers and floats are little-endian.
//! * Metadata CSV: header `id,genre,gender,language`; an empty field is absent.
//!
//! Vectors are always held as `f64` in memory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"CAVE";
pub const BINARY_VERSION: u8 = 1;

/// Categorical metadata attribute of a track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Genre,
    Gender,
    Language,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Genre, Attribute::Gender, Attribute::Language];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Genre => "genre",
            Attribute::Gender => "gender",
            Attribute::Language => "language",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "genre" => Ok(Attribute::Genre),
            "gender" => Ok(Attribute::Gender),
            "language" | "lang" => Ok(Attribute::Language),
            other => Err(Error::InvalidArgument(format!("unknown attribute `{other}`"))),
        }
    }
}

/// One track: an embedding plus its categorical metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub genre: String,
    pub gender: Option<String>,
    pub language: Option<String>,
}

impl EmbeddingRecord {
    pub fn attribute(&self, attribute: Attribute) -> Option<&str> {
        match attribute {
            Attribute::Genre => Some(self.genre.as_str()),
            Attribute::Gender => self.gender.as_deref(),
            Attribute::Language => self.language.as_deref(),
        }
    }
}

/// A validated, immutable collection of records sharing one dimension.
#[derive(Clone, Debug)]
pub struct Dataset {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    vocabulary: BTreeMap<Attribute, BTreeSet<String>>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Validates `records` and builds the id index and attribute vocabulary.
    /// The dimension is taken from the first record.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let dimension = first.vector.len();
        if dimension == 0 {
            return Err(Error::DimensionMismatch {
                id: first.id.clone(),
                expected: 1,
                found: 0,
            });
        }
        let mut index = HashMap::with_capacity(records.len());
        let mut vocabulary: BTreeMap<Attribute, BTreeSet<String>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            check_vector(&rec.id, &rec.vector, dimension)?;
            if index.insert(rec.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
            for attr in Attribute::ALL {
                if let Some(v) = rec.attribute(attr) {
                    vocabulary.entry(attr).or_default().insert(v.to_string());
                }
            }
        }
        Ok(Dataset {
            dimension,
            records,
            vocabulary,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Observed values of `attribute`; absent markers are not included.
    pub fn vocabulary(&self, attribute: Attribute) -> Option<&BTreeSet<String>> {
        self.vocabulary.get(&attribute)
    }

    pub fn attribute_vocabulary(&self) -> &BTreeMap<Attribute, BTreeSet<String>> {
        &self.vocabulary
    }

    /// SHA-256 over ids, metadata and the exact bit patterns of every vector.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dimension as u64).to_le_bytes());
        for rec in &self.records {
            hasher.update((rec.id.len() as u64).to_le_bytes());
            hasher.update(rec.id.as_bytes());
            for field in [Some(rec.genre.as_str()), rec.gender.as_deref(), rec.language.as_deref()] {
                match field {
                    Some(v) => {
                        hasher.update([1u8]);
                        hasher.update((v.len() as u64).to_le_bytes());
                        hasher.update(v.as_bytes());
                    }
                    None => hasher.update([0u8]),
                }
            }
            for v in &rec.vector {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_vector(id: &str, vector: &[f64], dimension: usize) -> Result<()> {
    if vector.len() != dimension {
        return Err(Error::DimensionMismatch {
            id: id.to_string(),
            expected: dimension,
            found: vector.len(),
        });
    }
    if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            id: id.to_string(),
            index,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Csv,
    Jsonl,
    Binary,
}

impl EmbeddingFormat {
    /// Guesses the format from a file extension (`.csv`, `.jsonl`, `.cave`/`.bin`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(EmbeddingFormat::Csv),
            "jsonl" | "ndjson" => Some(EmbeddingFormat::Jsonl),
            "cave" | "bin" => Some(EmbeddingFormat::Binary),
            _ => None,
        }
    }
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EmbeddingFormat::Csv),
            "jsonl" => Ok(EmbeddingFormat::Jsonl),
            "binary" | "bin" | "cave" => Ok(EmbeddingFormat::Binary),
            other => Err(Error::InvalidArgument(format!("unknown embedding format `{other}`"))),
        }
    }
}

/// Metadata row for one id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metadata {
    pub genre: String,
    pub gender: Option<String>,
    pub language: Option<String>,
}

/// Result of [`ingest`]: the dataset plus the ids dropped for lacking metadata.
#[derive(Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub dropped: Vec<String>,
}

/// Reads an embedding file and a metadata file and joins them on id.
///
/// Embeddings without a metadata row are dropped and reported in
/// [`Ingested::dropped`]. Record order follows the embedding file.
pub fn ingest(path: &Path, format: EmbeddingFormat, metadata_path: &Path) -> Result<Ingested> {
    let embeddings = read_embeddings(path, format)?;
    let metadata = read_metadata(metadata_path)?;
    let mut records = Vec::with_capacity(embeddings.len());
    let mut dropped = Vec::new();
    for (id, vector) in embeddings {
        match metadata.get(&id) {
            Some(meta) => records.push(EmbeddingRecord {
                id,
                vector,
                genre: meta.genre.clone(),
                gender: meta.gender.clone(),
                language: meta.language.clone(),
            }),
            None => dropped.push(id),
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "{}: dropped {} record(s) without a metadata row",
            path.display(),
            dropped.len()
        );
    }
    let dataset = Dataset::new(records)?;
    Ok(Ingested { dataset, dropped })
}

/// Writes the embeddings of `ds` to `path` in `format` and its metadata to
/// `metadata_path`. Binary output stores `f32`, so values that are not
/// representable in single precision are rounded on the first export.
pub fn export_dataset(
    ds: &Dataset,
    path: &Path,
    format: EmbeddingFormat,
    metadata_path: &Path,
) -> Result<()> {
    let pairs: Vec<(&str, &[f64])> = ds
        .records()
        .iter()
        .map(|r| (r.id.as_str(), r.vector.as_slice()))
        .collect();
    write_embeddings(path, format, ds.dimension(), &pairs)?;
    write_metadata(metadata_path, ds.records())
}

/// Reads raw `(id, vector)` pairs, validating dimension, finiteness and id
/// uniqueness.
pub fn read_embeddings(path: &Path, format: EmbeddingFormat) -> Result<Vec<(String, Vec<f64>)>> {
    let rows = match format {
        EmbeddingFormat::Csv => read_csv_embeddings(path)?,
        EmbeddingFormat::Jsonl => read_jsonl_embeddings(path)?,
        EmbeddingFormat::Binary => read_binary_embeddings(path)?,
    };
    let Some((_, first)) = rows.first() else {
        return Err(Error::EmptyDataset);
    };
    let dimension = first.len();
    let mut seen = BTreeSet::new();
    for (id, vector) in &rows {
        check_vector(id, vector, dimension)?;
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(rows)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_position(path: &Path, pos: Option<&csv::Position>, message: String) -> Error {
    let (line, byte) = pos.map(|p| (p.line(), p.byte())).unwrap_or((0, 0));
    Error::malformed(path, line, byte, message)
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.kind() {
        csv::ErrorKind::Io(_) => match err.into_kind() {
            csv::ErrorKind::Io(e) => Error::io(path, e),
            _ => unreachable!(),
        },
        _ => {
            let pos = err.position().cloned();
            csv_position(path, pos.as_ref(), err.to_string())
        }
    }
}

fn read_csv_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(open(path)?));
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0).map(str::trim) != Some("id") {
        return Err(Error::malformed(path, 1, 0, "header must start with `id`"));
    }
    let dimension = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("v{i}") {
            return Err(Error::malformed(
                path,
                1,
                0,
                format!("header column {} should be `v{i}`, found `{name}`", i + 1),
            ));
        }
    }
    if dimension == 0 {
        return Err(Error::malformed(path, 1, 0, "header declares no vector columns"));
    }
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_error(path, e))?;
        let id = record.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(csv_position(path, record.position(), "empty id".into()));
        }
        let mut vector = Vec::with_capacity(dimension);
        for (j, field) in record.iter().skip(1).enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                csv_position(
                    path,
                    record.position(),
                    format!("record `{id}`: column v{j} is not a number: `{field}`"),
                )
            })?;
            vector.push(value);
        }
        if vector.len() != dimension {
            return Err(Error::DimensionMismatch {
                id,
                expected: dimension,
                found: vector.len(),
            });
        }
        rows.push((id, vector));
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct JsonlRow<'a> {
    #[serde(borrow)]
    id: std::borrow::Cow<'a, str>,
    vector: std::borrow::Cow<'a, [f64]>,
}

fn read_jsonl_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = BufReader::new(open(path)?);
    let mut rows = Vec::new();
    let mut line = String::new();
    let mut line_no = 0u64;
    let mut byte = 0u64;
    loop {
        line.clear();
        let read = match reader.read_line(&mut line) {
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(Error::malformed(path, line_no + 1, byte, "invalid UTF-8"));
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        if read == 0 {
            break;
        }
        line_no += 1;
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let row: JsonlRow<'_> = serde_json::from_str(trimmed)
                .map_err(|e| Error::malformed(path, line_no, byte, e.to_string()))?;
            if row.id.is_empty() {
                return Err(Error::malformed(path, line_no, byte, "empty id"));
            }
            rows.push((row.id.into_owned(), row.vector.into_owned()));
        }
        byte += read as u64;
    }
    Ok(rows)
}

struct ByteCursor<'a> {
    path: &'a Path,
    data: &'a [u8],
    offset: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.offset < n {
            return Err(Error::malformed(
                self.path,
                0,
                self.offset as u64,
                format!("truncated file while reading {what}"),
            ));
        }
        let out = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

fn read_binary_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut data = Vec::new();
    open(path)?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = ByteCursor {
        path,
        data: &data,
        offset: 0,
    };
    if cur.take(4, "magic")? != BINARY_MAGIC {
        return Err(Error::malformed(path, 0, 0, "bad magic, expected `CAVE`"));
    }
    let version = cur.array::<1>("version")?[0];
    if version != BINARY_VERSION {
        return Err(Error::malformed(path, 0, 4, format!("unsupported version {version}")));
    }
    let dimension = u32::from_le_bytes(cur.array("dimension")?) as usize;
    if dimension == 0 {
        return Err(Error::malformed(path, 0, 5, "dimension is zero"));
    }
    let count = u64::from_le_bytes(cur.array("count")?);
    // The count is untrusted; never preallocate more than the file can hold.
    let min_record = 2 + 4 * dimension as u64;
    let remaining = (data.len() - cur.offset) as u64;
    let mut rows = Vec::with_capacity(count.min(remaining / min_record) as usize);
    for _ in 0..count {
        let start = cur.offset as u64;
        let len = u16::from_le_bytes(cur.array("id length")?) as usize;
        if len == 0 {
            return Err(Error::malformed(path, 0, start, "empty id"));
        }
        let id = std::str::from_utf8(cur.take(len, "id")?)
            .map_err(|_| Error::malformed(path, 0, start + 2, "id is not valid UTF-8"))?
            .to_string();
        let raw = cur.take(4 * dimension, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        rows.push((id, vector));
    }
    if cur.offset != data.len() {
        return Err(Error::malformed(
            path,
            0,
            cur.offset as u64,
            "trailing bytes after the last record",
        ));
    }
    Ok(rows)
}

/// Reads the metadata CSV into a map keyed by id.
pub fn read_metadata(path: &Path) -> Result<HashMap<String, Metadata>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(open(path)?));
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    let expected = ["id", "genre", "gender", "language"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::malformed(
            path,
            1,
            0,
            "metadata header must be `id,genre,gender,language`",
        ));
    }
    let mut out = HashMap::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| {
            let v = record.get(i).unwrap_or("").trim();
            (!v.is_empty()).then(|| v.to_string())
        };
        let id = field(0)
            .ok_or_else(|| csv_position(path, record.position(), "empty id".into()))?;
        let genre = field(1).ok_or_else(|| {
            csv_position(path, record.position(), format!("record `{id}` has no genre"))
        })?;
        let meta = Metadata {
            genre,
            gender: field(2),
            language: field(3),
        };
        if out.insert(id.clone(), meta).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

/// Writes raw `(id, vector)` pairs in `format`.
pub fn write_embeddings(
    path: &Path,
    format: EmbeddingFormat,
    dimension: usize,
    rows: &[(&str, &[f64])],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    match format {
        EmbeddingFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["id".to_string()];
            header.extend((0..dimension).map(|i| format!("v{i}")));
            w.write_record(&header).map_err(|e| csv_error(path, e))?;
            for (id, vector) in rows {
                let mut row = Vec::with_capacity(dimension + 1);
                row.push(id.to_string());
                // `Display` for f64 is the shortest string that parses back exactly.
                row.extend(vector.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(io)?;
        }
        EmbeddingFormat::Jsonl => {
            for (id, vector) in rows {
                let row = JsonlRow {
                    id: (*id).into(),
                    vector: (*vector).into(),
                };
                serde_json::to_writer(&mut out, &row)?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
        EmbeddingFormat::Binary => {
            let dim = u32::try_from(dimension)
                .map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
            out.write_all(BINARY_MAGIC).map_err(io)?;
            out.write_all(&[BINARY_VERSION]).map_err(io)?;
            out.write_all(&dim.to_le_bytes()).map_err(io)?;
            out.write_all(&(rows.len() as u64).to_le_bytes()).map_err(io)?;
            for (id, vector) in rows {
                let len = u16::try_from(id.len()).map_err(|_| {
                    Error::InvalidArgument(format!("id `{id}` longer than 65535 bytes"))
                })?;
                out.write_all(&len.to_le_bytes()).map_err(io)?;
                out.write_all(id.as_bytes()).map_err(io)?;
                for v in vector.iter() {
                    out.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    out.flush().map_err(io)
}

pub fn write_metadata(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["id", "genre", "gender", "language"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            r.genre.as_str(),
            r.gender.as_deref().unwrap_or(""),
            r.language.as_deref().unwrap_or(""),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(id: &str, vector: Vec<f64>, genre: &str, gender: Option<&str>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            vector,
            genre: genre.into(),
            gender: gender.map(Into::into),
            language: None,
        }
    }

    #[test]
    fn three_records_of_dim_four() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.csv");
        let meta = dir.path().join("m.csv");
        std::fs::write(
            &emb,
            "id,v0,v1,v2,v3\na,1,2,3,4\nb,0.5,0,0,1\nc,-1,-2,-3,-4\n",
        )
        .unwrap();
        std::fs::write(&meta, "id,genre,gender,language\na,pop,female,en\nb,rock,,\nc,pop,male,pt\n")
            .unwrap();
        let out = ingest(&emb, EmbeddingFormat::Csv, &meta).unwrap();
        assert_eq!(out.dataset.dimension(), 4);
        assert_eq!(out.dataset.len(), 3);
        assert!(out.dropped.is_empty());
        let b = out.dataset.get("b").unwrap();
        assert_eq!(b.gender, None);
        assert_eq!(b.language, None);
        let genders = out.dataset.vocabulary(Attribute::Gender).unwrap();
        assert_eq!(genders.iter().collect::<Vec<_>>(), vec!["female", "male"]);
    }

    #[test]
    fn short_row_is_dimension_mismatch() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.csv");
        std::fs::write(&emb, "id,v0,v1,v2,v3\na,1,2,3,4\nb,1,2,3\n").unwrap();
        let err = read_embeddings(&emb, EmbeddingFormat::Csv).unwrap_err();
        match err {
            Error::DimensionMismatch { id, expected, found } => {
                assert_eq!((id.as_str(), expected, found), ("b", 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_dimension_enforced_from_first_vector() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.jsonl");
        std::fs::write(
            &emb,
            "{\"id\":\"a\",\"vector\":[1,2,3,4]}\n{\"id\":\"b\",\"vector\":[1,2,3]}\n",
        )
        .unwrap();
        assert!(matches!(
            read_embeddings(&emb, EmbeddingFormat::Jsonl),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_metadata_rows_are_dropped_and_counted() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.jsonl");
        let meta = dir.path().join("m.csv");
        let mut lines = String::new();
        for i in 0..5 {
            lines.push_str(&format!("{{\"id\":\"t{i}\",\"vector\":[{i},1]}}\n"));
        }
        std::fs::write(&emb, lines).unwrap();
        std::fs::write(
            &meta,
            "id,genre,gender,language\nt0,pop,female,\nt1,pop,male,\nt2,rock,female,\nt4,rock,male,\n",
        )
        .unwrap();
        let out = ingest(&emb, EmbeddingFormat::Jsonl, &meta).unwrap();
        assert_eq!(out.dataset.len(), 4);
        assert_eq!(out.dropped, vec!["t3".to_string()]);
        let ids: Vec<_> = out.dataset.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["t0", "t1", "t2", "t4"]);
    }

    #[test]
    fn non_finite_and_duplicates_are_rejected() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.csv");
        std::fs::write(&emb, "id,v0,v1\na,1,NaN\n").unwrap();
        assert!(matches!(
            read_embeddings(&emb, EmbeddingFormat::Csv),
            Err(Error::NonFiniteValue { index: 1, .. })
        ));
        std::fs::write(&emb, "id,v0,v1\na,1,2\na,3,4\n").unwrap();
        assert!(matches!(
            read_embeddings(&emb, EmbeddingFormat::Csv),
            Err(Error::DuplicateId(_))
        ));
        let meta = dir.path().join("m.csv");
        std::fs::write(&meta, "id,genre,gender,language\na,pop,,\na,rock,,\n").unwrap();
        assert!(matches!(read_metadata(&meta), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn empty_after_join_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.csv");
        let meta = dir.path().join("m.csv");
        std::fs::write(&emb, "id,v0\na,1\n").unwrap();
        std::fs::write(&meta, "id,genre,gender,language\nz,pop,,\n").unwrap();
        assert!(matches!(
            ingest(&emb, EmbeddingFormat::Csv, &meta),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn binary_header_errors_carry_offsets() {
        let dir = tempdir().unwrap();
        let emb = dir.path().join("e.cave");
        std::fs::write(&emb, b"CAVX\x01").unwrap();
        assert!(matches!(
            read_embeddings(&emb, EmbeddingFormat::Binary),
            Err(Error::MalformedFile { byte: 0, .. })
        ));
        let mut bytes = b"CAVE\x01".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1u64.to_le_bytes());
        bytes.extend(1u16.to_le_bytes());
        bytes.push(b'a');
        bytes.extend(1.0f32.to_le_bytes());
        std::fs::write(&emb, &bytes).unwrap();
        match read_embeddings(&emb, EmbeddingFormat::Binary).unwrap_err() {
            Error::MalformedFile { byte, .. } => assert_eq!(byte, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_to_unwritable_path_is_io_failure() {
        let ds = Dataset::new(vec![rec("a", vec![1.0], "pop", None)]).unwrap();
        let bad = Path::new("/nonexistent-dir/sub/e.csv");
        assert!(matches!(
            export_dataset(&ds, bad, EmbeddingFormat::Csv, bad),
            Err(Error::IoFailure { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_vector_bits() {
        let a = Dataset::new(vec![rec("a", vec![1.0, 2.0], "pop", Some("male"))]).unwrap();
        let b = Dataset::new(vec![rec("a", vec![1.0, 2.0000000000000004], "pop", Some("male"))])
            .unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
