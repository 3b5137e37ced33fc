//! Multi-annotator dataset ingestion: per-annotation records, item grouping,
//! minimum-annotator filtering, frozen feature vectors and summary histograms.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::stats::{unbiased_variance, ItemAnnotations, RatingScale};

/// Share of malformed lines above which parsing aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

const EMBEDDING_MAGIC: &[u8; 7] = b"LKEMB1\0";

/// One annotator's rating of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub rating: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Jsonl,
    Csv,
}

impl AnnotationFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(Self::Jsonl),
            Some("csv") => Ok(Self::Csv),
            _ => Err(Error::InvalidConfig(format!(
                "cannot infer annotation format of {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedAnnotations {
    pub records: Vec<AnnotationRecord>,
    /// Lines that were skipped, with 1-based line numbers.
    pub errors: Vec<LineError>,
}

fn id_from_value(v: Option<&Value>) -> std::result::Result<Option<String>, String> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(format!("expected string id, got {other}")),
    }
}

fn rating_from_str(s: &str, scale: RatingScale) -> std::result::Result<u32, String> {
    let r: i64 = s
        .trim()
        .parse()
        .map_err(|_| format!("unknown rating value '{s}'"))?;
    check_rating(r, scale)
}

fn check_rating(r: i64, scale: RatingScale) -> std::result::Result<u32, String> {
    if scale.contains(r) {
        Ok(r as u32)
    } else {
        Err(format!("rating out of scale: {r} not in [0, {}]", scale.max_rating()))
    }
}

fn parse_json_line(line: &str, scale: RatingScale) -> std::result::Result<AnnotationRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let item_id = id_from_value(obj.get("item_id"))?.ok_or("missing item_id")?;
    let rating = match obj.get("rating") {
        Some(Value::Number(n)) => match n.as_i64() {
            Some(r) => check_rating(r, scale)?,
            None => return Err(format!("unknown rating value '{n}'")),
        },
        Some(Value::String(s)) => rating_from_str(s, scale)?,
        Some(other) => return Err(format!("unknown rating value '{other}'")),
        None => return Err("missing rating".into()),
    };
    let text = match obj.get("text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(format!("expected string text, got {other}")),
    };
    Ok(AnnotationRecord {
        item_id,
        text,
        rating,
        annotator_id: id_from_value(obj.get("annotator_id"))?,
    })
}

fn parse_jsonl<R: Read>(reader: R, scale: RatingScale) -> Result<(ParsedAnnotations, usize)> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut out = ParsedAnnotations::default();
    let mut total = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_json_line(line, scale) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    Ok((out, total))
}

fn parse_csv<R: Read>(reader: R, scale: RatingScale) -> Result<(ParsedAnnotations, usize)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let item_col = col("item_id")
        .ok_or_else(|| Error::Format("CSV header lacks an item_id column".into()))?;
    let rating_col =
        col("rating").ok_or_else(|| Error::Format("CSV header lacks a rating column".into()))?;
    let annotator_col = col("annotator_id");
    let text_col = col("text");

    let mut out = ParsedAnnotations::default();
    let mut total = 0;
    for (i, rec) in rdr.records().enumerate() {
        total += 1;
        let fallback_line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineError {
                    line: fallback_line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(fallback_line);
        let field = |c: Option<usize>| {
            c.and_then(|c| rec.get(c))
                .map(str::to_string)
                .filter(|s| !s.is_empty())
        };
        let parsed = (|| -> std::result::Result<AnnotationRecord, String> {
            let item_id = field(Some(item_col)).ok_or("missing item_id")?;
            let rating_raw = field(Some(rating_col)).ok_or("missing rating")?;
            Ok(AnnotationRecord {
                item_id,
                text: field(text_col),
                rating: rating_from_str(&rating_raw, scale)?,
                annotator_id: field(annotator_col),
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError { line, message }),
        }
    }
    Ok((out, total))
}

/// Reads per-annotation records, collecting malformed lines.
///
/// Aborts when more than [`MAX_MALFORMED_FRACTION`] of the lines are malformed.
pub fn parse_annotations(
    path: &Path,
    format: AnnotationFormat,
    scale: RatingScale,
) -> Result<ParsedAnnotations> {
    let file = std::fs::File::open(path)?;
    let (parsed, total) = match format {
        AnnotationFormat::Jsonl => parse_jsonl(file, scale)?,
        AnnotationFormat::Csv => parse_csv(file, scale)?,
    };
    let bad = parsed.errors.len();
    if total > 0 && bad as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        let first = &parsed.errors[0];
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            bad,
            total,
            first: format!("line {}: {}", first.line, first.message),
        });
    }
    Ok(parsed)
}

pub fn write_annotations_jsonl(records: &[AnnotationRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub k_levels: usize,
    pub min_annotators: usize,
    #[serde(default)]
    pub merge_duplicate_texts: bool,
}

impl IngestConfig {
    pub fn validate(&self) -> Result<RatingScale> {
        if self.min_annotators < 1 {
            return Err(Error::InvalidConfig("min_annotators must be >= 1".into()));
        }
        RatingScale::new(self.k_levels)
    }
}

/// Groups records into items (first-appearance order), merging items whose text
/// is byte-identical when requested. No filtering.
pub fn group_records(records: &[AnnotationRecord], cfg: &IngestConfig) -> Result<Vec<ItemAnnotations>> {
    let scale = cfg.validate()?;
    let mut slot_of_id: HashMap<&str, usize> = HashMap::new();
    let mut slot_of_text: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<u32>)> = Vec::new();
    for r in records {
        if !scale.contains(r.rating as i64) {
            return Err(Error::RatingOutOfScale {
                rating: r.rating as i64,
                max: scale.max_rating(),
            });
        }
        let slot = match slot_of_id.get(r.item_id.as_str()) {
            Some(&s) => s,
            None => {
                let by_text = if cfg.merge_duplicate_texts {
                    r.text.as_deref().and_then(|t| slot_of_text.get(t).copied())
                } else {
                    None
                };
                let s = by_text.unwrap_or_else(|| {
                    groups.push((r.item_id.clone(), Vec::new()));
                    groups.len() - 1
                });
                slot_of_id.insert(&r.item_id, s);
                s
            }
        };
        if cfg.merge_duplicate_texts {
            if let Some(t) = r.text.as_deref() {
                slot_of_text.entry(t).or_insert(slot);
            }
        }
        groups[slot].1.push(r.rating);
    }
    groups
        .into_iter()
        .map(|(id, ratings)| ItemAnnotations::new(id, ratings, scale))
        .collect()
}

/// Drops items with fewer than `min_annotators` ratings.
pub fn filter_min_annotators(items: Vec<ItemAnnotations>, min_annotators: usize) -> Vec<ItemAnnotations> {
    items
        .into_iter()
        .filter(|it| it.n() >= min_annotators)
        .collect()
}

/// Groups (merging duplicates first, when enabled) and then filters.
pub fn group_and_filter(records: &[AnnotationRecord], cfg: &IngestConfig) -> Result<Vec<ItemAnnotations>> {
    Ok(filter_min_annotators(
        group_records(records, cfg)?,
        cfg.min_annotators,
    ))
}

/// Filtered items on one rating scale; the persisted output of ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub k_levels: usize,
    pub items: Vec<CorpusItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub item_id: String,
    pub ratings: Vec<u32>,
}

impl Corpus {
    pub fn from_items(scale: RatingScale, items: &[ItemAnnotations]) -> Self {
        Self {
            k_levels: scale.k(),
            items: items
                .iter()
                .map(|it| CorpusItem {
                    item_id: it.item_id.clone(),
                    ratings: it.ratings.clone(),
                })
                .collect(),
        }
    }

    pub fn scale(&self) -> Result<RatingScale> {
        RatingScale::new(self.k_levels)
    }

    pub fn annotations(&self) -> Result<Vec<ItemAnnotations>> {
        let scale = self.scale()?;
        self.items
            .iter()
            .map(|it| ItemAnnotations::new(it.item_id.clone(), it.ratings.clone(), scale))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Corpus = serde_json::from_slice(&std::fs::read(path)?)?;
        c.annotations()?;
        Ok(c)
    }
}

/// Frozen per-item feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Format(format!("item id longer than {} bytes", u16::MAX)));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("embedding for {id} has non-finite values")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Errors naming every id without a stored vector.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<String> = ids
            .into_iter()
            .filter(|id| !self.index.contains_key(*id))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingEmbeddings(missing))
        }
    }

    /// Binary layout: magic `LKEMB1\0`, u32 LE row count, u32 LE dim, then per row
    /// a u16 LE id length, the UTF-8 id, and `dim` f32 LE values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format("truncated embedding file".into())
            } else {
                Error::Io(e)
            }
        };
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(Error::Format("embedding magic mismatch".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(eof)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(eof)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 {
            return Err(Error::Format("embedding dim is zero".into()));
        }
        let mut store = Self::new(dim);
        let mut row = vec![0f32; dim];
        let mut raw = vec![0u8; dim * 4];
        for _ in 0..rows {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(eof)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut id).map_err(eof)?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Format("embedding id is not UTF-8".into()))?;
            r.read_exact(&mut raw).map_err(eof)?;
            for (v, chunk) in row.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite feature for item {id}")));
            }
            store.insert(id, &row)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format(format!(
                "trailing bytes after {rows} rows of dim {dim}"
            )));
        }
        Ok(store)
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path)?;
    EmbeddingStore::read_from(&mut bytes.as_slice())
}

/// Normalized-density histogram with equal-width bins (last bin closed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        let edges = crate::eval::equal_width_edges(lo, hi, n_bins)?;
        let width = (hi - lo) / n_bins as f64;
        let mut counts = vec![0usize; n_bins];
        for &v in values {
            if !(v >= lo && v <= hi) {
                return Err(Error::UncoveredValue { value: v, lo, hi });
            }
            counts[edges[1..n_bins].partition_point(|&e| e <= v)] += 1;
        }
        let n = values.len().max(1) as f64;
        Ok(Self {
            edges,
            density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,density\n");
        for (i, d) in self.density.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], d);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl AnnotatorStats {
    pub fn of(items: &[ItemAnnotations]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let counts: Vec<usize> = items.iter().map(ItemAnnotations::n).collect();
        Some(Self {
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            min: *counts.iter().min()?,
            max: *counts.iter().max()?,
        })
    }
}

/// Dataset statistics: per-item mean and variance histograms plus counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k_levels: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub annotators_per_item: AnnotatorStats,
    pub mean_histogram: Histogram,
    /// Unbiased variance of items with at least two ratings.
    pub variance_histogram: Option<Histogram>,
}

pub const DEFAULT_SUMMARY_BINS: usize = 20;

pub fn summarize(items: &[ItemAnnotations], n_bins: usize) -> Result<Summary> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot summarize an empty corpus".into()))?;
    let scale = first.scale;
    if let Some(other) = items.iter().find(|it| it.scale != scale) {
        return Err(Error::ScaleMismatch {
            expected: scale.k(),
            actual: other.scale.k(),
        });
    }
    let means: Vec<f64> = items.iter().map(|it| it.mean()).collect::<Result<_>>()?;
    let variances: Vec<f64> = items
        .iter()
        .filter(|it| it.n() >= 2)
        .map(unbiased_variance)
        .collect::<Result<_>>()?;
    let var_hi = variances
        .iter()
        .copied()
        .fold(scale.max_population_variance(), f64::max);
    Ok(Summary {
        k_levels: scale.k(),
        n_items: items.len(),
        n_ratings: items.iter().map(ItemAnnotations::n).sum(),
        annotators_per_item: AnnotatorStats::of(items).expect("non-empty"),
        mean_histogram: Histogram::new(&means, 0.0, scale.max_rating() as f64, n_bins)?,
        variance_histogram: if variances.is_empty() {
            None
        } else {
            Some(Histogram::new(&variances, 0.0, var_hi, n_bins)?)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, rating: u32, text: Option<&str>) -> AnnotationRecord {
        AnnotationRecord {
            item_id: id.into(),
            text: text.map(str::to_string),
            rating,
            annotator_id: None,
        }
    }

    fn scale(k: usize) -> RatingScale {
        RatingScale::new(k).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_valid_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.jsonl",
            "{\"item_id\":\"a\",\"rating\":0,\"annotator_id\":\"u1\"}\n\
             {\"item_id\":\"a\",\"rating\":2}\n\
             {\"item_id\":7,\"rating\":\"1\",\"text\":\"hi\"}\n",
        );
        let parsed = parse_annotations(&p, AnnotationFormat::Jsonl, scale(3)).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert!(parsed.errors.is_empty());
        assert_eq!(parsed.records[2].item_id, "7");
        assert_eq!(parsed.records[0].annotator_id.as_deref(), Some("u1"));
    }

    #[test]
    fn out_of_scale_rating_is_a_line_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..200 {
            body.push_str(&format!("{{\"item_id\":\"i{i}\",\"rating\":1}}\n"));
        }
        body.push_str("{\"item_id\":\"bad\",\"rating\":5}\n");
        let p = write(&dir, "a.jsonl", &body);
        let parsed = parse_annotations(&p, AnnotationFormat::Jsonl, scale(3)).unwrap();
        assert_eq!(parsed.records.len(), 200);
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].line, 201);
        assert!(parsed.errors[0].message.starts_with("rating out of scale"));
    }

    #[test]
    fn too_many_malformed_lines_abort() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.jsonl",
            "{\"item_id\":\"a\",\"rating\":1}\n{\"rating\":1}\n{\"item_id\":\"b\",\"rating\":\"x\"}\n",
        );
        let err = parse_annotations(&p, AnnotationFormat::Jsonl, scale(3)).unwrap_err();
        match err {
            Error::TooManyMalformed { bad, total, first, .. } => {
                assert_eq!((bad, total), (2, 3));
                assert!(first.contains("missing item_id"), "{first}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_matches_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let j = write(
            &dir,
            "a.jsonl",
            "{\"item_id\":\"a\",\"rating\":0,\"annotator_id\":\"u1\"}\n\
             {\"item_id\":\"a\",\"rating\":2,\"annotator_id\":\"u2\"}\n\
             {\"item_id\":\"b\",\"rating\":1,\"annotator_id\":\"u1\"}\n",
        );
        let c = write(&dir, "a.csv", "item_id,rating,annotator_id\na,0,u1\na,2,u2\nb,1,u1\n");
        let from_json = parse_annotations(&j, AnnotationFormat::Jsonl, scale(3)).unwrap();
        let from_csv = parse_annotations(&c, AnnotationFormat::Csv, scale(3)).unwrap();
        assert_eq!(from_json.records, from_csv.records);
    }

    #[test]
    fn filter_drops_sparse_items() {
        let cfg = IngestConfig {
            k_levels: 3,
            min_annotators: 3,
            merge_duplicate_texts: false,
        };
        let recs = vec![rec("a", 0, None), rec("a", 1, None), rec("b", 0, None), rec("b", 1, None), rec("b", 2, None)];
        let items = group_and_filter(&recs, &cfg).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].item_id, "b");
    }

    #[test]
    fn duplicate_texts_merge_before_filtering() {
        let cfg = IngestConfig {
            k_levels: 5,
            min_annotators: 5,
            merge_duplicate_texts: true,
        };
        let mut recs = vec![];
        for r in [0, 1, 2] {
            recs.push(rec("a1", r, Some("same text")));
        }
        for r in [3, 4] {
            recs.push(rec("a2", r, Some("same text")));
        }
        recs.push(rec("z", 0, Some("other")));
        let items = group_and_filter(&recs, &cfg).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].item_id, "a1");
        assert_eq!(items[0].ratings, vec![0, 1, 2, 3, 4]);

        let no_merge = IngestConfig {
            merge_duplicate_texts: false,
            ..cfg
        };
        assert!(group_and_filter(&recs, &no_merge).unwrap().is_empty());
    }

    #[test]
    fn embedding_round_trip() {
        let mut store = EmbeddingStore::new(384);
        for i in 0..10 {
            let v: Vec<f32> = (0..384).map(|j| (i * 384 + j) as f32 * 0.001 - 1.5).collect();
            store.insert(format!("item-{i}"), &v).unwrap();
        }
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..7], b"LKEMB1\0");
        assert_eq!(bytes.len(), 7 + 8 + 10 * (2 + 6) + 10 * 384 * 4);
        let back = EmbeddingStore::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.dim(), 384);
        assert_eq!(back.len(), 10);
        for id in store.ids() {
            let a: Vec<u32> = store.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn embedding_errors() {
        let mut store = EmbeddingStore::new(2);
        store.insert("a", &[1.0, 2.0]).unwrap();
        assert!(store.insert("b", &[1.0]).is_err());
        assert!(matches!(store.insert("a", &[0.0, 0.0]), Err(Error::DuplicateId(_))));
        let err = store.check_covers(["a", "ghost"]).unwrap_err();
        assert!(err.to_string().contains("ghost"));

        let bytes = store.to_bytes();
        assert!(EmbeddingStore::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(EmbeddingStore::read_from(&mut bad.as_slice()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EmbeddingStore::read_from(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn summary_histograms() {
        let s3 = scale(3);
        let same = vec![
            ItemAnnotations::new("a", vec![1, 1, 1], s3).unwrap(),
            ItemAnnotations::new("b", vec![2, 2], s3).unwrap(),
        ];
        let sum = summarize(&same, 10).unwrap();
        let vh = sum.variance_histogram.unwrap();
        let width = vh.edges[1] - vh.edges[0];
        assert!((vh.density[0] * width - 1.0).abs() < 1e-12);
        assert!(vh.density[1..].iter().all(|d| *d == 0.0));

        let two = vec![
            ItemAnnotations::new("a", vec![0, 0], s3).unwrap(),
            ItemAnnotations::new("b", vec![2, 2], s3).unwrap(),
        ];
        let sum = summarize(&two, 4).unwrap();
        let mh = &sum.mean_histogram;
        assert_eq!(mh.density, vec![1.0, 0.0, 0.0, 1.0]);
        let w = mh.edges[1] - mh.edges[0];
        assert!((mh.density.iter().sum::<f64>() * w - 1.0).abs() < 1e-12);
        assert!(mh.to_csv().starts_with("bin_lo,bin_hi,density\n"));
        assert!(summarize(&[], 4).is_err());
    }
}
