//! Annotation ingestion and the shared domain types.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// One annotated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Relative to the dataset root.
    pub image_path: String,
    pub category: String,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub dataset_name: String,
    pub split: Split,
    pub records: Vec<ImageRecord>,
}

impl AnnotationSet {
    pub fn new(dataset_name: impl Into<String>, split: Split, records: Vec<ImageRecord>) -> Result<Self, AnnotationError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(AnnotationError::DuplicateImageId(r.image_id.clone()));
            }
        }
        Ok(Self {
            dataset_name: dataset_name.into(),
            split,
            records,
        })
    }

    /// Distinct categories in first-seen order.
    pub fn categories(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.category.as_str()))
            .map(|r| r.category.as_str())
            .collect()
    }

    pub fn by_category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().filter(move |r| r.category == category)
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Serializes to the native JSON layout accepted by [`load_annotations`].
    pub fn to_native_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation set serializes")
    }
}

/// Inclusive integer count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountRange {
    pub lower: u64,
    pub upper: u64,
}

impl CountRange {
    pub fn new(lower: u64, upper: u64) -> Result<Self, InvalidRange> {
        if lower > upper {
            return Err(InvalidRange { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    /// `upper - lower`; a single-value range has width 0.
    pub fn width(&self) -> u64 {
        self.upper - self.lower
    }

    pub fn contains(&self, count: u64) -> bool {
        self.lower <= count && count <= self.upper
    }

    /// Smallest range covering both `self` and `count`.
    pub fn expanded_to(&self, count: u64) -> CountRange {
        CountRange {
            lower: self.lower.min(count),
            upper: self.upper.max(count),
        }
    }
}

impl fmt::Display for CountRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid count range [{lower},{upper}]: lower exceeds upper")]
pub struct InvalidRange {
    pub lower: u64,
    pub upper: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandName {
    Sparse,
    Medium,
    Dense,
    ExtremelyDense,
}

impl BandName {
    pub fn as_str(&self) -> &'static str {
        match self {
            BandName::Sparse => "sparse",
            BandName::Medium => "medium",
            BandName::Dense => "dense",
            BandName::ExtremelyDense => "extremely_dense",
        }
    }
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named count bucket. The open-ended top band uses `u64::MAX` as its upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityBand {
    pub name: BandName,
    pub bounds: CountRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandingScheme {
    pub bands: Vec<DensityBand>,
}

impl Default for BandingScheme {
    /// `[0,20]` sparse, `[21,100]` medium, `[101,300]` dense, `[301,∞)` extremely dense.
    fn default() -> Self {
        let band = |name, lower, upper| DensityBand {
            name,
            bounds: CountRange { lower, upper },
        };
        Self {
            bands: vec![
                band(BandName::Sparse, 0, 20),
                band(BandName::Medium, 21, 100),
                band(BandName::Dense, 101, 300),
                band(BandName::ExtremelyDense, 301, u64::MAX),
            ],
        }
    }
}

impl BandingScheme {
    pub fn band_of(&self, count: u64) -> Result<&DensityBand, UncoveredCount> {
        band_of(count, &self.bands)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("count {0} is not covered by the banding scheme")]
pub struct UncoveredCount(pub u64);

pub fn band_of(count: u64, scheme: &[DensityBand]) -> Result<&DensityBand, UncoveredCount> {
    scheme.iter().find(|b| b.bounds.contains(count)).ok_or(UncoveredCount(count))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

/// `[min, max]` of the counts recorded for `category`.
pub fn category_count_extrema(set: &AnnotationSet, category: &str) -> Result<CountRange, UnknownCategory> {
    let mut it = set.by_category(category).map(|r| r.count);
    let first = it.next().ok_or_else(|| UnknownCategory(category.to_string()))?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), c| (lo.min(c), hi.max(c)));
    Ok(CountRange { lower: lo, upper: hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// Array of `{image_id, image_path, category, count, points?, width, height}`,
    /// optionally wrapped as `{dataset_name, split, records}`.
    NativeJson,
    /// Object keyed by image file name, each entry carrying `points`; count is derived.
    PointsJson,
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("MalformedAnnotation: cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("MalformedAnnotation: {0}")]
    Json(#[from] serde_json::Error),
    #[error("MalformedAnnotation: record {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("DuplicateImageId: {0:?}")]
    DuplicateImageId(String),
}

fn malformed(index: usize, reason: impl Into<String>) -> AnnotationError {
    AnnotationError::Malformed {
        index,
        reason: reason.into(),
    }
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<AnnotationSet, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_annotations(&text, format, stem)
}

/// Parses annotation text. `default_name` names the dataset when the text does not,
/// and is also scanned for a split hint (`train`/`val`/`test`).
pub fn parse_annotations(text: &str, format: AnnotationFormat, default_name: &str) -> Result<AnnotationSet, AnnotationError> {
    let value: Value = serde_json::from_str(text)?;
    let hinted_split = ["train", "val", "test"]
        .iter()
        .find(|s| default_name.to_ascii_lowercase().contains(*s))
        .and_then(|s| Split::parse(s))
        .unwrap_or_default();
    match format {
        AnnotationFormat::NativeJson => parse_native(value, default_name, hinted_split),
        AnnotationFormat::PointsJson => parse_points(value, default_name, hinted_split),
    }
}

const NATIVE_FIELDS: &[&str] = &["image_id", "image_path", "category", "count", "points", "width", "height"];

fn parse_native(value: Value, default_name: &str, hinted: Split) -> Result<AnnotationSet, AnnotationError> {
    let (name, split, items) = match value {
        Value::Array(items) => (default_name.to_string(), hinted, items),
        Value::Object(mut obj) => {
            let name = match obj.remove("dataset_name") {
                Some(Value::String(s)) => s,
                _ => default_name.to_string(),
            };
            let split = match obj.remove("split") {
                Some(Value::String(s)) => Split::parse(&s).ok_or_else(|| malformed(0, format!("unknown split {s:?}")))?,
                _ => hinted,
            };
            match obj.remove("records") {
                Some(Value::Array(items)) => (name, split, items),
                _ => return Err(malformed(0, "expected an array of records or an object with `records`")),
            }
        }
        _ => return Err(malformed(0, "expected a JSON array or object")),
    };

    let mut records = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let Value::Object(obj) = item else {
            return Err(malformed(index, "record is not an object"));
        };
        warn_unknown(index, &obj, NATIVE_FIELDS);
        let points = match obj.get("points") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_points_list(index, v)?),
        };
        let count = match (obj.get("count"), &points) {
            (Some(v), _) => {
                let c = v.as_u64().ok_or_else(|| malformed(index, "`count` must be a non-negative integer"))?;
                if let Some(p) = &points {
                    if p.len() as u64 != c {
                        return Err(malformed(index, format!("`count` {c} disagrees with {} points", p.len())));
                    }
                }
                c
            }
            (None, Some(p)) => p.len() as u64,
            (None, None) => return Err(malformed(index, "missing `count`")),
        };
        let image_id = str_field(index, &obj, "image_id")?;
        let image_path = match obj.get("image_path") {
            Some(_) => str_field(index, &obj, "image_path")?,
            None => image_id.clone(),
        };
        records.push(finish_record(
            index,
            image_id,
            image_path,
            str_field(index, &obj, "category")?,
            count,
            points,
            dim_field(index, &obj, &["width"])?,
            dim_field(index, &obj, &["height"])?,
        )?);
    }
    AnnotationSet::new(name, split, records)
}

const POINTS_FIELDS: &[&str] = &["points", "category", "class", "width", "height", "W", "H", "image_path"];

fn parse_points(value: Value, default_name: &str, hinted: Split) -> Result<AnnotationSet, AnnotationError> {
    let Value::Object(entries) = value else {
        return Err(malformed(0, "points format expects an object keyed by image file name"));
    };
    let mut records = Vec::with_capacity(entries.len());
    // serde_json maps are ordered by key, so record order is deterministic.
    for (index, (file, entry)) in entries.into_iter().enumerate() {
        let Value::Object(obj) = entry else {
            return Err(malformed(index, "entry is not an object"));
        };
        warn_unknown(index, &obj, POINTS_FIELDS);
        let points = parse_points_list(index, obj.get("points").ok_or_else(|| malformed(index, "missing `points`"))?)?;
        let category = match (obj.get("category"), obj.get("class")) {
            (Some(_), _) => str_field(index, &obj, "category")?,
            (None, Some(_)) => str_field(index, &obj, "class")?,
            _ => return Err(malformed(index, "missing `category`")),
        };
        let image_path = match obj.get("image_path") {
            Some(_) => str_field(index, &obj, "image_path")?,
            None => file.clone(),
        };
        let count = points.len() as u64;
        records.push(finish_record(
            index,
            file,
            image_path,
            category,
            count,
            Some(points),
            dim_field(index, &obj, &["width", "W"])?,
            dim_field(index, &obj, &["height", "H"])?,
        )?);
    }
    AnnotationSet::new(default_name, hinted, records)
}

#[allow(clippy::too_many_arguments)]
fn finish_record(
    index: usize,
    image_id: String,
    image_path: String,
    category: String,
    count: u64,
    points: Option<Vec<[f64; 2]>>,
    width: u32,
    height: u32,
) -> Result<ImageRecord, AnnotationError> {
    if category.trim().is_empty() {
        return Err(malformed(index, "`category` is empty"));
    }
    if image_id.is_empty() {
        return Err(malformed(index, "`image_id` is empty"));
    }
    Ok(ImageRecord {
        image_id,
        image_path,
        category,
        count,
        points,
        width,
        height,
    })
}

fn warn_unknown(index: usize, obj: &Map<String, Value>, known: &[&str]) {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            log::warn!("record {index}: ignoring unknown field {key:?}");
        }
    }
}

fn str_field(index: usize, obj: &Map<String, Value>, key: &str) -> Result<String, AnnotationError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(index, format!("`{key}` must be a string"))),
        None => Err(malformed(index, format!("missing `{key}`"))),
    }
}

fn dim_field(index: usize, obj: &Map<String, Value>, keys: &[&str]) -> Result<u32, AnnotationError> {
    let key = keys[0];
    let v = keys
        .iter()
        .find_map(|k| obj.get(*k))
        .ok_or_else(|| malformed(index, format!("missing `{key}`")))?;
    match v.as_u64() {
        Some(d) if d > 0 && d <= u32::MAX as u64 => Ok(d as u32),
        _ => Err(malformed(index, format!("`{key}` must be a positive integer"))),
    }
}

fn parse_points_list(index: usize, v: &Value) -> Result<Vec<[f64; 2]>, AnnotationError> {
    let Value::Array(items) = v else {
        return Err(malformed(index, "`points` must be an array"));
    };
    items
        .iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(malformed(index, "point coordinates must be numbers")),
            },
            _ => Err(malformed(index, "each point must be an [x, y] pair")),
        })
        .collect()
}

/// Counts of records per band, in band order.
pub fn band_histogram(set: &AnnotationSet, scheme: &BandingScheme) -> BTreeMap<BandName, usize> {
    let mut out = BTreeMap::new();
    for r in &set.records {
        if let Ok(b) = scheme.band_of(r.count) {
            *out.entry(b.name).or_insert(0) += 1;
        }
    }
    out
}
