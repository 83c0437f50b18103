//! Global/local counting: ask for a whole-image count, and when it is at or
//! above the dense threshold also count each tile of an L×L grid and fuse.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{parse_count_with, ClientError, CountPick, VisionModel, VisionQuery};
use crate::image_ops::{self, EncodedImage, ImageError, TileFormat, TileSpec};
use crate::model::{AnnotationSet, ImageRecord};
use crate::par::Exec;
use crate::templates;

/// Something tiles can be cut from.
pub trait ImageSource: Send + Sync {
    fn dimensions(&self) -> (u32, u32);
    fn encode(&self, tile: &TileSpec) -> Result<EncodedImage, ImageError>;
}

/// A decoded image file.
pub struct FileImage {
    path: PathBuf,
    image: DynamicImage,
    format: TileFormat,
}

impl FileImage {
    pub fn open(path: &Path, format: TileFormat) -> Result<Self, ImageError> {
        Ok(Self {
            path: path.to_path_buf(),
            image: image_ops::decode_file(path)?,
            format,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl ImageSource for FileImage {
    fn dimensions(&self) -> (u32, u32) {
        (self.image.width(), self.image.height())
    }

    fn encode(&self, tile: &TileSpec) -> Result<EncodedImage, ImageError> {
        image_ops::encode_tile(&self.image, tile, self.format)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Mean,
    GlobalOnly,
    LocalOnly,
}

impl Fusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fusion::Mean => "mean",
            Fusion::GlobalOnly => "global_only",
            Fusion::LocalOnly => "local_only",
        }
    }
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "mean" => Ok(Fusion::Mean),
            "global_only" => Ok(Fusion::GlobalOnly),
            "local_only" => Ok(Fusion::LocalOnly),
            _ => Err(format!("unknown fusion {s:?} (expected mean, global-only or local-only)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tier {
    pub min_count: u64,
    pub grid_l: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlceConfig {
    /// c_h: global counts at or above this are tiled.
    pub dense_threshold: u64,
    pub grid_l: u32,
    /// Count-tiered grid sizes; when set they replace `dense_threshold` and `grid_l`.
    pub adaptive_tiers: Option<Vec<Tier>>,
    pub fusion: Fusion,
    pub count_pick: CountPick,
    pub tile_format: TileFormat,
}

impl Default for GlceConfig {
    fn default() -> Self {
        Self {
            dense_threshold: 100,
            grid_l: 2,
            adaptive_tiers: None,
            fusion: Fusion::Mean,
            count_pick: CountPick::First,
            tile_format: TileFormat::Png,
        }
    }
}

impl GlceConfig {
    pub fn validate(&self) -> Result<(), GlceError> {
        if self.dense_threshold == 0 {
            return Err(GlceError::InvalidConfig("dense_threshold must be positive".into()));
        }
        if self.grid_l == 0 {
            return Err(GlceError::InvalidConfig("grid_l must be positive".into()));
        }
        if let Some(tiers) = &self.adaptive_tiers {
            match tiers.first() {
                None => return Err(GlceError::InvalidConfig("adaptive_tiers is empty".into())),
                Some(t) if t.min_count != 0 => {
                    return Err(GlceError::InvalidConfig("first adaptive tier must start at 0".into()))
                }
                _ => {}
            }
            if tiers.windows(2).any(|w| w[0].min_count >= w[1].min_count) {
                return Err(GlceError::InvalidConfig("adaptive tiers must be strictly ascending".into()));
            }
            if tiers.iter().any(|t| t.grid_l == 0) {
                return Err(GlceError::InvalidConfig("tier grid_l must be positive".into()));
            }
        }
        Ok(())
    }

    /// Grid size for a global count, or `None` when the image is not tiled.
    pub fn grid_for(&self, global: u64) -> Option<u32> {
        match &self.adaptive_tiers {
            Some(tiers) => tiers
                .iter()
                .rev()
                .find(|t| t.min_count <= global)
                .map(|t| t.grid_l)
                .filter(|&l| l > 1),
            None => (global >= self.dense_threshold).then_some(self.grid_l),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub image_id: String,
    pub global_count: u64,
    pub tile_counts: Option<Vec<u64>>,
    pub local_sum: Option<u64>,
    pub fused: f64,
    pub used_glce: bool,
    pub parse_failures: u32,
    pub tile_specs: Option<Vec<TileSpec>>,
    /// Set when the image could not be inferred at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl InferenceResult {
    pub fn failed(image_id: impl Into<String>, error: impl ToString) -> Self {
        Self {
            image_id: image_id.into(),
            global_count: 0,
            tile_counts: None,
            local_sum: None,
            fused: 0.0,
            used_glce: false,
            parse_failures: 0,
            tile_specs: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.parse_failures > 0 || self.error.is_some()
    }

    /// The fused count rounded half-up, for display.
    pub fn display_count(&self) -> u64 {
        (self.fused + 0.5).floor() as u64
    }
}

#[derive(Debug, Error)]
pub enum GlceError {
    #[error("AllQueriesFailed: global query for {image_id:?} failed: {source}")]
    AllQueriesFailed {
        image_id: String,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid GLCE config: {0}")]
    InvalidConfig(String),
}

enum Asked {
    Count(u64),
    Unparsed,
}

/// One count question, re-asked once if the reply holds no integer.
fn ask<M: VisionModel + ?Sized>(model: &M, q: &VisionQuery, pick: CountPick) -> Result<Asked, ClientError> {
    for _ in 0..2 {
        let reply = model.query(q)?;
        if let Ok(n) = parse_count_with(&reply.text, pick) {
            return Ok(Asked::Count(n));
        }
        log::debug!("no count in reply {:?}", reply.text);
    }
    Ok(Asked::Unparsed)
}

/// Fused count from its parts.
pub fn fuse(fusion: Fusion, global: u64, local: Option<u64>) -> f64 {
    match (fusion, local) {
        (_, None) | (Fusion::GlobalOnly, _) => global as f64,
        (Fusion::Mean, Some(l)) => (global as f64 + l as f64) / 2.0,
        (Fusion::LocalOnly, Some(l)) => l as f64,
    }
}

pub fn infer_count<M: VisionModel + ?Sized>(
    image_id: &str,
    image: &dyn ImageSource,
    category: &str,
    model: &M,
    cfg: &GlceConfig,
) -> Result<InferenceResult, GlceError> {
    let (width, height) = image.dimensions();
    let prompt = templates::count_question(category);
    let full = TileSpec::full(width, height);
    let q = VisionQuery::new(vec![image.encode(&full)?], prompt.clone());
    let mut parse_failures = 0;
    let global = match ask(model, &q, cfg.count_pick) {
        Ok(Asked::Count(n)) => n,
        Ok(Asked::Unparsed) => {
            parse_failures += 1;
            0
        }
        Err(source) => {
            return Err(GlceError::AllQueriesFailed {
                image_id: image_id.to_string(),
                source,
            })
        }
    };
    let Some(l) = cfg.grid_for(global) else {
        return Ok(InferenceResult {
            image_id: image_id.to_string(),
            global_count: global,
            tile_counts: None,
            local_sum: None,
            fused: global as f64,
            used_glce: false,
            parse_failures,
            tile_specs: None,
            error: None,
        });
    };
    let tiles = image_ops::grid_partition(width, height, l)?;
    let mut counts = Vec::with_capacity(tiles.len());
    for tile in &tiles {
        let q = VisionQuery::new(vec![image.encode(tile)?], prompt.clone());
        let n = match ask(model, &q, cfg.count_pick) {
            Ok(Asked::Count(n)) => n,
            Ok(Asked::Unparsed) => {
                parse_failures += 1;
                0
            }
            Err(e) => {
                log::warn!("{image_id}: tile ({}, {}) failed: {e}", tile.row, tile.col);
                parse_failures += 1;
                0
            }
        };
        counts.push(n);
    }
    let local: u64 = counts.iter().sum();
    Ok(InferenceResult {
        image_id: image_id.to_string(),
        global_count: global,
        tile_counts: Some(counts),
        local_sum: Some(local),
        fused: fuse(cfg.fusion, global, Some(local)),
        used_glce: true,
        parse_failures,
        tile_specs: Some(tiles),
        error: None,
    })
}

/// Runs every record, in input order. Per-image failures become records
/// with `error` set; only an invalid config aborts.
pub fn run_benchmark<M, S>(
    set: &AnnotationSet,
    model: &M,
    cfg: &GlceConfig,
    source: S,
    exec: Exec,
) -> Result<Vec<InferenceResult>, GlceError>
where
    M: VisionModel + ?Sized,
    S: Fn(&ImageRecord) -> Result<Box<dyn ImageSource>, ImageError> + Sync,
{
    cfg.validate()?;
    let results = exec.map(&set.records, |rec| {
        let outcome = source(rec)
            .map_err(GlceError::from)
            .and_then(|img| infer_count(&rec.image_id, img.as_ref(), &rec.category, model, cfg));
        match outcome {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: {e}", rec.image_id);
                InferenceResult::failed(rec.image_id.clone(), e)
            }
        }
    });
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    let flagged = results.iter().filter(|r| r.parse_failures > 0).count();
    log::info!(
        "inferred {} images: {} failed, {} with parse failures",
        results.len(),
        failed,
        flagged
    );
    Ok(results)
}
