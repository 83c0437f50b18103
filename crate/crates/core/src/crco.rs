//! Compare-and-rank sample construction.
//!
//! A ranking set is a handful of images with strictly increasing object
//! counts, shown to the model in shuffled order with the instruction to list
//! them in ascending order. The default sampler stratifies a category's count
//! span into `k` equal-width groups and draws one image per group so sparse
//! and dense scenes land in the same set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_ops::{self, TileSpec};
use crate::model::{category_count_extrema, AnnotationSet, CountRange, ImageRecord};
use crate::templates::{self, TemplateKind, TemplateParams};

/// Resampling attempts spent on breaking count ties before dropping members.
pub const TIE_RETRIES: usize = 32;

/// `[obj]` used when a set mixes categories.
pub const MIXED_SCOPE: &str = "objects";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrcoMode {
    /// One image per equal-width count group of the category.
    #[default]
    Stratified,
    /// `k` images drawn uniformly from the category.
    Random,
    /// Stratified over every image of the split.
    CrossCategory,
    /// Stratified over the semantic group containing the category.
    SemiCross,
    /// One image plus its nested central crops, ranked by retained area.
    Scrco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrcoConfig {
    pub k: usize,
    pub mode: CrcoMode,
    pub grouping_file: Option<PathBuf>,
    pub sets_per_category: usize,
    pub seed: u64,
    /// Crop fractions for [`CrcoMode::Scrco`], strictly decreasing.
    pub scrco_fractions: Vec<f64>,
}

impl Default for CrcoConfig {
    fn default() -> Self {
        Self {
            k: 4,
            mode: CrcoMode::Stratified,
            grouping_file: None,
            sets_per_category: 1,
            seed: 0,
            scrco_fractions: vec![1.0, 0.75, 0.5, 0.25],
        }
    }
}

impl CrcoConfig {
    pub fn validate(&self) -> Result<(), CrcoError> {
        if self.k < 2 {
            return Err(CrcoError::InvalidConfig(format!("k must be at least 2, got {}", self.k)));
        }
        if self.mode == CrcoMode::SemiCross && self.grouping_file.is_none() {
            return Err(CrcoError::InvalidConfig("semi-cross sampling requires a grouping file".into()));
        }
        if self.sets_per_category == 0 {
            return Err(CrcoError::InvalidConfig("sets_per_category must be positive".into()));
        }
        Ok(())
    }
}

/// Semantic category groups, `{group_name: [category, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grouping {
    pub groups: BTreeMap<String, Vec<String>>,
}

impl Grouping {
    pub fn load(path: &Path) -> Result<Self, CrcoError> {
        let text = std::fs::read_to_string(path).map_err(|e| CrcoError::Grouping(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CrcoError::Grouping(format!("{}: {e}", path.display())))
    }

    pub fn group_of(&self, category: &str) -> Option<(&str, &[String])> {
        self.groups
            .iter()
            .find(|(_, cats)| cats.iter().any(|c| c == category))
            .map(|(name, cats)| (name.as_str(), cats.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMember {
    pub image_id: String,
    pub image_path: String,
    pub category: String,
    /// Object count, or the area rank for crop-based sets.
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<TileSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSet {
    /// Sampled members, ascending by count.
    pub members: Vec<RankMember>,
    /// `permutation[j]` is the 1-based sampled rank of the image shown in slot `j + 1`.
    pub permutation: Vec<usize>,
    pub question: String,
    pub answer: String,
    pub category_scope: String,
    /// Ground truth is retained area, not an annotated count.
    pub area_ranked: bool,
}

impl RankingSet {
    /// Members in the order they are shown to the model.
    pub fn presented(&self) -> impl Iterator<Item = &RankMember> {
        self.permutation.iter().map(|&m| &self.members[m - 1])
    }

    /// 1-based presented slots listed in ascending count order.
    pub fn ascending_slots(&self) -> Vec<usize> {
        ascending_slots(&self.permutation)
    }
}

pub fn ascending_slots(permutation: &[usize]) -> Vec<usize> {
    let mut slots = vec![0; permutation.len()];
    for (slot, &member) in permutation.iter().enumerate() {
        slots[member - 1] = slot + 1;
    }
    slots
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CrcoError {
    #[error("UnknownCategory: {0:?}")]
    UnknownCategory(String),
    #[error("EmptyCategory: {0:?} has no images")]
    EmptyCategory(String),
    #[error("InsufficientDiversity: {0}")]
    InsufficientDiversity(String),
    #[error("category {0:?} is not listed in the grouping file")]
    UngroupedCategory(String),
    #[error("invalid ranking config: {0}")]
    InvalidConfig(String),
    #[error("grouping file: {0}")]
    Grouping(String),
    #[error(transparent)]
    Crop(#[from] CropError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CropError {
    #[error("DegenerateCrop: {0}")]
    Degenerate(String),
    #[error("crop fractions must be strictly decreasing within (0, 1]: {0:?}")]
    BadFractions(Vec<f64>),
}

/// Group of `count` within `span` split into `k` equal-width half-open
/// intervals, the last one closed at `span.upper`.
pub fn group_of(count: u64, span: CountRange, k: usize) -> usize {
    let width = span.width();
    if width == 0 {
        return 0;
    }
    // floor((c - lo) / (width / k)) without floating point
    let g = ((count - span.lower) as u128 * k as u128 / width as u128) as usize;
    g.min(k - 1)
}

/// Group index of every record of `category`, in record order.
pub fn assign_groups(set: &AnnotationSet, category: &str, k: usize) -> Result<Vec<usize>, CrcoError> {
    let span = category_count_extrema(set, category).map_err(|e| CrcoError::UnknownCategory(e.0))?;
    Ok(set.by_category(category).map(|r| group_of(r.count, span, k.max(1))).collect())
}

pub fn sample_set<R: Rng + ?Sized>(
    set: &AnnotationSet,
    category: &str,
    cfg: &CrcoConfig,
    grouping: Option<&Grouping>,
    rng: &mut R,
) -> Result<RankingSet, CrcoError> {
    cfg.validate()?;
    let own: Vec<&ImageRecord> = set.by_category(category).collect();
    if own.is_empty() {
        return Err(CrcoError::EmptyCategory(category.to_string()));
    }
    let (members, scope) = match cfg.mode {
        CrcoMode::Stratified => (stratified(&own, cfg.k, rng)?, category.to_string()),
        CrcoMode::Random => (random(&own, cfg.k, rng)?, category.to_string()),
        CrcoMode::CrossCategory => {
            let pool: Vec<&ImageRecord> = set.records.iter().collect();
            (stratified(&pool, cfg.k, rng)?, MIXED_SCOPE.to_string())
        }
        CrcoMode::SemiCross => {
            let grouping = grouping.ok_or_else(|| CrcoError::InvalidConfig("semi-cross sampling requires a grouping".into()))?;
            let (_, cats) = grouping
                .group_of(category)
                .ok_or_else(|| CrcoError::UngroupedCategory(category.to_string()))?;
            let pool: Vec<&ImageRecord> = set.records.iter().filter(|r| cats.contains(&r.category)).collect();
            (stratified(&pool, cfg.k, rng)?, MIXED_SCOPE.to_string())
        }
        CrcoMode::Scrco => {
            let record = own[rng.random_range(0..own.len())];
            let base = build_scrco_set(record, &cfg.scrco_fractions)?;
            return Ok(shuffled(base.members, base.category_scope, true, rng));
        }
    };
    Ok(shuffled(members, scope, false, rng))
}

fn member(r: &ImageRecord) -> RankMember {
    RankMember {
        image_id: r.image_id.clone(),
        image_path: r.image_path.clone(),
        category: r.category.clone(),
        count: r.count,
        crop: None,
    }
}

fn stratified<R: Rng + ?Sized>(pool: &[&ImageRecord], k: usize, rng: &mut R) -> Result<Vec<RankMember>, CrcoError> {
    let lo = pool.iter().map(|r| r.count).min().expect("non-empty pool");
    let hi = pool.iter().map(|r| r.count).max().expect("non-empty pool");
    let span = CountRange { lower: lo, upper: hi };
    let mut groups: Vec<Vec<&ImageRecord>> = vec![Vec::new(); k];
    for r in pool {
        groups[group_of(r.count, span, k)].push(r);
    }
    let groups: Vec<Vec<&ImageRecord>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(CrcoError::InsufficientDiversity(format!(
            "only {} non-empty count group(s) in span {span}",
            groups.len()
        )));
    }
    let mut picked: Vec<&ImageRecord> = groups.iter().map(|g| g[rng.random_range(0..g.len())]).collect();
    // Groups are disjoint count intervals, so ties can only come from
    // degenerate spans; handle them the same way as the other samplers.
    let mut attempts = 0;
    while let Some(dup) = first_tie(&picked) {
        if attempts == TIE_RETRIES {
            break;
        }
        attempts += 1;
        let g = groups.iter().position(|g| g.iter().any(|r| std::ptr::eq(*r, picked[dup]))).expect("member of a group");
        picked[dup] = groups[g][rng.random_range(0..groups[g].len())];
    }
    finish_members(picked)
}

fn random<R: Rng + ?Sized>(pool: &[&ImageRecord], k: usize, rng: &mut R) -> Result<Vec<RankMember>, CrcoError> {
    if pool.len() < k {
        return Err(CrcoError::InsufficientDiversity(format!("{} images, need {k}", pool.len())));
    }
    let idx = index::sample(rng, pool.len(), k).into_vec();
    let mut chosen: Vec<usize> = idx;
    let mut attempts = 0;
    loop {
        let picked: Vec<&ImageRecord> = chosen.iter().map(|&i| pool[i]).collect();
        let Some(dup) = first_tie(&picked) else { break };
        if attempts == TIE_RETRIES {
            break;
        }
        attempts += 1;
        let unused: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
        if unused.is_empty() {
            break;
        }
        chosen[dup] = unused[rng.random_range(0..unused.len())];
    }
    finish_members(chosen.iter().map(|&i| pool[i]).collect())
}

/// Index of a member whose count repeats an earlier member's count.
fn first_tie(picked: &[&ImageRecord]) -> Option<usize> {
    (1..picked.len()).find(|&i| picked[..i].iter().any(|p| p.count == picked[i].count))
}

/// Drops remaining ties, sorts ascending and enforces the two-member minimum.
fn finish_members(mut picked: Vec<&ImageRecord>) -> Result<Vec<RankMember>, CrcoError> {
    picked.sort_by_key(|r| r.count);
    picked.dedup_by_key(|r| r.count);
    if picked.len() < 2 {
        return Err(CrcoError::InsufficientDiversity("fewer than two distinct counts".into()));
    }
    Ok(picked.into_iter().map(member).collect())
}

fn shuffled<R: Rng + ?Sized>(members: Vec<RankMember>, scope: String, area_ranked: bool, rng: &mut R) -> RankingSet {
    let mut permutation: Vec<usize> = (1..=members.len()).collect();
    permutation.shuffle(rng);
    ranking_set(members, permutation, scope, area_ranked)
}

/// Assembles a set from ascending members and a presentation permutation.
pub fn ranking_set(members: Vec<RankMember>, permutation: Vec<usize>, scope: String, area_ranked: bool) -> RankingSet {
    let order = ascending_slots(&permutation);
    let question = templates::render(
        TemplateKind::CrcoRankQuestion,
        &TemplateParams {
            image_count: Some(members.len()),
            ..TemplateParams::obj(&scope)
        },
    )
    .expect("rank question params complete");
    let answer = templates::ranking_answer(&order);
    RankingSet {
        members,
        permutation,
        question,
        answer,
        category_scope: scope,
        area_ranked,
    }
}

/// The image itself plus nested central crops, unshuffled. Members are
/// ordered smallest crop first; their `count` is the area rank (1 = smallest).
pub fn build_scrco_set(record: &ImageRecord, fractions: &[f64]) -> Result<RankingSet, CrcoError> {
    let decreasing = fractions.windows(2).all(|w| w[0] > w[1]);
    let in_range = fractions.iter().all(|f| *f > 0.0 && *f <= 1.0);
    if fractions.len() < 2 || !decreasing || !in_range {
        return Err(CropError::BadFractions(fractions.to_vec()).into());
    }
    let mut members = Vec::with_capacity(fractions.len());
    for (rank, f) in fractions.iter().rev().enumerate() {
        let crop = image_ops::central_crop(record.width, record.height, *f)
            .map_err(|e| CropError::Degenerate(format!("{}: {e}", record.image_id)))?;
        members.push(RankMember {
            image_id: format!("{}@{f}", record.image_id),
            image_path: record.image_path.clone(),
            category: record.category.clone(),
            count: rank as u64 + 1,
            crop: Some(crop),
        });
    }
    let identity = (1..=members.len()).collect();
    Ok(ranking_set(members, identity, record.category.clone(), true))
}
