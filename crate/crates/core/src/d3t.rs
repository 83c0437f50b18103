//! Divide-and-discern dialogue synthesis.
//!
//! A dialogue narrows an integer count range by repeatedly asking whether the
//! image holds more than the range midpoint, then asks for the exact count.
//! The single-round variant asks once which fixed-width sub-range holds the
//! count; the baseline is a single count question.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CountRange, ImageRecord};
use crate::templates::{self, TemplateKind, TemplateParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct D3TConfig {
    pub initial_range: CountRange,
    /// Stop once the range width drops below `delta_ratio * count`.
    pub delta_ratio: f64,
    /// Use each category's observed `[min, max]` count as the starting range.
    pub per_category_range: bool,
    /// Floor for the stopping width, in counts.
    pub min_delta: f64,
    /// Expand the starting range to include an out-of-range count instead of failing.
    pub clamp: bool,
}

impl Default for D3TConfig {
    fn default() -> Self {
        Self {
            initial_range: CountRange { lower: 1, upper: 2000 },
            delta_ratio: 0.2,
            per_category_range: false,
            min_delta: 1.0,
            clamp: false,
        }
    }
}

impl D3TConfig {
    pub fn validate(&self) -> Result<(), D3tError> {
        if !(self.delta_ratio > 0.0 && self.delta_ratio < 1.0) {
            return Err(D3tError::InvalidConfig(format!("delta_ratio {} not in (0, 1)", self.delta_ratio)));
        }
        if !(self.min_delta > 0.0 && self.min_delta.is_finite()) {
            return Err(D3tError::InvalidConfig(format!("min_delta {} must be positive", self.min_delta)));
        }
        if self.initial_range.lower > self.initial_range.upper {
            return Err(D3tError::InvalidConfig(format!("initial range {} is inverted", self.initial_range)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleRoundConfig {
    /// Sub-range width.
    pub interval: u64,
    pub initial_range: CountRange,
}

impl Default for SingleRoundConfig {
    fn default() -> Self {
        Self {
            interval: 300,
            initial_range: CountRange { lower: 1, upper: 2000 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    RangeProbe,
    RangeChoice,
    FinalCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub question: String,
    pub answer: String,
    pub range_before: CountRange,
    /// Threshold of a range probe; absent on other turns.
    pub midpoint: Option<u64>,
    pub turn_kind: TurnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueTask {
    Baseline,
    D3t,
    SingleRound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub image_id: String,
    pub image_path: String,
    pub category: String,
    pub gt_count: u64,
    pub task: DialogueTask,
    pub turns: Vec<DialogueTurn>,
}

impl DialogueTranscript {
    pub fn probes(&self) -> impl Iterator<Item = &DialogueTurn> {
        self.turns.iter().filter(|t| t.turn_kind == TurnKind::RangeProbe)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum D3tError {
    #[error("CountOutsideRange: image {image_id:?} has count {count} outside {range}")]
    CountOutsideRange { image_id: String, count: u64, range: CountRange },
    #[error("invalid dialogue config: {0}")]
    InvalidConfig(String),
}

pub fn generate_d3t(record: &ImageRecord, cfg: &D3TConfig) -> Result<DialogueTranscript, D3tError> {
    generate_d3t_with_range(record, cfg.initial_range, cfg)
}

/// Like [`generate_d3t`] but starts from `initial` instead of `cfg.initial_range`
/// (used for per-category ranges).
pub fn generate_d3t_with_range(
    record: &ImageRecord,
    initial: CountRange,
    cfg: &D3TConfig,
) -> Result<DialogueTranscript, D3tError> {
    cfg.validate()?;
    let c = record.count;
    let mut range = effective_range(record, initial, cfg.clamp)?;
    let stop_width = (cfg.delta_ratio * c as f64).max(cfg.min_delta);
    let obj = record.category.as_str();

    let mut turns = Vec::new();
    while (range.width() as f64) >= stop_width {
        let tau = range.lower + range.width() / 2;
        let yes = c > tau;
        let question = templates::render(
            TemplateKind::D3tRangeQuestion,
            &TemplateParams {
                tau: Some(tau),
                ..TemplateParams::obj(obj)
            },
        )
        .expect("probe params complete");
        let answer = templates::render(if yes { TemplateKind::D3tYes } else { TemplateKind::D3tNo }, &TemplateParams::default())
            .expect("yes/no take no params");
        turns.push(DialogueTurn {
            question,
            answer,
            range_before: range,
            midpoint: Some(tau),
            turn_kind: TurnKind::RangeProbe,
        });
        range = if yes {
            CountRange { lower: tau + 1, upper: range.upper }
        } else {
            CountRange { lower: range.lower, upper: tau }
        };
    }

    turns.push(DialogueTurn {
        question: templates::count_question(obj),
        answer: templates::count_answer(c, obj),
        range_before: range,
        midpoint: None,
        turn_kind: TurnKind::FinalCount,
    });

    Ok(transcript(record, DialogueTask::D3t, turns))
}

fn effective_range(record: &ImageRecord, initial: CountRange, clamp: bool) -> Result<CountRange, D3tError> {
    if initial.contains(record.count) {
        Ok(initial)
    } else if clamp {
        log::warn!(
            "image {:?}: count {} outside {initial}, expanding range",
            record.image_id,
            record.count
        );
        Ok(initial.expanded_to(record.count))
    } else {
        Err(D3tError::CountOutsideRange {
            image_id: record.image_id.clone(),
            count: record.count,
            range: initial,
        })
    }
}

/// Consecutive sub-ranges of width `interval` covering `range`; the last one is
/// truncated at `range.upper`.
pub fn sub_ranges(range: CountRange, interval: u64) -> Vec<CountRange> {
    let interval = interval.max(1);
    let mut out = Vec::new();
    let mut lo = range.lower;
    loop {
        let hi = lo.saturating_add(interval - 1).min(range.upper);
        out.push(CountRange { lower: lo, upper: hi });
        if hi >= range.upper {
            break;
        }
        lo = hi + 1;
    }
    out
}

pub fn generate_single_round(record: &ImageRecord, cfg: &SingleRoundConfig) -> Result<DialogueTranscript, D3tError> {
    if cfg.interval == 0 {
        return Err(D3tError::InvalidConfig("interval must be at least 1".into()));
    }
    let range = effective_range(record, cfg.initial_range, false)?;
    let ranges = sub_ranges(range, cfg.interval);
    let hit = ranges
        .iter()
        .find(|r| r.contains(record.count))
        .expect("sub-ranges cover the initial range");
    let question = templates::render(
        TemplateKind::SingleRoundRangeQuestion,
        &TemplateParams {
            ranges: Some(&ranges),
            ..TemplateParams::obj(&record.category)
        },
    )
    .expect("range params complete");
    let turn = DialogueTurn {
        question,
        answer: hit.to_string(),
        range_before: range,
        midpoint: None,
        turn_kind: TurnKind::RangeChoice,
    };
    Ok(transcript(record, DialogueTask::SingleRound, vec![turn]))
}

pub fn generate_baseline(record: &ImageRecord) -> DialogueTranscript {
    let turn = DialogueTurn {
        question: templates::count_question(&record.category),
        answer: templates::count_answer(record.count, &record.category),
        range_before: CountRange {
            lower: record.count,
            upper: record.count,
        },
        midpoint: None,
        turn_kind: TurnKind::FinalCount,
    };
    transcript(record, DialogueTask::Baseline, vec![turn])
}

fn transcript(record: &ImageRecord, task: DialogueTask, turns: Vec<DialogueTurn>) -> DialogueTranscript {
    DialogueTranscript {
        image_id: record.image_id.clone(),
        image_path: record.image_path.clone(),
        category: record.category.clone(),
        gt_count: record.count,
        task,
        turns,
    }
}
