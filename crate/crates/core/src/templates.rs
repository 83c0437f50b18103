//! Instruction and response templates.
//!
//! Every string a corpus or an inference query contains is rendered here, so
//! the exact wording lives in one place.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CountRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    BaselineQuestion,
    BaselineAnswer,
    D3tRangeQuestion,
    D3tYes,
    D3tNo,
    D3tFinalQuestion,
    D3tFinalAnswer,
    CrcoRankQuestion,
    CrcoRankAnswer,
    SingleRoundRangeQuestion,
    InferenceQuestion,
}

/// Placeholder values. Each kind reads only the fields it needs.
#[derive(Debug, Clone, Default)]
pub struct TemplateParams<'a> {
    /// `[obj]`: category name, substituted verbatim.
    pub obj: Option<&'a str>,
    /// `[num]`: object count.
    pub num: Option<u64>,
    /// Threshold of a "more than" probe.
    pub tau: Option<u64>,
    /// 1-based presented image indices in ascending count order.
    pub order: Option<&'a [usize]>,
    /// Number of images in a ranking set.
    pub image_count: Option<usize>,
    pub ranges: Option<&'a [CountRange]>,
}

impl<'a> TemplateParams<'a> {
    pub fn obj(obj: &'a str) -> Self {
        Self {
            obj: Some(obj),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("template {kind:?} requires placeholder `{placeholder}`")]
pub struct MissingPlaceholder {
    pub kind: TemplateKind,
    pub placeholder: &'static str,
}

pub fn render(kind: TemplateKind, params: &TemplateParams<'_>) -> Result<String, MissingPlaceholder> {
    let need = |placeholder: &'static str| MissingPlaceholder { kind, placeholder };
    let obj = || params.obj.ok_or(need("obj"));
    use TemplateKind::*;
    Ok(match kind {
        BaselineQuestion | D3tFinalQuestion | InferenceQuestion => count_question(obj()?),
        BaselineAnswer | D3tFinalAnswer => count_answer(params.num.ok_or(need("num"))?, obj()?),
        D3tRangeQuestion => format!("Are there more than {} {} in the image?", params.tau.ok_or(need("tau"))?, obj()?),
        D3tYes => "yes".to_string(),
        D3tNo => "no".to_string(),
        CrcoRankQuestion => format!(
            "Given {} images, rank them in ascending order based on their counts of {}",
            number_word(params.image_count.ok_or(need("image_count"))?),
            obj()?
        ),
        CrcoRankAnswer => {
            let order = params.order.ok_or(need("order"))?;
            if order.is_empty() {
                return Err(need("order"));
            }
            ranking_answer(order)
        }
        SingleRoundRangeQuestion => {
            let ranges = params.ranges.ok_or(need("ranges"))?;
            if ranges.is_empty() {
                return Err(need("ranges"));
            }
            let list = ranges.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ");
            format!(
                "Given the image, please determine into which range the number of {} falls: {{{list}}}.",
                obj()?
            )
        }
    })
}

pub fn count_question(obj: &str) -> String {
    format!("How many {obj} are there in the image?")
}

pub fn count_answer(num: u64, obj: &str) -> String {
    format!("a photo of {num} {obj}")
}

pub fn ranking_answer(order: &[usize]) -> String {
    order.iter().map(|i| format!("Image {i}")).collect::<Vec<_>>().join(" < ")
}

/// English word for small set sizes, digits beyond twelve.
pub fn number_word(n: usize) -> String {
    const WORDS: [&str; 13] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Prompt classification used by the mock model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptShape {
    Count,
    MoreThan(u64),
    Ranking,
    RangeChoice(Vec<CountRange>),
    Other,
}

pub fn classify_prompt(prompt: &str) -> PromptShape {
    if let Some(rest) = prompt.strip_prefix("Are there more than ") {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(t) = digits.parse() {
            return PromptShape::MoreThan(t);
        }
    }
    if prompt.contains("rank them in ascending order") {
        return PromptShape::Ranking;
    }
    if prompt.contains("into which range the number of") {
        if let (Some(open), Some(close)) = (prompt.rfind('{'), prompt.rfind('}')) {
            if open < close {
                let ranges = prompt[open + 1..close]
                    .split("], [")
                    .filter_map(|chunk| {
                        let chunk = chunk.trim_matches(|c| c == '[' || c == ']');
                        let (a, b) = chunk.split_once(',')?;
                        CountRange::new(a.trim().parse().ok()?, b.trim().parse().ok()?).ok()
                    })
                    .collect::<Vec<_>>();
                if !ranges.is_empty() {
                    return PromptShape::RangeChoice(ranges);
                }
            }
        }
    }
    if prompt.starts_with("How many ") {
        return PromptShape::Count;
    }
    PromptShape::Other
}
