//! Conversation-JSON corpora and JSON-lines result files.
//!
//! A corpus is a JSON array of samples:
//!
//! ```json
//! {"id": "...", "images": ["a.jpg"],
//!  "conversations": [{"from": "human", "value": "..."}, {"from": "gpt", "value": "..."}],
//!  "meta": {"task": "d3t", "gt_count": 24, "fingerprint": "...", "tool_version": "..."}}
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crco::RankingSet;
use crate::d3t::{DialogueTask, DialogueTranscript};
use crate::glce::InferenceResult;
use crate::image_ops::TileSpec;
use crate::TOOL_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: Speaker,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    /// Ground-truth counts in presentation order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
    /// Crop regions in presentation order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crops: Option<Vec<TileSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_ranked: Option<bool>,
    pub fingerprint: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: String,
    pub images: Vec<String>,
    pub conversations: Vec<Turn>,
    pub meta: SampleMeta,
}

fn meta(task: &str, fingerprint: &str) -> SampleMeta {
    SampleMeta {
        task: task.to_string(),
        category: None,
        gt_count: None,
        mode: None,
        permutation: None,
        counts: None,
        crops: None,
        area_ranked: None,
        fingerprint: fingerprint.to_string(),
        tool_version: TOOL_VERSION.to_string(),
    }
}

pub fn task_name(task: DialogueTask) -> &'static str {
    match task {
        DialogueTask::Baseline => "baseline",
        DialogueTask::D3t => "d3t",
        DialogueTask::SingleRound => "single_round",
    }
}

pub fn from_transcript(t: &DialogueTranscript, fingerprint: &str) -> CorpusSample {
    let mut conversations = Vec::with_capacity(t.turns.len() * 2);
    for turn in &t.turns {
        conversations.push(Turn {
            from: Speaker::Human,
            value: turn.question.clone(),
        });
        conversations.push(Turn {
            from: Speaker::Gpt,
            value: turn.answer.clone(),
        });
    }
    CorpusSample {
        id: format!("{}:{}", task_name(t.task), t.image_id),
        images: vec![t.image_path.clone()],
        conversations,
        meta: SampleMeta {
            category: Some(t.category.clone()),
            gt_count: Some(t.gt_count),
            ..meta(task_name(t.task), fingerprint)
        },
    }
}

pub fn from_ranking(id: &str, set: &RankingSet, mode: &str, fingerprint: &str) -> CorpusSample {
    let shown: Vec<_> = set.presented().collect();
    let crops: Option<Vec<TileSpec>> = shown.iter().map(|m| m.crop).collect();
    CorpusSample {
        id: id.to_string(),
        images: shown.iter().map(|m| m.image_path.clone()).collect(),
        conversations: vec![
            Turn {
                from: Speaker::Human,
                value: set.question.clone(),
            },
            Turn {
                from: Speaker::Gpt,
                value: set.answer.clone(),
            },
        ],
        meta: SampleMeta {
            category: Some(set.category_scope.clone()),
            mode: Some(mode.to_string()),
            permutation: Some(set.permutation.clone()),
            counts: Some(shown.iter().map(|m| m.count).collect()),
            crops,
            area_ranked: Some(set.area_ranked),
            ..meta("crco", fingerprint)
        },
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pretty-printed corpus text, newline-terminated.
pub fn to_json(samples: &[CorpusSample]) -> String {
    let mut s = serde_json::to_string_pretty(samples).expect("corpus serializes");
    s.push('\n');
    s
}

pub fn write_corpus(path: &Path, samples: &[CorpusSample]) -> Result<(), CorpusError> {
    std::fs::write(path, to_json(samples)).map_err(io_err(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusSample>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// One line of a results file: the result plus provenance of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    #[serde(flatten)]
    pub result: InferenceResult,
    pub fingerprint: String,
    pub tool_version: String,
}

pub fn write_results(path: &Path, results: &[InferenceResult], fingerprint: &str) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let line = ResultLine {
            result: r.clone(),
            fingerprint: fingerprint.to_string(),
            tool_version: TOOL_VERSION.to_string(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a results file, returning the results and the fingerprint of the first line.
pub fn read_results(path: &Path) -> Result<(Vec<InferenceResult>, String), CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut results = Vec::new();
    let mut fingerprint = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ResultLine = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            source,
        })?;
        if fingerprint.is_empty() {
            fingerprint = parsed.fingerprint;
        }
        results.push(parsed.result);
    }
    Ok((results, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crco::{ranking_set, RankMember};
    use crate::d3t::{generate_d3t, D3TConfig};
    use crate::model::ImageRecord;

    fn record(count: u64) -> ImageRecord {
        ImageRecord {
            image_id: "img1".into(),
            image_path: "images/img1.jpg".into(),
            category: "oranges".into(),
            count,
            points: None,
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn transcript_alternates_turns() {
        let t = generate_d3t(&record(24), &D3TConfig::default()).unwrap();
        let s = from_transcript(&t, "abc");
        assert_eq!(s.conversations.len(), 20);
        assert!(s.conversations.iter().step_by(2).all(|t| t.from == Speaker::Human));
        assert_eq!(s.conversations[19].value, "a photo of 24 oranges");
        assert_eq!(s.meta.gt_count, Some(24));
        let json = to_json(std::slice::from_ref(&s));
        assert!(json.contains("\"from\": \"gpt\""));
        assert!(!json.contains("permutation"));
        let back: Vec<CorpusSample> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn ranking_sample_lists_images_in_presented_order() {
        let member = |id: &str, c| RankMember {
            image_id: id.into(),
            image_path: format!("{id}.jpg"),
            category: "cars".into(),
            count: c,
            crop: None,
        };
        let set = ranking_set(
            vec![member("a", 3), member("b", 9), member("c", 20), member("d", 41)],
            vec![3, 1, 4, 2],
            "cars".into(),
            false,
        );
        let s = from_ranking("crco:0", &set, "stratified", "fp");
        assert_eq!(s.images, vec!["c.jpg", "a.jpg", "d.jpg", "b.jpg"]);
        assert_eq!(s.meta.counts, Some(vec![20, 3, 41, 9]));
        assert_eq!(s.conversations[1].value, "Image 2 < Image 4 < Image 1 < Image 3");
        assert_eq!(s.meta.crops, None);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut r = InferenceResult::failed("x", "boom");
        r.fused = 12.5;
        write_results(&path, &[r.clone(), InferenceResult::failed("y", "z")], "fp1").unwrap();
        let (back, fp) = read_results(&path).unwrap();
        assert_eq!(fp, "fp1");
        assert_eq!(back[0], r);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}
