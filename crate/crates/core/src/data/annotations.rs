//! Line-delimited annotation records: one JSON object per line, either a
//! video or a query. Greppable, streamable, and diff-friendly.
//!
//! Video line:
//!   {"kind":"video","video_id":"v0","duration":40.0,"frame_duration":1.0,
//!    "feature_ref":"features/v0.bmft"}
//! Query line:
//!   {"kind":"query","qid":"v0_q0","video_id":"v0","span":[5.0,12.0],
//!    "token_feature_ref":"features/v0_q0.bmft","sentence_embedding":[...]}
//!
//! Spans are in seconds. Sentence embeddings ride along inline so any
//! external encoder can supply them.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration: f64,
    pub frame_duration: f64,
    pub feature_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryAnnotation {
    pub qid: String,
    pub video_id: String,
    /// (start, end) seconds.
    pub span: (f64, f64),
    pub token_feature_ref: String,
    pub sentence_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Video(VideoRecord),
    Query(QueryAnnotation),
}

/// Validated video + query annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryAnnotation>,
}

impl AnnotationSet {
    pub fn video_index(&self) -> BTreeMap<&str, &VideoRecord> {
        self.videos.iter().map(|v| (v.video_id.as_str(), v)).collect()
    }

    /// Query indices grouped by video id, in file order.
    pub fn queries_by_video(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, q) in self.queries.iter().enumerate() {
            map.entry(q.video_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Enforce every structural invariant; called by `load_annotations`.
    pub fn validate(&self) -> Result<()> {
        let videos = self.video_index();
        for v in &self.videos {
            if v.duration <= 0.0 || v.frame_duration <= 0.0 {
                return Err(Error::Validation(format!(
                    "video {} has non-positive duration or frame_duration",
                    v.video_id
                )));
            }
        }
        for q in &self.queries {
            let Some(video) = videos.get(q.video_id.as_str()) else {
                return Err(Error::Validation(format!(
                    "query {} references unknown video {}",
                    q.qid, q.video_id
                )));
            };
            let (s, e) = q.span;
            if !(s <= e) {
                return Err(Error::Validation(format!(
                    "query {} span start {s} exceeds end {e}",
                    q.qid
                )));
            }
            if s < 0.0 || e > video.duration + 1e-9 {
                return Err(Error::Validation(format!(
                    "query {} span [{s}, {e}] outside video duration {}",
                    q.qid, video.duration
                )));
            }
            if q.sentence_embedding.is_empty() {
                return Err(Error::Validation(format!(
                    "query {} has an empty sentence embedding",
                    q.qid
                )));
            }
        }
        Ok(())
    }
}

/// Load and validate an annotation file. Feature refs are checked to exist
/// relative to the annotation file's directory.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut set = AnnotationSet::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| {
            Error::format(path, format!("line {}: {e}", lineno + 1))
        })?;
        match parsed {
            Line::Video(v) => set.videos.push(v),
            Line::Query(q) => set.queries.push(q),
        }
    }
    set.validate()?;

    for (id, feature_ref) in set
        .videos
        .iter()
        .map(|v| (&v.video_id, &v.feature_ref))
        .chain(set.queries.iter().map(|q| (&q.qid, &q.token_feature_ref)))
    {
        let target = root.join(feature_ref);
        if !target.is_file() {
            return Err(Error::io(
                target,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("dangling feature_ref for {id}"),
                ),
            ));
        }
    }
    Ok(set)
}

/// Write annotations as one JSON object per line: videos first, then queries.
pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let mut out = String::new();
    for v in &set.videos {
        out.push_str(&serde_json::to_string(&Line::Video(v.clone())).expect("serialize video"));
        out.push('\n');
    }
    for q in &set.queries {
        out.push_str(&serde_json::to_string(&Line::Query(q.clone())).expect("serialize query"));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
