//! Dataset I/O: annotation files, feature files, the synthetic generator,
//! and the in-memory training view.

pub mod annotations;
pub mod features;
pub mod synthetic;

pub use annotations::{load_annotations, save_annotations, AnnotationSet, QueryAnnotation, VideoRecord};
pub use features::{read_features, write_features, FeatureMatrix, FeatureStore};
pub use synthetic::{generate_synthetic, make_ood_split, random_split, SyntheticSpec};

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::sampling::QueryRecord;
use crate::temporal::Span;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One video's frames, widened to f64 and ready for the model.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub video_id: String,
    pub duration: f64,
    pub frame_duration: f64,
    /// (frame_count, feature_dim)
    pub features: Tensor,
}

/// One training/eval sample: a query bound to its video.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video_index: usize,
    pub query: QueryRecord,
}

/// The in-memory view the training loop and evaluator consume.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoData>,
    pub samples: Vec<Sample>,
    /// Sample indices grouped per video (negative pools).
    pub by_video: Vec<Vec<usize>>,
}

impl Dataset {
    /// Assemble from validated annotations plus a feature store. Enforces
    /// the row-count invariant rows == ceil(duration / frame_duration).
    pub fn assemble(set: &AnnotationSet, store: &FeatureStore) -> Result<Self> {
        let mut videos = Vec::with_capacity(set.videos.len());
        let mut video_index: BTreeMap<&str, usize> = BTreeMap::new();
        for v in &set.videos {
            let m = store.get(&v.video_id).ok_or_else(|| {
                Error::Validation(format!("missing features for video {}", v.video_id))
            })?;
            let expected = (v.duration / v.frame_duration).ceil() as usize;
            if m.rows != expected {
                return Err(Error::Validation(format!(
                    "video {} has {} feature rows, expected ceil({}/{}) = {expected}",
                    v.video_id, m.rows, v.duration, v.frame_duration
                )));
            }
            video_index.insert(v.video_id.as_str(), videos.len());
            videos.push(VideoData {
                video_id: v.video_id.clone(),
                duration: v.duration,
                frame_duration: v.frame_duration,
                features: Tensor::from_vec(vec![m.rows, m.dim], m.widened()),
            });
        }

        let mut samples = Vec::with_capacity(set.queries.len());
        let mut by_video = vec![Vec::new(); videos.len()];
        for q in &set.queries {
            let vi = *video_index.get(q.video_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("query {} references unknown video", q.qid))
            })?;
            let tokens = store.get(&q.qid).ok_or_else(|| {
                Error::Validation(format!("missing token features for query {}", q.qid))
            })?;
            by_video[vi].push(samples.len());
            samples.push(Sample {
                video_index: vi,
                query: QueryRecord {
                    qid: q.qid.clone(),
                    video_id: q.video_id.clone(),
                    span: Span::seconds(q.span.0, q.span.1),
                    token_embeddings: Tensor::from_vec(vec![tokens.rows, tokens.dim], tokens.widened()),
                    sentence_embedding: Tensor::from_vec(
                        vec![q.sentence_embedding.len()],
                        q.sentence_embedding.clone(),
                    ),
                },
            });
        }
        Ok(Dataset {
            videos,
            samples,
            by_video,
        })
    }

    /// Load `<dir>/<name>` annotations and the features they reference.
    pub fn load(dir: &Path, annotation_file: &str) -> Result<Self> {
        let ann_path = dir.join(annotation_file);
        let set = load_annotations(&ann_path)?;
        let mut store = FeatureStore::new();
        for v in &set.videos {
            store.insert(&v.video_id, read_features(&dir.join(&v.feature_ref))?);
        }
        for q in &set.queries {
            store.insert(&q.qid, read_features(&dir.join(&q.token_feature_ref))?);
        }
        Dataset::assemble(&set, &store)
    }

    /// Same-video negative pool for a sample (all other queries of its video).
    pub fn negative_pool(&self, sample_index: usize) -> Vec<QueryRecord> {
        let sample = &self.samples[sample_index];
        self.by_video[sample.video_index]
            .iter()
            .filter(|&&si| si != sample_index)
            .map(|&si| self.samples[si].query.clone())
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos
            .first()
            .map(|v| v.features.shape()[1])
            .unwrap_or(0)
    }

    pub fn token_dim(&self) -> usize {
        self.samples
            .first()
            .map(|s| s.query.token_embeddings.shape()[1])
            .unwrap_or(0)
    }
}

/// Shuffled batch index lists for one epoch; the final partial batch is kept.
pub fn batch_indices(n_samples: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..n_samples).collect();
    synthetic::shuffle(&mut idx, rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}
