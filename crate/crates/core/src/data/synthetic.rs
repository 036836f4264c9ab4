//! Synthetic grounded-video generator.
//!
//! Each video is a timeline of latent concept segments. Event segments get a
//! query whose token and sentence embeddings encode the event's concept;
//! background segments carry other concepts or a null texture. Frame features
//! are the segment's concept embedding plus Gaussian noise. With probability
//! `ambiguity` an event's concept is also planted into a background segment,
//! which creates the weak-alignment distractors the negative-query machinery
//! is meant to beat.
//!
//! The concept vocabulary is built in sibling pairs: concepts 2k and 2k+1
//! share a base direction (cosine around 0.9), so same-video queries can be
//! semantically close — that is what the similarity filter of the negative
//! sampler has to catch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::annotations::{AnnotationSet, QueryAnnotation, VideoRecord};
use super::features::{FeatureMatrix, FeatureStore};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub event_len_min: usize,
    pub event_len_max: usize,
    pub noise_sigma: f64,
    /// Probability that an event's concept also appears in a background
    /// segment of the same video.
    pub ambiguity: f64,
    pub frame_duration: f64,
    pub query_tokens: usize,
    /// When set, an event's concept index tracks its temporal position, so
    /// position becomes a genuinely predictive signal (long procedural
    /// videos behave this way).
    pub positional_concepts: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 500,
            frames_per_video: 40,
            feature_dim: 32,
            vocab_size: 20,
            events_min: 2,
            events_max: 4,
            event_len_min: 4,
            event_len_max: 10,
            noise_sigma: 0.3,
            ambiguity: 0.3,
            frame_duration: 1.0,
            query_tokens: 4,
            positional_concepts: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Generation(msg));
        if self.num_videos == 0 {
            return fail("num_videos must be positive".into());
        }
        if self.event_len_min == 0 || self.event_len_min > self.event_len_max {
            return fail(format!(
                "event length range [{}, {}] is invalid",
                self.event_len_min, self.event_len_max
            ));
        }
        if self.event_len_max >= self.frames_per_video {
            return fail(format!(
                "event_len_max {} must be below frames_per_video {}",
                self.event_len_max, self.frames_per_video
            ));
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return fail(format!(
                "events per video range [{}, {}] is invalid",
                self.events_min, self.events_max
            ));
        }
        if self.vocab_size < self.events_max {
            return fail(format!(
                "vocab_size {} must cover events_max {}",
                self.vocab_size, self.events_max
            ));
        }
        if self.events_max * self.event_len_max > self.frames_per_video {
            return fail(format!(
                "events do not fit: {} events x {} frames > {} frames per video",
                self.events_max, self.event_len_max, self.frames_per_video
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return fail(format!("ambiguity {} outside [0, 1]", self.ambiguity));
        }
        if self.noise_sigma < 0.0 {
            return fail(format!("noise_sigma {} must be nonnegative", self.noise_sigma));
        }
        if self.frame_duration <= 0.0 {
            return fail("frame_duration must be positive".into());
        }
        if self.query_tokens == 0 {
            return fail("query_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Unit-normalized concept embeddings in sibling pairs.
pub fn concept_vocabulary(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut vocab = Vec::with_capacity(spec.vocab_size);
    let mut base: Vec<f64> = Vec::new();
    for c in 0..spec.vocab_size {
        if c % 2 == 0 {
            base = (0..spec.feature_dim).map(|_| normal.sample(rng)).collect();
            normalize(&mut base);
        }
        // Each sibling perturbs the shared base direction; the perturbation
        // norm is ~0.33, putting sibling cosines near 0.9.
        let delta = 0.33 / (spec.feature_dim as f64).sqrt();
        let mut v: Vec<f64> = base.iter().map(|b| b + delta * normal.sample(rng)).collect();
        normalize(&mut v);
        vocab.push(v);
    }
    vocab
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[derive(Debug, Clone)]
struct SegmentPlan {
    start: usize,
    len: usize,
    concept: Option<usize>,
}

/// Deterministically generate the dataset for `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(AnnotationSet, FeatureStore)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = concept_vocabulary(spec, &mut rng);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut set = AnnotationSet::default();
    let mut store = FeatureStore::new();

    for vi in 0..spec.num_videos {
        let video_id = format!("v{vi:04}");
        let total = spec.frames_per_video;

        // Event count, lengths, and non-overlapping placement via a random
        // composition of the free space into gaps.
        let n_events = rng.gen_range(spec.events_min..=spec.events_max);
        let lens: Vec<usize> = (0..n_events)
            .map(|_| rng.gen_range(spec.event_len_min..=spec.event_len_max))
            .collect();
        let used: usize = lens.iter().sum();
        if used > total {
            return Err(Error::Generation(format!(
                "events do not fit in video {video_id}: {used} event frames > {total}"
            )));
        }
        let free = total - used;
        let mut cuts: Vec<usize> = (0..n_events).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut gaps = Vec::with_capacity(n_events + 1);
        let mut prev = 0;
        for &c in &cuts {
            gaps.push(c - prev);
            prev = c;
        }
        gaps.push(free - prev);

        // Distinct concepts per video; optionally tied to temporal position.
        let mut concepts: Vec<usize> = Vec::with_capacity(n_events);
        let mut cursor = 0usize;
        let mut event_ranges = Vec::with_capacity(n_events);
        for (e, &len) in lens.iter().enumerate() {
            cursor += gaps[e];
            let start = cursor;
            cursor += len;
            event_ranges.push((start, len));

            let concept = if spec.positional_concepts {
                let frac = (start + len / 2) as f64 / total as f64;
                let ideal = (frac * spec.vocab_size as f64) as usize;
                // Walk outward from the position-determined concept until
                // unused in this video.
                (0..spec.vocab_size)
                    .map(|d| (ideal + d) % spec.vocab_size)
                    .find(|c| !concepts.contains(c))
                    .expect("vocab covers events_max")
            } else {
                loop {
                    let c = rng.gen_range(0..spec.vocab_size);
                    if !concepts.contains(&c) {
                        break c;
                    }
                }
            };
            concepts.push(concept);
        }

        // Background gaps become chunked segments. Each event may plant one
        // distractor copy of its concept into a random background chunk.
        let mut segments: Vec<SegmentPlan> = Vec::new();
        for (e, &(start, len)) in event_ranges.iter().enumerate() {
            segments.push(SegmentPlan {
                start,
                len,
                concept: Some(concepts[e]),
            });
        }
        let mut bg_chunks: Vec<(usize, usize)> = Vec::new();
        let mut pos = 0usize;
        for (e, &gap) in gaps.iter().enumerate() {
            let gap_start = pos;
            let mut off = 0usize;
            while off < gap {
                let chunk = rng
                    .gen_range(spec.event_len_min..=spec.event_len_max)
                    .min(gap - off);
                bg_chunks.push((gap_start + off, chunk));
                off += chunk;
            }
            pos += gap;
            if e < event_ranges.len() {
                pos += event_ranges[e].1;
            }
        }
        let mut bg_concept: Vec<Option<usize>> = vec![None; bg_chunks.len()];
        for &concept in &concepts {
            if !bg_chunks.is_empty() && rng.gen::<f64>() < spec.ambiguity {
                let slot = rng.gen_range(0..bg_chunks.len());
                bg_concept[slot] = Some(concept);
            }
        }
        for (i, &(start, len)) in bg_chunks.iter().enumerate() {
            let concept = match bg_concept[i] {
                Some(c) => Some(c),
                None => {
                    // Unclaimed background: a concept not used by any event,
                    // or the null texture when the vocabulary is exhausted.
                    let spare: Vec<usize> = (0..spec.vocab_size)
                        .filter(|c| !concepts.contains(c))
                        .collect();
                    if spare.is_empty() {
                        None
                    } else {
                        Some(spare[rng.gen_range(0..spare.len())])
                    }
                }
            };
            segments.push(SegmentPlan { start, len, concept });
        }

        // Frame features: segment concept + noise; null texture is zeros.
        let mut frames = vec![0.0f32; total * spec.feature_dim];
        for seg in &segments {
            for f in seg.start..seg.start + seg.len {
                for d in 0..spec.feature_dim {
                    let base = seg.concept.map(|c| vocab[c][d]).unwrap_or(0.0);
                    frames[f * spec.feature_dim + d] =
                        (base + spec.noise_sigma * normal.sample(&mut rng)) as f32;
                }
            }
        }
        store.insert(&video_id, FeatureMatrix::new(total, spec.feature_dim, frames));

        set.videos.push(VideoRecord {
            video_id: video_id.clone(),
            duration: total as f64 * spec.frame_duration,
            frame_duration: spec.frame_duration,
            feature_ref: format!("features/{video_id}.bmft"),
        });

        for (e, &(start, len)) in event_ranges.iter().enumerate() {
            let qid = format!("{video_id}_q{e}");
            let concept = concepts[e];
            let mut tokens = vec![0.0f32; spec.query_tokens * spec.feature_dim];
            for t in 0..spec.query_tokens {
                for d in 0..spec.feature_dim {
                    tokens[t * spec.feature_dim + d] = (vocab[concept][d]
                        + spec.noise_sigma * normal.sample(&mut rng))
                        as f32;
                }
            }
            store.insert(&qid, FeatureMatrix::new(spec.query_tokens, spec.feature_dim, tokens));
            set.queries.push(QueryAnnotation {
                qid: qid.clone(),
                video_id: video_id.clone(),
                span: (
                    start as f64 * spec.frame_duration,
                    (start + len) as f64 * spec.frame_duration,
                ),
                token_feature_ref: format!("features/{qid}.bmft"),
                sentence_embedding: vocab[concept].clone(),
            });
        }
    }

    set.validate()?;
    Ok((set, store))
}

/// Partition queries by normalized ground-truth center: centers below
/// `threshold` go to train, the rest to the shifted test split. Returns the
/// splits plus the (train, test) mean-center statistics.
pub fn make_ood_split(
    set: &AnnotationSet,
    threshold: f64,
) -> Result<(AnnotationSet, AnnotationSet, (f64, f64))> {
    assert!((0.0..=1.0).contains(&threshold), "ood threshold outside [0, 1]");
    let videos = set.video_index();
    let mut train = AnnotationSet {
        videos: set.videos.clone(),
        queries: Vec::new(),
    };
    let mut test = AnnotationSet {
        videos: set.videos.clone(),
        queries: Vec::new(),
    };
    let (mut sum_train, mut sum_test) = (0.0, 0.0);
    for q in &set.queries {
        let duration = videos
            .get(q.video_id.as_str())
            .map(|v| v.duration)
            .expect("validated set");
        let center = (q.span.0 + q.span.1) / 2.0 / duration;
        if center < threshold {
            sum_train += center;
            train.queries.push(q.clone());
        } else {
            sum_test += center;
            test.queries.push(q.clone());
        }
    }
    if train.queries.is_empty() || test.queries.is_empty() {
        return Err(Error::Generation(format!(
            "ood threshold {threshold} produced an empty split ({} train / {} test)",
            train.queries.len(),
            test.queries.len()
        )));
    }
    let stats = (
        sum_train / train.queries.len() as f64,
        sum_test / test.queries.len() as f64,
    );
    Ok((train, test, stats))
}

/// Random query-level split into train/held-out fractions.
pub fn random_split(
    set: &AnnotationSet,
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (AnnotationSet, AnnotationSet) {
    assert!((0.0..1.0).contains(&train_fraction) || train_fraction == 1.0);
    let mut idx: Vec<usize> = (0..set.queries.len()).collect();
    shuffle(&mut idx, rng);
    let n_train = ((set.queries.len() as f64) * train_fraction).round() as usize;
    let mut train_mask = vec![false; set.queries.len()];
    for &i in idx.iter().take(n_train) {
        train_mask[i] = true;
    }
    let mut train = AnnotationSet {
        videos: set.videos.clone(),
        queries: Vec::new(),
    };
    let mut test = AnnotationSet {
        videos: set.videos.clone(),
        queries: Vec::new(),
    };
    for (i, q) in set.queries.iter().enumerate() {
        if train_mask[i] {
            train.queries.push(q.clone());
        } else {
            test.queries.push(q.clone());
        }
    }
    (train, test)
}

/// Fisher-Yates with the caller's rng, for deterministic shuffles.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
