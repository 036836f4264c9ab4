//! Training loop: batching, augmentation, negative selection, matching,
//! losses, and the optimizer step. Also the inference pass shared by the
//! evaluator.

pub mod losses;
pub mod matching;

pub use losses::{
    class_loss, frame_prob_loss, margin_loss, moment_loss, semantic_alignment_loss,
    spans_to_start_end, total_loss, FrameIndexSets, LossBreakdown, LossNodes, LossWeights,
};
pub use matching::{hungarian_assign, matching_cost, MatchResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, Dataset};
use crate::metrics::{rank_predictions, FrameProbRecord, QueryEval};
use crate::model::{semantic_score, Mode, Model};
use crate::sampling::{select_negative, NegativeSamplerConfig};
use crate::temporal::{shift_probability_gate, temporal_shift, FrameTimeline};
use crate::tensor::{AdamW, AdamWConfig, NodeId, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub enabled: bool,
    pub p_apply: f64,
    /// Videos at or above this duration are never shifted.
    pub max_duration: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            enabled: true,
            p_apply: 0.5,
            max_duration: crate::temporal::SHIFT_MAX_DURATION_SECS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub negatives_enabled: bool,
    pub sampler: NegativeSamplerConfig,
    pub shift: ShiftConfig,
    pub loss: LossWeights,
    pub grad_clip: Option<f64>,
    pub max_margin_pairs: usize,
    /// Apply matching, moment, and class losses to intermediate decoder
    /// layers as well as the final one.
    pub aux_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            seed: 0,
            negatives_enabled: true,
            sampler: NegativeSamplerConfig::default(),
            shift: ShiftConfig::default(),
            loss: LossWeights::default(),
            grad_clip: Some(1.0),
            max_margin_pairs: 256,
            aux_losses: false,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub batches: usize,
    pub samples: usize,
}

/// Owns everything training-specific: the frame-score projection used by the
/// margin loss, the optimizer, and the per-purpose rng streams.
pub struct Trainer {
    pub cfg: TrainConfig,
    /// Margin-loss frame scorer (hidden, 1); a training-time parameter
    /// distinct from the matcher weights, optimized alongside the model.
    pub w_margin: Tensor,
    pub optimizer: AdamW,
    rng_shuffle: ChaCha8Rng,
    rng_sampler: ChaCha8Rng,
    rng_shift: ChaCha8Rng,
    rng_dropout: ChaCha8Rng,
    rng_margin: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, hidden: usize) -> Self {
        cfg.loss.validate().expect("invalid loss weights");
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_7267_696e);
        Trainer {
            w_margin: Tensor::xavier(hidden, 1, &mut init_rng).requires_grad(true),
            optimizer: AdamW::new(cfg.optimizer),
            rng_shuffle: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566_666c),
            rng_sampler: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7361_6d70_6c65),
            rng_shift: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_6966_74),
            rng_dropout: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70),
            rng_margin: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061_6972),
            cfg,
        }
    }

    /// One pass over the dataset. Deterministic for a fixed seed and config.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        data: &Dataset,
        epoch: usize,
    ) -> Result<EpochStats> {
        assert!(!data.samples.is_empty(), "train_epoch on an empty dataset");
        let batches = batch_indices(data.samples.len(), self.cfg.batch_size, &mut self.rng_shuffle);
        let mut sum = LossBreakdown::default();
        let mut n_batches = 0usize;
        let mut n_samples = 0usize;

        for (batch_no, batch) in batches.iter().enumerate() {
            let breakdown = self.train_batch(model, data, batch, epoch, batch_no)?;
            sum.moment += breakdown.moment;
            sum.class += breakdown.class;
            sum.margin += breakdown.margin;
            sum.prob += breakdown.prob;
            sum.semantic += breakdown.semantic;
            sum.total += breakdown.total;
            n_batches += 1;
            n_samples += batch.len();
        }

        let k = n_batches as f64;
        Ok(EpochStats {
            epoch,
            loss: LossBreakdown {
                moment: sum.moment / k,
                class: sum.class / k,
                margin: sum.margin / k,
                prob: sum.prob / k,
                semantic: sum.semantic / k,
                total: sum.total / k,
            },
            batches: n_batches,
            samples: n_samples,
        })
    }

    fn train_batch(
        &mut self,
        model: &mut Model,
        data: &Dataset,
        batch: &[usize],
        epoch: usize,
        batch_no: usize,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let w_margin_node = self.w_margin.bind(&mut tape);

        let mut moments = Vec::new();
        let mut classes = Vec::new();
        let mut margins = Vec::new();
        let mut probs = Vec::new();
        let mut pooled: Vec<(NodeId, NodeId)> = Vec::new();

        for &si in batch {
            let sample = &data.samples[si];
            let video = &data.videos[sample.video_index];
            let l_v = video.features.shape()[0];

            // Negative selection sees the original (unshifted) timeline.
            let pool = data.negative_pool(si);
            let negative = if self.cfg.negatives_enabled {
                select_negative(&sample.query, &pool, &self.cfg.sampler, &mut self.rng_sampler)
                    .map(|q| q.token_embeddings.clone())
            } else {
                None
            };

            // Temporal shifting of the ground-truth block, gated by duration.
            let mut features = video.features.clone();
            let mut gt_secs = sample.query.span;
            if self.cfg.shift.enabled
                && shift_probability_gate(
                    video.duration,
                    self.cfg.shift.p_apply,
                    self.cfg.shift.max_duration,
                    &mut self.rng_shift,
                )
            {
                let timeline = FrameTimeline::new(l_v, video.frame_duration);
                match temporal_shift(
                    &timeline,
                    &gt_secs,
                    self.cfg.shift.max_duration,
                    &mut self.rng_shift,
                ) {
                    Ok((order, new_gt)) => {
                        features = permute_rows(&video.features, &order);
                        gt_secs = new_gt;
                    }
                    Err(e) => log::debug!("shift skipped for {}: {e}", sample.query.qid),
                }
            }
            let gt_norm = gt_secs.to_normalized(video.duration);

            let out = model.forward(
                &mut tape,
                &features,
                &sample.query.token_embeddings,
                negative.as_ref(),
                Mode::Train,
                &mut self.rng_dropout,
            );

            // Hungarian assignment over plain values (constant during
            // backprop), then moment + class losses; repeated for the
            // intermediate decoder layers when auxiliary supervision is on.
            let mut heads = vec![(out.span_cw, out.class_logits)];
            if self.cfg.aux_losses {
                heads.extend(out.aux.iter().copied());
            }
            for (cw_node, logits_node) in heads {
                let matched =
                    match_single_gt(&tape, cw_node, logits_node, &gt_norm, &self.cfg.loss);
                let (starts, ends) = spans_to_start_end(&mut tape, cw_node);
                let s = tape.slice_rows(starts, matched, matched + 1);
                let e = tape.slice_rows(ends, matched, matched + 1);
                moments.push(moment_loss(
                    &mut tape,
                    s,
                    e,
                    (gt_norm.start, gt_norm.end),
                    &self.cfg.loss,
                ));
                classes.push(class_loss(
                    &mut tape,
                    logits_node,
                    &[matched],
                    &self.cfg.loss,
                ));
            }

            let sets = FrameIndexSets::from_span(gt_secs.start, gt_secs.end, l_v, video.frame_duration);
            margins.push(margin_loss(
                &mut tape,
                out.frame_features,
                &sets,
                w_margin_node,
                self.cfg.loss.margin,
                self.cfg.max_margin_pairs,
                &mut self.rng_margin,
            ));
            probs.push(frame_prob_loss(&mut tape, out.p_joint, &sets));
            pooled.push((out.pooled_video, out.pooled_query));
        }

        // In-batch contrastive alignment over every (video_i, query_j) pair.
        let n = pooled.len();
        let mut score_matrix = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                row.push(semantic_score(&mut tape, pooled[i].0, pooled[j].1));
            }
            score_matrix.push(row);
        }
        let semantic = semantic_alignment_loss(&mut tape, &score_matrix, &self.cfg.loss);

        let moment = mean_of(&mut tape, &moments);
        let class = mean_of(&mut tape, &classes);
        let margin = mean_of(&mut tape, &margins);
        let prob = mean_of(&mut tape, &probs);
        let nodes = total_loss(&mut tape, moment, class, margin, prob, semantic, &self.cfg.loss);
        let breakdown = nodes.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_no,
                detail: format!("{breakdown:?}"),
            });
        }

        tape.backward(nodes.total);
        model.harvest_grads(&tape);
        self.w_margin.harvest_grad(&tape);

        if let Some(max_norm) = self.cfg.grad_clip {
            let mut sq = 0.0;
            model.visit_params(&mut |_, t| {
                if let Some(g) = t.grad() {
                    sq += g.iter().map(|v| v * v).sum::<f64>();
                }
            });
            sq += self
                .w_margin
                .grad()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0);
            let norm = sq.sqrt();
            if norm > max_norm {
                let factor = max_norm / norm;
                model.visit_params(&mut |_, t| t.scale_grad(factor));
                self.w_margin.scale_grad(factor);
            }
        }

        self.optimizer.begin_step();
        let opt = &mut self.optimizer;
        model.visit_params(&mut |name, t| opt.update(&name, t));
        opt.update("trainer.w_margin", &mut self.w_margin);
        Ok(breakdown)
    }
}

/// Best prediction index for a single ground truth, from plain tape values.
fn match_single_gt(
    tape: &Tape,
    span_cw: NodeId,
    class_logits: NodeId,
    gt: &crate::temporal::Span,
    w: &LossWeights,
) -> usize {
    let m = tape.shape(span_cw)[0];
    let cw = tape.value(span_cw);
    let logits = tape.value(class_logits);
    let preds: Vec<crate::model::MomentPrediction> = (0..m)
        .map(|i| {
            let (fg, bg) = (logits[i * 2], logits[i * 2 + 1]);
            let max = fg.max(bg);
            let fg_prob = (fg - max).exp() / ((fg - max).exp() + (bg - max).exp());
            crate::model::MomentPrediction {
                foreground_prob: fg_prob,
                span: crate::temporal::from_center_width(cw[i * 2], cw[i * 2 + 1]),
            }
        })
        .collect();
    let costs: Vec<f64> = preds.iter().map(|p| matching_cost(gt, p, w)).collect();
    hungarian_assign(&[costs]).pairs[0].1
}

fn mean_of(tape: &mut Tape, parts: &[NodeId]) -> NodeId {
    assert!(!parts.is_empty());
    if parts.len() == 1 {
        return parts[0];
    }
    let stacked = tape.concat_vec(parts);
    tape.mean_all(stacked)
}

/// Reorder feature rows by `order[new_position] = old_index`.
pub fn permute_rows(features: &Tensor, order: &[usize]) -> Tensor {
    let shape = features.shape().to_vec();
    let (rows, dim) = (shape[0], shape[1]);
    assert_eq!(order.len(), rows, "permutation length mismatch");
    let src = features.data();
    let mut data = vec![0.0; rows * dim];
    for (new_pos, &old) in order.iter().enumerate() {
        data[new_pos * dim..(new_pos + 1) * dim].copy_from_slice(&src[old * dim..(old + 1) * dim]);
    }
    Tensor::from_vec(shape, data)
}

/// Per-query attention dump: (qid, o).
pub type AttentionDump = Vec<(String, Vec<f64>)>;

/// Run inference over every sample: ranked predictions, joint-probability
/// records for the alignment gap, and the attention vectors.
pub fn infer_dataset(
    model: &mut Model,
    data: &Dataset,
) -> (Vec<QueryEval>, Vec<FrameProbRecord>, AttentionDump) {
    let mut evals = Vec::with_capacity(data.samples.len());
    let mut records = Vec::with_capacity(data.samples.len());
    let mut dump = Vec::with_capacity(data.samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for sample in &data.samples {
        let video = &data.videos[sample.video_index];
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let out = model.forward(
            &mut tape,
            &video.features,
            &sample.query.token_embeddings,
            None,
            Mode::Infer,
            &mut rng,
        );
        let gt_norm = sample.query.span.to_normalized(video.duration);
        evals.push(QueryEval {
            qid: sample.query.qid.clone(),
            ranked: rank_predictions(
                out.predictions
                    .iter()
                    .map(|p| (p.foreground_prob, p.span))
                    .collect(),
            ),
            gts: vec![gt_norm],
        });
        records.push(FrameProbRecord {
            p_joint: out.frame_probs.p_joint.clone(),
            frame_duration: video.frame_duration,
            gt: sample.query.span,
        });
        dump.push((sample.query.qid.clone(), out.frame_probs.attention));
    }
    (evals, records, dump)
}

/// Joint-probability records in train mode (negatives active), for the
/// alignment-gap comparison between ablations.
pub fn train_mode_prob_records(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Vec<FrameProbRecord> {
    let mut records = Vec::with_capacity(data.samples.len());
    let mut rng_sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7361_6d70_6c65);
    let mut rng_dropout = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70);
    for (si, sample) in data.samples.iter().enumerate() {
        let video = &data.videos[sample.video_index];
        let pool = data.negative_pool(si);
        let negative = if cfg.negatives_enabled {
            select_negative(&sample.query, &pool, &cfg.sampler, &mut rng_sampler)
                .map(|q| q.token_embeddings.clone())
        } else {
            None
        };
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let out = model.forward(
            &mut tape,
            &video.features,
            &sample.query.token_embeddings,
            negative.as_ref(),
            Mode::Train,
            &mut rng_dropout,
        );
        records.push(FrameProbRecord {
            p_joint: out.frame_probs.p_joint.clone(),
            frame_duration: video.frame_duration,
            gt: sample.query.span,
        });
    }
    records
}
