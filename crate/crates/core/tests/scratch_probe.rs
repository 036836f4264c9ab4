// Temporary bring-up probe; delete before shipping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmr::data::{generate_synthetic, Dataset, SyntheticSpec};
use vmr::metrics::recall_at;
use vmr::model::{Mode, Model, ModelConfig};
use vmr::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use vmr::training::{frame_prob_loss, infer_dataset, FrameIndexSets, TrainConfig, Trainer};

#[test]
#[ignore = "bring-up probe"]
fn overfit_a_handful_of_samples() {
    // 4 videos / ~10 queries, many steps: if matching, spans, and the class
    // head are wired correctly the model must nail R@1@0.7 on its own
    // training data.
    let spec = SyntheticSpec {
        num_videos: 4,
        noise_sigma: 0.1,
        ambiguity: 0.0,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let (set, store) = generate_synthetic(&spec).unwrap();
    let data = Dataset::assemble(&set, &store).unwrap();

    let cfg = ModelConfig {
        hidden: 48,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        num_spans: 10,
        feedforward: 96,
        dropout: 0.0,
        d_video: 32,
        d_text: 32,
    };
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 16,
        seed: 0,
        optimizer: AdamWConfig {
            lr: 2e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        shift: vmr::training::ShiftConfig {
            enabled: false,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(tc, cfg.hidden);
    let mut last = None;
    for epoch in 0..150 {
        let stats = trainer.train_epoch(&mut model, &data, epoch).unwrap();
        if epoch % 25 == 0 || epoch == 149 {
            let (evals, _, _) = infer_dataset(&mut model, &data);
            let r05 = recall_at(1, 0.5, &evals);
            let r07 = recall_at(1, 0.7, &evals);
            println!(
                "epoch {epoch}: total {:.3} moment {:.3} class {:.4} r1@0.5 {r05:.3} r1@0.7 {r07:.3}",
                stats.loss.total, stats.loss.moment, stats.loss.class
            );
            last = Some((r05, r07));
        }
    }
    let (r05, r07) = last.unwrap();

    // Inspect what the decoder produces for the first two samples.
    let mut drng = ChaCha8Rng::seed_from_u64(9);
    for si in 0..2 {
        let sample = &data.samples[si];
        let video = &data.videos[sample.video_index];
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let out = model.forward(
            &mut tape,
            &video.features,
            &sample.query.token_embeddings,
            None,
            Mode::Infer,
            &mut drng,
        );
        let gt = sample.query.span.to_normalized(video.duration);
        println!("sample {si}: gt [{:.3}, {:.3}]", gt.start, gt.end);
        for (m, p) in out.predictions.iter().enumerate() {
            println!(
                "  span {m}: fg {:.4} [{:.3}, {:.3}]",
                p.foreground_prob, p.span.start, p.span.end
            );
        }
    }
    assert!(r05 > 0.9 && r07 > 0.7, "failed to overfit: r1@0.5 {r05}, r1@0.7 {r07}");
}

#[test]
#[ignore = "bring-up probe"]
fn inspect_cross_attention_at_init() {
    let cfg = ModelConfig {
        hidden: 48,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        num_spans: 10,
        feedforward: 96,
        dropout: 0.0,
        d_video: 32,
        d_text: 32,
    };
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let spec = SyntheticSpec {
        num_videos: 2,
        noise_sigma: 0.1,
        ambiguity: 0.0,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let (set, store) = generate_synthetic(&spec).unwrap();
    let data = Dataset::assemble(&set, &store).unwrap();
    let sample = &data.samples[0];
    let video = &data.videos[sample.video_index];

    let mut tape = Tape::new();
    model.bind(&mut tape);
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    let out = model.forward(
        &mut tape,
        &video.features,
        &sample.query.token_embeddings,
        None,
        Mode::Infer,
        &mut drng,
    );
    // Layer 0, head 0: attention rows for spans 0, 5, 9.
    let attn = out.cross_attention[0][0];
    let l = tape.shape(attn)[1];
    for m in [0usize, 5, 9] {
        let row = &tape.value(attn)[m * l..(m + 1) * l];
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let entropy: f64 = -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        println!(
            "span {m}: peak at key {} ({:.3}), entropy {entropy:.3} (uniform would be {:.3})",
            peak.0,
            peak.1,
            (l as f64).ln()
        );
        let head: Vec<String> = row.iter().take(12).map(|v| format!("{v:.3}")).collect();
        println!("  first 12: {}", head.join(" "));
    }
    panic!("inspection only");
}

#[test]
#[ignore = "bring-up probe"]
fn class_head_learns_with_class_loss_only() {
    let cfg = ModelConfig {
        hidden: 48,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 4,
        num_spans: 10,
        feedforward: 96,
        dropout: 0.0,
        d_video: 32,
        d_text: 32,
    };
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let spec = SyntheticSpec {
        num_videos: 2,
        noise_sigma: 0.1,
        ambiguity: 0.0,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let (set, store) = generate_synthetic(&spec).unwrap();
    let data = Dataset::assemble(&set, &store).unwrap();
    let sample = &data.samples[0];
    let video = &data.videos[sample.video_index];
    let w = vmr::training::LossWeights::default();

    let mut opt = AdamW::new(AdamWConfig {
        lr: 2e-3,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..80 {
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let out = model.forward(
            &mut tape,
            &video.features,
            &sample.query.token_embeddings,
            None,
            Mode::Train,
            &mut drng,
        );
        // Fixed target: span 3 is the matched one.
        let loss = vmr::training::class_loss(&mut tape, out.class_logits, &[3], &w);
        let val = tape.scalar_value(loss);
        if step == 0 {
            first = Some(val);
            tape.backward(loss);
            // Gradient magnitude diagnostics.
            let mut report = Vec::new();
            model.visit_params(&mut |name, t| {
                let _ = t;
                report.push(name);
            });
            model.harvest_grads(&tape);
            let mut by_part = std::collections::BTreeMap::new();
            model.visit_params(&mut |name, t| {
                let norm = t
                    .grad()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                let part = name.split('.').next().unwrap_or("?").to_string();
                *by_part.entry(part).or_insert(0.0f64) += norm;
                t.zero_grad();
            });
            for (part, norm) in by_part {
                println!("grad norm {part}: {norm:.6}");
            }
            continue;
        }
        last = val;
        tape.backward(loss);
        model.harvest_grads(&tape);
        opt.begin_step();
        let o = &mut opt;
        model.visit_params(&mut |name, t| o.update(&name, t));
    }
    println!("class-only loss: first {first:?} last {last}");
    assert!(last < 0.05, "class loss stuck: first {first:?}, last {last}");
}

#[test]
#[ignore = "bring-up probe"]
fn oracle_vs_ranked_recall_from_checkpoint() {
    // Usage: CKPT=path DATA=dir FILE=test.jsonl cargo test ... -- --ignored
    let ckpt = std::env::var("CKPT").expect("set CKPT");
    let data_dir = std::env::var("DATA").expect("set DATA");
    let file = std::env::var("FILE").unwrap_or_else(|_| "test.jsonl".into());
    let mut model = vmr::model::load_checkpoint(std::path::Path::new(&ckpt)).unwrap();
    let data = Dataset::load(std::path::Path::new(&data_dir), &file).unwrap();
    let (evals, _, _) = infer_dataset(&mut model, &data);

    let r1_05 = recall_at(1, 0.5, &evals);
    let r1_07 = recall_at(1, 0.7, &evals);

    // Oracle ranking: best-IoU prediction first.
    use vmr::temporal::iou;
    let oracle: Vec<vmr::metrics::QueryEval> = evals
        .iter()
        .map(|e| {
            let gt = e.gts[0];
            let mut spans = e.ranked.spans.clone();
            spans.sort_by(|a, b| iou(b, &gt).partial_cmp(&iou(a, &gt)).unwrap());
            vmr::metrics::QueryEval {
                qid: e.qid.clone(),
                ranked: vmr::metrics::RankedPredictions {
                    scores: (0..spans.len()).map(|i| 1.0 - i as f64 * 0.01).collect(),
                    spans,
                },
                gts: e.gts.clone(),
            }
        })
        .collect();
    let o1_05 = recall_at(1, 0.5, &oracle);
    let o1_07 = recall_at(1, 0.7, &oracle);
    println!("ranked   r1@0.5 {r1_05:.3} r1@0.7 {r1_07:.3}");
    println!("oracle   r1@0.5 {o1_05:.3} r1@0.7 {o1_07:.3}");
    panic!("diagnostic only");
}

#[test]
#[ignore = "bring-up probe"]
fn pfm_learns_to_separate_frames_with_prob_loss_only() {
    let cfg = ModelConfig {
        hidden: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        num_spans: 4,
        feedforward: 64,
        dropout: 0.0,
        d_video: 8,
        d_text: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut rng);

    // One video: frames 3..7 carry the query concept, rest are background.
    let concept: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.5 } else { -0.3 }).collect();
    let background: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { -0.4 } else { 0.2 }).collect();
    let mut video = Vec::new();
    for f in 0..10 {
        let src = if (3..7).contains(&f) { &concept } else { &background };
        video.extend_from_slice(src);
    }
    let video = Tensor::from_vec(vec![10, 8], video);
    let tokens = Tensor::from_vec(vec![3, 8], concept.repeat(3));
    let sets = FrameIndexSets {
        fore: (3..7).collect(),
        back: (0..10).filter(|f| !(3..7).contains(f)).collect(),
    };

    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..150 {
        let mut tape = Tape::new();
        model.bind(&mut tape);
        let out = model.forward(&mut tape, &video, &tokens, None, Mode::Train, &mut drng);
        let loss = frame_prob_loss(&mut tape, out.p_joint, &sets);
        let val = tape.scalar_value(loss);
        if step == 0 {
            first = Some(val);
        }
        last = val;
        tape.backward(loss);
        model.harvest_grads(&tape);
        opt.begin_step();
        let o = &mut opt;
        model.visit_params(&mut |name, t| o.update(&name, t));
    }
    println!("prob loss: first {:?} last {last}", first);
    assert!(
        last < 0.3,
        "prob loss failed to separate: first {first:?}, last {last}"
    );
}
