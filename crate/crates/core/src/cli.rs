//! Command-line entry points: synthesize data, train, evaluate, verify.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, make_ood_split, random_split, save_annotations, Dataset, SyntheticSpec,
};
use crate::metrics::{evaluate, recall_key};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::sampling::NegativeSamplerConfig;
use crate::training::{infer_dataset, Trainer};
use crate::{Error, Result};

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "VMR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "vmr",
    about = "Background-aware video moment retrieval: synthesize data, train, evaluate, verify",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grounded-video dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Run the self-verification suites.
    Verify,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (defaults to $VMR_OUT_DIR or ./dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub videos: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2)]
    pub events_min: usize,
    #[arg(long, default_value_t = 4)]
    pub events_max: usize,
    #[arg(long, default_value_t = 4)]
    pub event_len_min: usize,
    #[arg(long, default_value_t = 10)]
    pub event_len_max: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub ambiguity: f64,
    #[arg(long, default_value_t = 1.0)]
    pub frame_duration: f64,
    #[arg(long, default_value_t = 4)]
    pub query_tokens: usize,
    /// Tie event concepts to their temporal position.
    #[arg(long, default_value_t = false)]
    pub positional_concepts: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of queries in the random train split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Also write an out-of-distribution split at this center quantile.
    #[arg(long)]
    pub ood_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `vmr synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train.jsonl")]
    pub train_file: String,
    /// Validation annotations (set to "none" to skip validation).
    #[arg(long, default_value = "test.jsonl")]
    pub val_file: String,
    /// Run configuration TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (defaults to $VMR_OUT_DIR or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable a component: no-negative, no-shift, no-sampling-strategy.
    #[arg(long)]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test.jsonl")]
    pub file: String,
    /// Report JSON path (defaults to report.json beside the checkpoint).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-query attention vectors as JSON lines.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

/// Map an error to the documented exit code: 2 for usage/config problems,
/// 1 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Generation(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify => cmd_verify(),
    }
}

fn default_out(flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let out = default_out(args.out, "dataset");
    let spec = SyntheticSpec {
        num_videos: args.videos,
        frames_per_video: args.frames,
        feature_dim: args.dim,
        vocab_size: args.vocab,
        events_min: args.events_min,
        events_max: args.events_max,
        event_len_min: args.event_len_min,
        event_len_max: args.event_len_max,
        noise_sigma: args.noise,
        ambiguity: args.ambiguity,
        frame_duration: args.frame_duration,
        query_tokens: args.query_tokens,
        positional_concepts: args.positional_concepts,
        seed: args.seed,
    };
    if !(0.0..1.0).contains(&args.split) {
        return Err(Error::Config(format!(
            "--split {} outside (0, 1)",
            args.split
        )));
    }

    let (set, store) = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    store.save_dir(&out.join("features"))?;
    save_annotations(&out.join("all.jsonl"), &set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x73706c69);
    let (train, test) = random_split(&set, args.split, &mut rng);
    save_annotations(&out.join("train.jsonl"), &train)?;
    save_annotations(&out.join("test.jsonl"), &test)?;

    if let Some(threshold) = args.ood_threshold {
        let (ood_train, ood_test, (mean_train, mean_test)) = make_ood_split(&set, threshold)?;
        save_annotations(&out.join("ood_train.jsonl"), &ood_train)?;
        save_annotations(&out.join("ood_test.jsonl"), &ood_test)?;
        println!(
            "ood_split threshold={threshold} mean_center_train={mean_train:.4} mean_center_test={mean_test:.4}"
        );
    }

    let spec_toml =
        toml::to_string_pretty(&spec).map_err(|e| Error::Config(format!("spec encode: {e}")))?;
    std::fs::write(out.join("synth_spec.toml"), spec_toml).map_err(|e| Error::io(&out, e))?;

    println!(
        "dataset written to {}: {} videos, {} queries ({} train / {} test)",
        out.display(),
        set.videos.len(),
        set.queries.len(),
        train.queries.len(),
        test.queries.len()
    );
    Ok(())
}

/// Ablation switches, validated for conflicts.
pub fn apply_ablations(cfg: &mut RunConfig, ablate: &[String]) -> Result<()> {
    let mut no_negative = false;
    let mut no_sampling = false;
    for a in ablate {
        match a.as_str() {
            "no-negative" => {
                no_negative = true;
                cfg.sampler.enabled = false;
            }
            "no-shift" => cfg.shift.enabled = false,
            "no-sampling-strategy" => {
                no_sampling = true;
                let disabled = NegativeSamplerConfig::disabled();
                cfg.sampler.iou_threshold = disabled.iou_threshold;
                cfg.sampler.similarity_threshold = disabled.similarity_threshold;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected no-negative, no-shift, no-sampling-strategy)"
                )))
            }
        }
    }
    if no_negative && no_sampling {
        return Err(Error::Config(
            "conflicting ablations: no-sampling-strategy has no effect with no-negative".into(),
        ));
    }
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    // Precedence: flag > file > default.
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.training.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_ablations(&mut cfg, &args.ablate)?;
    cfg.validate()?;

    let out = default_out(args.out, "runs");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let train_data = Dataset::load(&args.data, &args.train_file)?;
    let val_data = if args.val_file == "none" {
        None
    } else {
        Some(Dataset::load(&args.data, &args.val_file)?)
    };

    let model_cfg = cfg.to_model_config(train_data.feature_dim(), train_data.token_dim());
    model_cfg.validate()?;
    let mut model = Model::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let train_cfg = cfg.to_train_config();
    let mut trainer = Trainer::new(train_cfg, model_cfg.hidden);

    let log_path = out.join("train.log");
    let timing_path = out.join("timing.log");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut timing = std::fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;

    let mut best_r1 = 0.0f64;
    if cfg.training.epochs == 0 {
        let path = out.join("checkpoint_initial.ckpt");
        save_checkpoint(&mut model, &path)?;
        println!("epochs=0: wrote initial checkpoint to {}", path.display());
        return Ok(());
    }

    for epoch in 0..cfg.training.epochs {
        let start = Instant::now();
        let stats = trainer.train_epoch(&mut model, &train_data, epoch)?;
        let wall = start.elapsed().as_secs_f64();

        let mut line = format!(
            "epoch={} loss_total={:.6} loss_moment={:.6} loss_class={:.6} loss_margin={:.6} loss_prob={:.6} loss_semantic={:.6}",
            epoch,
            stats.loss.total,
            stats.loss.moment,
            stats.loss.class,
            stats.loss.margin,
            stats.loss.prob,
            stats.loss.semantic,
        );
        if let Some(val) = &val_data {
            let (evals, _, _) = infer_dataset(&mut model, val);
            let r1_05 = crate::metrics::recall_at(1, 0.5, &evals);
            let r1_07 = crate::metrics::recall_at(1, 0.7, &evals);
            best_r1 = best_r1.max(r1_05);
            line.push_str(&format!(" val_r1@0.5={r1_05:.6} val_r1@0.7={r1_07:.6}"));
        }
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        println!("{line} wall_s={wall:.1}");
        writeln!(
            timing,
            "epoch={} wall_s={:.3} samples={} samples_per_s={:.1}",
            epoch,
            wall,
            stats.samples,
            stats.samples as f64 / wall
        )
        .map_err(|e| Error::io(&timing_path, e))?;

        if cfg.training.checkpoint_every > 0
            && (epoch + 1) % cfg.training.checkpoint_every == 0
            && epoch + 1 != cfg.training.epochs
        {
            save_checkpoint(&mut model, &out.join(format!("checkpoint_epoch_{epoch}.ckpt")))?;
        }
    }
    save_checkpoint(&mut model, &out.join("checkpoint_final.ckpt"))?;

    let final_line = format!("best_val_r1@0.5={best_r1:.6}");
    writeln!(log, "{final_line}").map_err(|e| Error::io(&log_path, e))?;
    println!("{final_line}");
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut model = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(&args.data, &args.file)?;
    if model.cfg.d_video != data.feature_dim() || model.cfg.d_text != data.token_dim() {
        return Err(Error::Checkpoint(format!(
            "dimension mismatch: checkpoint expects video {} / text {}, dataset provides video {} / text {}",
            model.cfg.d_video,
            model.cfg.d_text,
            data.feature_dim(),
            data.token_dim()
        )));
    }

    let (evals, probs, attention) = infer_dataset(&mut model, &data);
    let result = evaluate(&evals, &probs);
    print!("{}", result.to_text());

    let report_path = args.report.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("report.json")
    });
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    println!("report written to {}", report_path.display());

    if let Some(path) = args.dump_attention {
        let mut out = String::new();
        for (qid, o) in &attention {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({ "qid": qid, "attention": o }))
                    .expect("attention encode"),
            );
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        println!("attention dump written to {}", path.display());
    }

    // Headline metric on stderr-free stdout for quick scripting.
    let key = recall_key(1, 0.5);
    if let Some(v) = result.recall.get(&key) {
        log::info!("{key}={v:.6}");
    }
    Ok(())
}

pub fn cmd_verify() -> Result<()> {
    let start = Instant::now();
    let results = crate::verify::run_all();
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {} - {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "verify: {}/{} suites passed in {:.1}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Validation(format!("{failed} verification suites failed")));
    }
    Ok(())
}
