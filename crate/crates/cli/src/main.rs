mod config;
mod runner;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use handmotion_core::blender::{train_blender, BlendLossKind, BlendWeights, BlenderModel};
use handmotion_core::checkpoint::{save_checkpoint, Checkpoint, ModelKind, ScheduleRecipe};
use handmotion_core::data_io::{
    export_bvh, generate_toy_dataset, load_clip, save_clip, save_dataset, save_split, save_stats,
    split_dataset, MotionClip,
};
use handmotion_core::denoisers::{
    text_encode, DenoiserKind, DenoiserModel, TrainConfig, TrainReport,
};
use handmotion_core::kinematics::SkeletonTemplate;
use handmotion_core::metrics::{train_embedders, EmbedPair};
use handmotion_core::motion_repr::normalize;
use handmotion_core::nn::OptimizerConfig;
use handmotion_core::pipeline::{
    blender_training_pairs, denoiser_training_set, prepare_dataset, run_pipeline, NormStats,
    SampleOptions,
};

use config::{BlenderPairSource, RunConfig};
use runner::{ckpt_path, evaluate, load_embedders, mix_seed, Dataset, EvalFlags, Stack};

#[derive(Parser)]
#[command(name = "handmotion", version, about = "Two-stream hand motion synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Body,
    Text,
    Blender,
    Embedders,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural gesture dataset and a train/test split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clips: Option<usize>,
        /// Dataset directory (defaults to the configured dataset path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one pipeline stage and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize hands for a body clip and a text prompt.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input clip; its body joints are copied into the output verbatim.
        #[arg(long)]
        body_clip: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also export the result as BVH.
        #[arg(long)]
        bvh: Option<PathBuf>,
    },
    /// Run the metric suite on the test split.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep the blend-weight grid, retraining the blender per point.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid spec, e.g. wB=0:1:0.1 (start:end:step for the body weight).
        #[arg(long, default_value = "wB=0:1:0.1")]
        grid: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrain the blender under an ablation and evaluate it.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the kinematic projection into the shared world frame.
        #[arg(long)]
        no_hand_projection: bool,
        /// Replace the blend loss with the random-finger-subset loss.
        #[arg(long)]
        finger_loss: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or config: exit code 2.
    Usage(String),
    /// Everything else: exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    RunConfig::load(path.map(|p| p.as_path())).map_err(|e| usage(format!("{e:#}")))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { config, seed, clips, out } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = clips {
                cfg.data.clips = c;
            }
            if cfg.data.clips == 0 {
                return Err(usage("--clips must be at least 1"));
            }
            let dir = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            gen_data(&cfg, &dir)?;
            Ok(())
        }
        Command::Train { stage, config, steps, seed } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train(&cfg, stage)?;
            Ok(())
        }
        Command::Sample { config, body_clip, prompt, out, iterations, seed, bvh } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(i) = iterations {
                cfg.sample.iterations = i;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if prompt.trim().is_empty() {
                return Err(usage("--prompt must not be empty"));
            }
            sample(&cfg, &body_clip, &prompt, &out, bvh.as_deref())?;
            Ok(())
        }
        Command::Evaluate { config, replicates, report } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(r) = replicates {
                cfg.eval.replicates = r;
            }
            if cfg.eval.replicates < 2 {
                return Err(usage("--replicates must be at least 2"));
            }
            run_evaluate(&cfg, report.as_deref())?;
            Ok(())
        }
        Command::Sweep { config, grid, steps, report } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let points = parse_grid(&grid)?;
            run_sweep(&cfg, &points, report.as_deref())?;
            Ok(())
        }
        Command::Ablate { config, no_hand_projection, finger_loss, steps, report } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if !no_hand_projection && !finger_loss {
                return Err(usage(
                    "select at least one ablation: --no-hand-projection or --finger-loss",
                ));
            }
            cfg.ablation.no_hand_projection = no_hand_projection;
            cfg.ablation.finger_loss = finger_loss;
            run_ablate(&cfg, report.as_deref())?;
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let clips = generate_toy_dataset(cfg.seed, cfg.data.clips, cfg.data.fps, cfg.data.seconds)
        .map_err(anyhow::Error::from)?;
    save_dataset(dir, &clips)?;
    let split = split_dataset(&clips, cfg.data.test_fraction, cfg.seed)?;
    save_split(&split, &dir.join("splits").join("default.split"))?;

    // Reference statistics over the train split; checkpoints carry their own.
    let skel = SkeletonTemplate::smplh52();
    let train_clips: Vec<MotionClip> = clips
        .iter()
        .filter(|c| split.train.contains(&c.motion.clip_id))
        .cloned()
        .collect();
    let prep = prepare_dataset(&train_clips, &skel)?;
    let stats = NormStats::compute(&prep)?;
    for (name, s) in stats.to_map() {
        save_stats(&s, &dir.join("stats").join(format!("{name}.json")))?;
    }

    fs::write(dir.join("config_hash"), format!("{}\n", cfg.hash()))?;
    println!(
        "wrote {} clips ({} train / {} test) to {} [config {}]",
        clips.len(),
        split.train.len(),
        split.test.len(),
        dir.display(),
        cfg.hash()
    );
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
        optimizer: OptimizerConfig {
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
            ..OptimizerConfig::default()
        },
        cond_dropout: cfg.train.cond_dropout,
    }
}

fn write_loss_trace(
    cfg: &RunConfig,
    stage: &str,
    report: &TrainReport,
) -> anyhow::Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# loss trace v1");
    let _ = writeln!(text, "# stage {stage}");
    let _ = writeln!(text, "# config_hash {}", cfg.hash());
    let _ = writeln!(
        text,
        "# steps {} initial_ema {:.9e} final_ema {:.9e}",
        report.steps, report.initial_ema_loss, report.final_ema_loss
    );
    for l in &report.losses {
        let _ = writeln!(text, "{l:.9e}");
    }
    fs::write(cfg.paths.checkpoints.join(format!("{stage}.loss")), text)?;
    Ok(())
}

fn train(cfg: &RunConfig, stage: Stage) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.paths.checkpoints)?;
    let data = Dataset::load(cfg, "default")?;
    let train_clips = data.subset(&data.split.train);
    let skel = SkeletonTemplate::smplh52();
    let prep = prepare_dataset(&train_clips, &skel)?;
    let stats = NormStats::compute(&prep)?;
    let tcfg = train_config(cfg);
    let recipe = ScheduleRecipe {
        kind: cfg.schedule.kind,
        steps: cfg.schedule.steps,
    };
    let sched = recipe.build()?;

    let (stage_name, kind, report) = match stage {
        Stage::Body | Stage::Text => {
            let dkind = if stage == Stage::Body {
                DenoiserKind::BodyConditioned
            } else {
                DenoiserKind::TextConditioned
            };
            let samples = denoiser_training_set(&prep, &stats, dkind)?;
            let mut model = DenoiserModel::new(cfg.denoiser.clone(), dkind, cfg.seed);
            let report = train_denoiser_stage(&mut model, &samples, &sched, &tcfg)?;
            let ckpt = Checkpoint::for_denoiser(&model, recipe, stats.to_map());
            let kind = ckpt.kind;
            save_checkpoint(&ckpt, &ckpt_path(cfg, kind))?;
            (runner::stage_name(kind), kind, report)
        }
        Stage::Blender => {
            let body = runner::require_checkpoint(cfg, ModelKind::BodyDenoiser)?
                .into_denoiser(&ckpt_path(cfg, ModelKind::BodyDenoiser))?;
            let text = runner::require_checkpoint(cfg, ModelKind::TextDenoiser)?
                .into_denoiser(&ckpt_path(cfg, ModelKind::TextDenoiser))?;
            let pairs = blender_training_pairs(
                &prep,
                &body,
                &text,
                &sched,
                &stats,
                &skel,
                cfg.sample.guidance,
                cfg.ablation.no_hand_projection,
                cfg.blender_pairs == BlenderPairSource::GroundTruth,
                mix_seed(cfg.seed, 0xb1e4, 0),
            )?;
            let loss_kind = if cfg.ablation.finger_loss {
                BlendLossKind::RandomFinger
            } else {
                BlendLossKind::Blend
            };
            let mut model = BlenderModel::new(cfg.blender.clone(), cfg.seed);
            let report = train_blender(&mut model, &pairs, &cfg.weights, loss_kind, &tcfg)?;
            let ckpt = Checkpoint::for_blender(&model, stats.to_map());
            save_checkpoint(&ckpt, &ckpt_path(cfg, ModelKind::Blender))?;
            ("blender", ModelKind::Blender, report)
        }
        Stage::Embedders => {
            let pairs = embed_pairs(&prep, &stats)?;
            let (model, report) = train_embedders(cfg.embedder.clone(), &pairs, &tcfg)?;
            let ckpt = Checkpoint::for_embedders(&model, stats.to_map());
            save_checkpoint(&ckpt, &ckpt_path(cfg, ModelKind::Embedders))?;
            ("embedders", ModelKind::Embedders, report)
        }
    };
    write_loss_trace(cfg, stage_name, &report)?;
    println!(
        "trained {stage_name} for {} steps: ema loss {:.6} -> {:.6}, wrote {} [config {}]",
        report.steps,
        report.initial_ema_loss,
        report.final_ema_loss,
        ckpt_path(cfg, kind).display(),
        cfg.hash()
    );
    Ok(())
}

fn train_denoiser_stage(
    model: &mut DenoiserModel,
    samples: &[handmotion_core::denoisers::TrainSample],
    sched: &handmotion_core::diffusion::NoiseSchedule,
    tcfg: &TrainConfig,
) -> anyhow::Result<TrainReport> {
    Ok(handmotion_core::denoisers::train_denoiser(model, samples, sched, tcfg)?)
}

fn embed_pairs(
    prep: &handmotion_core::pipeline::PreparedDataset,
    stats: &NormStats,
) -> anyhow::Result<Vec<EmbedPair>> {
    let mut pairs = Vec::new();
    for clip in &prep.clips {
        let hands = normalize(&clip.global_tensor, &stats.hands_global);
        let body = normalize(&clip.body_tensor, &stats.body);
        for prompt in &clip.prompts {
            pairs.push(EmbedPair {
                hands: hands.clone(),
                body: body.clone(),
                text_token: text_encode(prompt)?.token,
            });
        }
    }
    Ok(pairs)
}

fn sample(
    cfg: &RunConfig,
    body_clip: &Path,
    prompt: &str,
    out: &Path,
    bvh: Option<&Path>,
) -> anyhow::Result<()> {
    let stack = Stack::load(cfg)?;
    let input = load_clip(body_clip)
        .with_context(|| format!("loading body clip {}", body_clip.display()))?;
    let opts = SampleOptions {
        iterations: cfg.sample.iterations,
        guidance: cfg.sample.guidance,
        seed: cfg.seed,
        no_hand_projection: cfg.ablation.no_hand_projection,
    };
    let result = run_pipeline(
        &stack.body_model,
        &stack.text_model,
        &stack.blender,
        &stack.sched,
        &stack.stats,
        &stack.skel,
        &input.motion,
        prompt,
        &opts,
    )?;
    let out_clip = MotionClip {
        motion: result.motion,
        family: input.family,
        annotations: input.annotations.clone(),
        duration_seconds: input.duration_seconds,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_clip(&out_clip, out)?;
    // The clip format has no free-form metadata, so provenance goes in a
    // sidecar file next to the output.
    let meta = format!(
        "config_hash {}\nprompt {}\nseed {}\niterations {}\nbody_clip {}\n",
        cfg.hash(),
        prompt,
        cfg.seed,
        opts.iterations,
        body_clip.display()
    );
    fs::write(out.with_extension("meta"), meta)?;
    if let Some(bvh_path) = bvh {
        export_bvh(&out_clip, bvh_path, &stack.skel)?;
    }
    println!(
        "sampled {} frames -> {} [config {}]",
        out_clip.motion.frames,
        out.display(),
        cfg.hash()
    );
    Ok(())
}

fn report_path(cfg: &RunConfig, default_name: &str, report: Option<&Path>) -> PathBuf {
    report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.reports.join(default_name))
}

fn write_report(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn run_evaluate(cfg: &RunConfig, report: Option<&Path>) -> anyhow::Result<()> {
    let stack = Stack::load(cfg)?;
    let embedders = load_embedders(cfg)?;
    let data = Dataset::load(cfg, "default")?;
    let test_clips = data.subset(&data.split.test);
    let flags = EvalFlags {
        no_hand_projection: cfg.ablation.no_hand_projection,
        finger_loss: cfg.ablation.finger_loss,
    };
    let outcome = evaluate(cfg, &stack, &embedders, &test_clips, &flags, cfg.eval.replicates)?;
    let report_data = outcome
        .report
        .context("metric summary needs at least two replicates")?;
    let text = runner::format_report(
        &report_data,
        &cfg.hash(),
        "evaluate",
        &flags,
        cfg.eval.replicates,
    );
    let path = report_path(cfg, "evaluate.csv", report);
    write_report(&path, &text)?;
    print!("{text}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Parse `wB=start:end:step` into the list of body weights.
fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let body = spec
        .strip_prefix("wB=")
        .ok_or_else(|| usage(format!("grid must look like wB=0:1:0.1, got '{spec}'")))?;
    let parts: Vec<&str> = body.split(':').collect();
    if parts.len() != 3 {
        return Err(usage(format!("grid must be start:end:step, got '{body}'")));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("bad grid number in '{body}': {e}")))?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
        return Err(usage("grid endpoints must lie in [0, 1]"));
    }
    if step <= 0.0 || end < start {
        return Err(usage("grid needs step > 0 and end >= start"));
    }
    let count = ((end - start) / step).round() as usize + 1;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let w = (start + i as f64 * step).min(end);
        // Snap to the step lattice so 0.30000000000000004 prints as 0.3.
        points.push((w / step).round() * step);
    }
    points.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(points)
}

fn run_sweep(cfg: &RunConfig, points: &[f64], report: Option<&Path>) -> anyhow::Result<()> {
    let stack = Stack::load(cfg)?;
    let embedders = load_embedders(cfg)?;
    let data = Dataset::load(cfg, "default")?;
    let train_clips = data.subset(&data.split.train);
    let test_clips = data.subset(&data.split.test);
    let prep = prepare_dataset(&train_clips, &stack.skel)?;
    let stats = NormStats::compute(&prep)?;
    let tcfg = train_config(cfg);
    let pairs = blender_training_pairs(
        &prep,
        &stack.body_model,
        &stack.text_model,
        &stack.sched,
        &stats,
        &stack.skel,
        cfg.sample.guidance,
        false,
        cfg.blender_pairs == BlenderPairSource::GroundTruth,
        mix_seed(cfg.seed, 0xb1e4, 0),
    )?;
    let flags = EvalFlags {
        no_hand_projection: false,
        finger_loss: false,
    };

    let mut text = String::new();
    let _ = writeln!(text, "# sweep v1");
    let _ = writeln!(text, "# config_hash {}", cfg.hash());
    let _ = writeln!(
        text,
        "w_body,w_text,l1_to_body,l1_to_text,r_precision_top1,r_precision_top2,\
         r_precision_top3,fid,mm_dist,diversity,mmodality"
    );
    for &w in points {
        let weights = BlendWeights::new(w, 1.0 - w)?;
        let mut model = BlenderModel::new(cfg.blender.clone(), cfg.seed);
        train_blender(&mut model, &pairs, &weights, BlendLossKind::Blend, &tcfg)?;
        let point_stack = Stack {
            body_model: stack.body_model.clone(),
            text_model: stack.text_model.clone(),
            blender: model,
            sched: stack.sched.clone(),
            stats: stack.stats.clone(),
            skel: stack.skel.clone(),
        };
        // One replicate per grid point keeps the sweep tractable; the
        // evaluate command owns the multi-replicate protocol.
        let outcome = evaluate(cfg, &point_stack, &embedders, &test_clips, &flags, 1)?;
        let m = &outcome.replicates[0];
        let _ = writeln!(
            text,
            "{:.1},{:.1},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            w,
            1.0 - w,
            outcome.l1_to_body,
            outcome.l1_to_text,
            m.r_precision_top1,
            m.r_precision_top2,
            m.r_precision_top3,
            m.fid,
            m.mm_dist,
            m.diversity,
            m.mmodality
        );
        println!("swept w_body={w:.1}: l1_to_body={:.6}", outcome.l1_to_body);
    }
    let path = report_path(cfg, "sweep.csv", report);
    write_report(&path, &text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ablate(cfg: &RunConfig, report: Option<&Path>) -> anyhow::Result<()> {
    let stack = Stack::load(cfg)?;
    let embedders = load_embedders(cfg)?;
    let data = Dataset::load(cfg, "default")?;
    let train_clips = data.subset(&data.split.train);
    let test_clips = data.subset(&data.split.test);
    let prep = prepare_dataset(&train_clips, &stack.skel)?;
    let stats = NormStats::compute(&prep)?;
    let tcfg = train_config(cfg);

    let pairs = blender_training_pairs(
        &prep,
        &stack.body_model,
        &stack.text_model,
        &stack.sched,
        &stats,
        &stack.skel,
        cfg.sample.guidance,
        cfg.ablation.no_hand_projection,
        cfg.blender_pairs == BlenderPairSource::GroundTruth,
        mix_seed(cfg.seed, 0xb1e4, 0),
    )?;
    let loss_kind = if cfg.ablation.finger_loss {
        BlendLossKind::RandomFinger
    } else {
        BlendLossKind::Blend
    };
    let mut model = BlenderModel::new(cfg.blender.clone(), cfg.seed);
    let train_report = train_blender(&mut model, &pairs, &cfg.weights, loss_kind, &tcfg)?;

    let mut tag = String::from("blender");
    if cfg.ablation.no_hand_projection {
        tag.push_str("-noproj");
    }
    if cfg.ablation.finger_loss {
        tag.push_str("-finger");
    }
    let ckpt = Checkpoint::for_blender(&model, stats.to_map());
    let ckpt_file = cfg.paths.checkpoints.join(format!("{tag}.ckpt"));
    fs::create_dir_all(&cfg.paths.checkpoints)?;
    save_checkpoint(&ckpt, &ckpt_file)?;

    let ablated = stack.with_blender(model);
    let flags = EvalFlags {
        no_hand_projection: cfg.ablation.no_hand_projection,
        finger_loss: cfg.ablation.finger_loss,
    };
    let outcome = evaluate(cfg, &ablated, &embedders, &test_clips, &flags, cfg.eval.replicates)?;
    let report_data = outcome
        .report
        .context("metric summary needs at least two replicates")?;
    let text = runner::format_report(
        &report_data,
        &cfg.hash(),
        "ablate",
        &flags,
        cfg.eval.replicates,
    );
    let path = report_path(cfg, &format!("{tag}.csv"), report);
    write_report(&path, &text)?;
    print!("{text}");
    println!(
        "ablation trained (ema {:.6} -> {:.6}), checkpoint {}, report {}",
        train_report.initial_ema_loss,
        train_report.final_ema_loss,
        ckpt_file.display(),
        path.display()
    );
    Ok(())
}
