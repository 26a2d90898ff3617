//! Shared glue between the subcommands: artifact paths, checkpoint
//! loading with stage-aware messages, and the evaluation loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use ndarray::Array2;

use handmotion_core::blender::BlenderModel;
use handmotion_core::checkpoint::{load_checkpoint, Checkpoint, ModelKind};
use handmotion_core::data_io::{load_dataset, load_split, DatasetSplit, MotionClip};
use handmotion_core::denoisers::{text_encode, DenoiserModel};
use handmotion_core::diffusion::NoiseSchedule;
use handmotion_core::kinematics::SkeletonTemplate;
use handmotion_core::metrics::{
    diversity, fid, mm_dist, mmodality, r_precision, FeatureEmbedders, MetricsReport,
    ReplicateMetrics,
};
use handmotion_core::motion_repr::normalize;
use handmotion_core::pipeline::{
    prepare_dataset, run_pipeline, NormStats, PipelineOutput, PreparedDataset, SampleOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub fn stage_file(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::BodyDenoiser => "body.ckpt",
        ModelKind::TextDenoiser => "text.ckpt",
        ModelKind::Blender => "blender.ckpt",
        ModelKind::Embedders => "embedders.ckpt",
    }
}

pub fn stage_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::BodyDenoiser => "body",
        ModelKind::TextDenoiser => "text",
        ModelKind::Blender => "blender",
        ModelKind::Embedders => "embedders",
    }
}

pub fn ckpt_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.paths.checkpoints.join(stage_file(kind))
}

pub fn require_checkpoint(cfg: &RunConfig, kind: ModelKind) -> anyhow::Result<Checkpoint> {
    let path = ckpt_path(cfg, kind);
    if !path.exists() {
        bail!(
            "missing {} checkpoint at {}; run `handmotion train --stage {}` first",
            stage_name(kind),
            path.display(),
            stage_name(kind)
        );
    }
    load_checkpoint(&path, kind)
        .with_context(|| format!("loading {} checkpoint", stage_name(kind)))
}

/// Everything the sampling and evaluation commands share.
pub struct Stack {
    pub body_model: DenoiserModel,
    pub text_model: DenoiserModel,
    pub blender: BlenderModel,
    pub sched: NoiseSchedule,
    pub stats: NormStats,
    pub skel: SkeletonTemplate,
}

impl Stack {
    pub fn load(cfg: &RunConfig) -> anyhow::Result<Stack> {
        let body = require_checkpoint(cfg, ModelKind::BodyDenoiser)?;
        let text = require_checkpoint(cfg, ModelKind::TextDenoiser)?;
        let blend = require_checkpoint(cfg, ModelKind::Blender)?;
        let recipe = body
            .schedule
            .ok_or_else(|| anyhow::anyhow!("body checkpoint lacks a noise schedule"))?;
        let stats = NormStats::from_map(&body.stats)?;
        let p = ckpt_path(cfg, ModelKind::BodyDenoiser);
        Ok(Stack {
            body_model: body.into_denoiser(&p)?,
            text_model: text.into_denoiser(&ckpt_path(cfg, ModelKind::TextDenoiser))?,
            blender: blend.into_blender(&ckpt_path(cfg, ModelKind::Blender))?,
            sched: recipe.build()?,
            stats,
            skel: SkeletonTemplate::smplh52(),
        })
    }

    /// Replace the blender (sweep and ablation retraining).
    pub fn with_blender(mut self, blender: BlenderModel) -> Stack {
        self.blender = blender;
        self
    }
}

pub fn load_embedders(cfg: &RunConfig) -> anyhow::Result<FeatureEmbedders> {
    let path = ckpt_path(cfg, ModelKind::Embedders);
    if !path.exists() {
        bail!(
            "missing metric embedders at {}; run `handmotion train --stage embedders` first",
            path.display()
        );
    }
    Ok(load_checkpoint(&path, ModelKind::Embedders)?.into_embedders(&path)?)
}

pub struct Dataset {
    pub clips: Vec<MotionClip>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(cfg: &RunConfig, split_name: &str) -> anyhow::Result<Dataset> {
        let dir = &cfg.paths.dataset;
        let clips = load_dataset(dir)
            .with_context(|| format!("loading dataset from {}", dir.display()))?;
        let split = load_split(&dir.join("splits").join(format!("{split_name}.split")))
            .with_context(|| format!("loading split '{split_name}'"))?;
        Ok(Dataset { clips, split })
    }

    pub fn subset(&self, ids: &[String]) -> Vec<MotionClip> {
        self.clips
            .iter()
            .filter(|c| ids.contains(&c.motion.clip_id))
            .cloned()
            .collect()
    }
}

/// Stable seed derivation (splitmix-style) for nested replicate loops.
pub fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub struct EvalFlags {
    pub no_hand_projection: bool,
    pub finger_loss: bool,
}

pub struct EvalOutcome {
    /// present only with two or more replicates
    pub report: Option<MetricsReport>,
    pub replicates: Vec<ReplicateMetrics>,
    /// mean L1 of the blended stream to the body- and text-conditioned
    /// streams, averaged over clips of the last replicate
    pub l1_to_body: f64,
    pub l1_to_text: f64,
}

fn mean_l1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).sum() / a.len() as f64
}

/// Run the full metric protocol over the given test clips.
pub fn evaluate(
    cfg: &RunConfig,
    stack: &Stack,
    embedders: &FeatureEmbedders,
    test_clips: &[MotionClip],
    flags: &EvalFlags,
    replicates: usize,
) -> anyhow::Result<EvalOutcome> {
    if test_clips.is_empty() {
        bail!("test split is empty");
    }
    let prep = prepare_dataset(test_clips, &stack.skel)?;
    let mut runs = Vec::with_capacity(replicates);
    let mut l1_to_body = 0.0;
    let mut l1_to_text = 0.0;
    for r in 0..replicates {
        let rep_seed = mix_seed(cfg.seed, 0xe7a1, r as u64);
        let (metrics, l1b, l1t) = replicate(cfg, stack, embedders, &prep, test_clips, flags, rep_seed)?;
        runs.push(metrics);
        l1_to_body = l1b;
        l1_to_text = l1t;
    }
    let report = if runs.len() >= 2 {
        Some(MetricsReport::from_replicates(&runs)?)
    } else {
        None
    };
    Ok(EvalOutcome {
        report,
        replicates: runs,
        l1_to_body,
        l1_to_text,
    })
}

fn sample_once(
    cfg: &RunConfig,
    stack: &Stack,
    prep: &PreparedDataset,
    clips: &[MotionClip],
    i: usize,
    flags: &EvalFlags,
    seed: u64,
) -> handmotion_core::Result<PipelineOutput> {
    run_pipeline(
        &stack.body_model,
        &stack.text_model,
        &stack.blender,
        &stack.sched,
        &stack.stats,
        &stack.skel,
        &clips[i].motion,
        &prep.clips[i].prompts[0],
        &SampleOptions {
            iterations: cfg.sample.iterations,
            guidance: cfg.sample.guidance,
            seed,
            no_hand_projection: flags.no_hand_projection,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn replicate(
    cfg: &RunConfig,
    stack: &Stack,
    embedders: &FeatureEmbedders,
    prep: &PreparedDataset,
    clips: &[MotionClip],
    flags: &EvalFlags,
    rep_seed: u64,
) -> anyhow::Result<(ReplicateMetrics, f64, f64)> {
    let n = prep.clips.len();
    let mut gen_feats = Vec::with_capacity(n);
    let mut real_feats = Vec::with_capacity(n);
    let mut cond_feats = Vec::with_capacity(n);
    let mut l1b = 0.0;
    let mut l1t = 0.0;
    for i in 0..n {
        let out = sample_once(cfg, stack, prep, clips, i, flags, mix_seed(rep_seed, 1, i as u64))?;
        l1b += mean_l1(&out.blended, &out.x_body);
        l1t += mean_l1(&out.blended, &out.x_text);
        gen_feats.push(embedders.embed_motion(&out.blended)?);
        let c = &prep.clips[i];
        real_feats.push(
            embedders.embed_motion(&normalize(&c.global_tensor, &stack.stats.hands_global))?,
        );
        let token = text_encode(&c.prompts[0])?;
        cond_feats.push(
            embedders.embed_condition(&normalize(&c.body_tensor, &stack.stats.body), &token.token)?,
        );
    }
    l1b /= n as f64;
    l1t /= n as f64;

    let pool = cfg.eval.pool_size.min(n);
    let mut rp = [0.0; 3];
    for (k, slot) in rp.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rep_seed, 2, k as u64));
        *slot = r_precision(&gen_feats, &cond_feats, pool, k + 1, &mut rng)?;
    }
    let to_array = |feats: &[Vec<f64>]| {
        Array2::from_shape_fn((feats.len(), feats[0].len()), |(i, j)| feats[i][j])
    };
    let fid_val = fid(&to_array(&real_feats), &to_array(&gen_feats))?;
    let mm = mm_dist(&gen_feats, &cond_feats)?;
    let mut div_rng = ChaCha8Rng::seed_from_u64(mix_seed(rep_seed, 3, 0));
    let div = if n >= 2 {
        diversity(&gen_feats, cfg.eval.diversity_pairs, &mut div_rng)?
    } else {
        0.0
    };
    let conditions = cfg.eval.mmodality_conditions.min(n);
    let mmod = mmodality(
        |c, rep| {
            let out = sample_once(
                cfg,
                stack,
                prep,
                clips,
                c,
                flags,
                mix_seed(rep_seed, 4 + c as u64, rep as u64),
            )?;
            embedders.embed_motion(&out.blended)
        },
        conditions,
        cfg.eval.mmodality_repeats,
    )?;
    Ok((
        ReplicateMetrics {
            r_precision_top1: rp[0],
            r_precision_top2: rp[1],
            r_precision_top3: rp[2],
            fid: fid_val,
            mm_dist: mm,
            diversity: div,
            mmodality: mmod,
        },
        l1b,
        l1t,
    ))
}

/// Evaluation report: comment header, then exactly one row per metric.
pub fn format_report(
    report: &MetricsReport,
    config_hash: &str,
    command: &str,
    flags: &EvalFlags,
    replicates: usize,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# report v1");
    let _ = writeln!(out, "# command {command}");
    let _ = writeln!(out, "# config_hash {config_hash}");
    let _ = writeln!(
        out,
        "# ablation no_hand_projection={} finger_loss={}",
        flags.no_hand_projection, flags.finger_loss
    );
    let _ = writeln!(out, "# replicates {replicates}");
    let _ = writeln!(out, "metric,mean,half_width,replicates");
    for (name, s) in report.rows() {
        let _ = writeln!(out, "{name},{:.6},{:.6},{}", s.mean, s.half_width, s.replicates);
    }
    out
}
