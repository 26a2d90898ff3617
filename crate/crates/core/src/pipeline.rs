//! End-to-end plumbing: dataset preparation for the three trainable
//! stages and the full sampling pipeline (text hands, kinematic
//! projection into the body frame, body hands, iterated blending).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::blender::{blend_iterated, BlendPair, BlenderModel};
use crate::data_io::{GestureFamily, MotionClip};
use crate::denoisers::{
    sample_denoiser, text_encode, DenoiserInput, DenoiserKind, DenoiserModel, OwnedCondition,
    TrainSample,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::kinematics::{JointPose, SkeletonTemplate, BODY_JOINTS, JOINT_COUNT};
use crate::motion_repr::{
    denormalize, extract_local_hands, normalize, orthonormalize_poses, poses_to_tensor,
    split_body_hands, tensor_to_poses, BodyCondition, ChannelStats, GlobalMotion,
    LocalHandMotion,
};

/// One clip converted into the tensors the trainable stages consume.
pub struct PreparedClip {
    pub id: String,
    pub family: GestureFamily,
    pub prompts: [String; 3],
    pub body_condition: BodyCondition,
    /// wrist-relative hand channels, T x 270
    pub local_tensor: Array2<f64>,
    /// world-frame hand channels, T x 270
    pub global_tensor: Array2<f64>,
    /// body condition channels, T x 198
    pub body_tensor: Array2<f64>,
}

pub struct PreparedDataset {
    pub clips: Vec<PreparedClip>,
}

/// Per-space normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub hands_local: ChannelStats,
    pub hands_global: ChannelStats,
    pub body: ChannelStats,
}

impl NormStats {
    pub fn compute(prep: &PreparedDataset) -> Result<NormStats> {
        Ok(NormStats {
            hands_local: ChannelStats::compute(prep.clips.iter().map(|c| &c.local_tensor))?,
            hands_global: ChannelStats::compute(prep.clips.iter().map(|c| &c.global_tensor))?,
            body: ChannelStats::compute(prep.clips.iter().map(|c| &c.body_tensor))?,
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, ChannelStats> {
        BTreeMap::from([
            ("hands_local".to_string(), self.hands_local.clone()),
            ("hands_global".to_string(), self.hands_global.clone()),
            ("body".to_string(), self.body.clone()),
        ])
    }

    pub fn from_map(map: &BTreeMap<String, ChannelStats>) -> Result<NormStats> {
        let get = |key: &str| {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::EmptyInput(format!("checkpoint stats '{key}'")))
        };
        Ok(NormStats {
            hands_local: get("hands_local")?,
            hands_global: get("hands_global")?,
            body: get("body")?,
        })
    }
}

/// Join the slot annotations of one paraphrase index into a prompt.
pub fn prompt_for(clip: &MotionClip, variant: usize) -> String {
    let i = variant % 3;
    format!(
        "{}; {}; {}",
        clip.annotations.body[i], clip.annotations.left_hand[i], clip.annotations.right_hand[i]
    )
}

pub fn prepare_clip(clip: &MotionClip, skel: &SkeletonTemplate) -> Result<PreparedClip> {
    clip.motion.validate()?;
    let (body, global_hands) = split_body_hands(&clip.motion)?;
    let local = extract_local_hands(&clip.motion, skel)?;
    Ok(PreparedClip {
        id: clip.motion.clip_id.clone(),
        family: clip.family,
        prompts: [
            prompt_for(clip, 0),
            prompt_for(clip, 1),
            prompt_for(clip, 2),
        ],
        local_tensor: poses_to_tensor(&local.poses),
        global_tensor: poses_to_tensor(&global_hands.poses),
        body_tensor: poses_to_tensor(&body.poses),
        body_condition: body,
    })
}

pub fn prepare_dataset(clips: &[MotionClip], skel: &SkeletonTemplate) -> Result<PreparedDataset> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(PreparedDataset {
        clips: clips
            .iter()
            .map(|c| prepare_clip(c, skel))
            .collect::<Result<_>>()?,
    })
}

/// Training samples for one stage-1 denoiser: normalized local hands as
/// targets, normalized body tensors or encoded prompts as conditions.
/// Text samples use all three annotation paraphrases.
pub fn denoiser_training_set(
    prep: &PreparedDataset,
    stats: &NormStats,
    kind: DenoiserKind,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for clip in &prep.clips {
        let target = normalize(&clip.local_tensor, &stats.hands_local);
        match kind {
            DenoiserKind::BodyConditioned => out.push(TrainSample {
                target,
                condition: OwnedCondition::Body(normalize(&clip.body_tensor, &stats.body)),
            }),
            DenoiserKind::TextConditioned => {
                for prompt in &clip.prompts {
                    out.push(TrainSample {
                        target: target.clone(),
                        condition: OwnedCondition::Text(text_encode(prompt)?),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn local_from_tensor(tensor_norm: &Array2<f64>, stats: &ChannelStats) -> Result<LocalHandMotion> {
    let raw = denormalize(tensor_norm, stats);
    let mut poses = tensor_to_poses(&raw)?;
    orthonormalize_poses(&mut poses)?;
    Ok(LocalHandMotion {
        frames: poses.len(),
        poses,
    })
}

/// Project a normalized local-hand sample into the normalized global
/// blender space through the body's kinematic chain.
pub fn project_sample(
    tensor_norm: &Array2<f64>,
    body: &BodyCondition,
    skel: &SkeletonTemplate,
    stats: &NormStats,
) -> Result<Array2<f64>> {
    let local = local_from_tensor(tensor_norm, &stats.hands_local)?;
    let global = crate::motion_repr::project_hands_to_global(body, &local, skel)?;
    Ok(normalize(&poses_to_tensor(&global.poses), &stats.hands_global))
}

/// Sample both stage-1 denoisers for one clip's condition.
pub struct StagePair {
    /// body-conditioned hands, normalized local space
    pub x_body: Array2<f64>,
    /// text-conditioned hands, normalized local space
    pub x_text: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_stage1(
    body_model: &DenoiserModel,
    text_model: &DenoiserModel,
    sched: &NoiseSchedule,
    stats: &NormStats,
    body_tensor: &Array2<f64>,
    prompt: &str,
    guidance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StagePair> {
    let frames = body_tensor.nrows();
    let body_norm = normalize(body_tensor, &stats.body);
    let x_body = sample_denoiser(
        body_model,
        &DenoiserInput::Body(&body_norm),
        frames,
        sched,
        guidance,
        rng,
    )?;
    let text = text_encode(prompt)?;
    let x_text = sample_denoiser(
        text_model,
        &DenoiserInput::Text(&text),
        frames,
        sched,
        guidance,
        rng,
    )?;
    Ok(StagePair { x_body, x_text })
}

/// Build stage-2 training pairs by sampling the frozen stage-1 models
/// over the training clips. With `ground_truth` the clips' own hands are
/// used instead.
#[allow(clippy::too_many_arguments)]
pub fn blender_training_pairs(
    prep: &PreparedDataset,
    body_model: &DenoiserModel,
    text_model: &DenoiserModel,
    sched: &NoiseSchedule,
    stats: &NormStats,
    skel: &SkeletonTemplate,
    guidance: f64,
    no_hand_projection: bool,
    ground_truth: bool,
    seed: u64,
) -> Result<Vec<BlendPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(prep.clips.len());
    for clip in &prep.clips {
        let (x_body, x_text) = if ground_truth {
            let t = normalize(&clip.local_tensor, &stats.hands_local);
            (t.clone(), t)
        } else {
            let pair = sample_stage1(
                body_model,
                text_model,
                sched,
                stats,
                &clip.body_tensor,
                &clip.prompts[0],
                guidance,
                &mut rng,
            )?;
            (pair.x_body, pair.x_text)
        };
        let (x_body, x_text) = if no_hand_projection {
            (x_body, x_text)
        } else {
            (
                project_sample(&x_body, &clip.body_condition, skel, stats)?,
                project_sample(&x_text, &clip.body_condition, skel, stats)?,
            )
        };
        pairs.push(BlendPair { x_text, x_body });
    }
    Ok(pairs)
}

pub struct SampleOptions {
    pub iterations: usize,
    pub guidance: f64,
    pub seed: u64,
    pub no_hand_projection: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            iterations: 3,
            guidance: 1.0,
            seed: 0,
            no_hand_projection: false,
        }
    }
}

pub struct PipelineOutput {
    /// 52-joint motion: the input body joints bitwise, blended hands.
    pub motion: GlobalMotion,
    /// blender-space streams, kept for diagnostics and sweeps
    pub x_body: Array2<f64>,
    pub x_text: Array2<f64>,
    pub blended: Array2<f64>,
}

/// Full sampling pipeline for one body clip and prompt.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    body_model: &DenoiserModel,
    text_model: &DenoiserModel,
    blender: &BlenderModel,
    sched: &NoiseSchedule,
    stats: &NormStats,
    skel: &SkeletonTemplate,
    body_motion: &GlobalMotion,
    prompt: &str,
    opts: &SampleOptions,
) -> Result<PipelineOutput> {
    body_motion.validate()?;
    let (body, _) = split_body_hands(body_motion)?;
    let body_tensor = poses_to_tensor(&body.poses);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pair = sample_stage1(
        body_model,
        text_model,
        sched,
        stats,
        &body_tensor,
        prompt,
        opts.guidance,
        &mut rng,
    )?;

    let (x_body, x_text) = if opts.no_hand_projection {
        (pair.x_body, pair.x_text)
    } else {
        (
            project_sample(&pair.x_body, &body, skel, stats)?,
            project_sample(&pair.x_text, &body, skel, stats)?,
        )
    };
    let blended = blend_iterated(blender, &x_text, &x_body, opts.iterations)?.output;

    // decode the blended stream back into world-frame hand poses
    let hand_poses = if opts.no_hand_projection {
        let local = local_from_tensor(&blended, &stats.hands_local)?;
        crate::motion_repr::project_hands_to_global(&body, &local, skel)?.poses
    } else {
        let raw = denormalize(&blended, &stats.hands_global);
        let mut poses = tensor_to_poses(&raw)?;
        orthonormalize_poses(&mut poses)?;
        poses
    };

    let mut poses = Vec::with_capacity(body_motion.frames);
    for (f, frame) in body_motion.poses.iter().enumerate() {
        let mut joints: Vec<JointPose> = frame[..BODY_JOINTS].to_vec();
        joints.extend_from_slice(&hand_poses[f]);
        debug_assert_eq!(joints.len(), JOINT_COUNT);
        poses.push(joints);
    }
    let motion = GlobalMotion {
        frames: body_motion.frames,
        fps: body_motion.fps,
        poses,
        clip_id: format!("{}-gen", body_motion.clip_id),
    };
    Ok(PipelineOutput {
        motion,
        x_body,
        x_text,
        blended,
    })
}
