//! Motion tensor representations and the hand projection pipeline:
//! splitting body/hand joints, extracting wrist-local hand motion, and
//! projecting local hands back into the body's global frame through FK.
//!
//! Every joint carries 9 channels (3 position + 6 rotation), so a hand
//! motion flattens to a `T x 270` tensor and a body condition to `T x 198`.

use ndarray::Array2;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    fk, ik, matrix_to_rot6d, rot6d_to_matrix, JointPose, Rotation6D, SkeletonTemplate,
    BODY_JOINTS, HAND_JOINTS, HAND_START, JOINT_COUNT,
};

pub const CHANNELS_PER_JOINT: usize = 9;
pub const HAND_CHANNELS: usize = HAND_JOINTS * CHANNELS_PER_JOINT; // 270
pub const BODY_CHANNELS: usize = BODY_JOINTS * CHANNELS_PER_JOINT; // 198

/// World-frame motion over the full 52-joint skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMotion {
    pub frames: usize,
    pub fps: f64,
    pub poses: Vec<Vec<JointPose>>, // T x 52
    pub clip_id: String,
}

impl GlobalMotion {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.poses.len() != self.frames {
            return Err(Error::ShapeMismatch(format!(
                "motion '{}' frame count {} vs poses {}",
                self.clip_id,
                self.frames,
                self.poses.len()
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::ShapeMismatch("fps must be positive".into()));
        }
        for frame in &self.poses {
            if frame.len() != JOINT_COUNT {
                return Err(Error::WrongJointCount {
                    expected: JOINT_COUNT,
                    got: frame.len(),
                });
            }
            for p in frame {
                rot6d_to_matrix(&p.rotation)?;
            }
        }
        Ok(())
    }
}

/// World-frame body joints 0..22 used as the implicit condition.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyCondition {
    pub frames: usize,
    pub poses: Vec<Vec<JointPose>>, // T x 22
}

/// World-frame hand joints 22..52.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHandMotion {
    pub frames: usize,
    pub poses: Vec<Vec<JointPose>>, // T x 30
}

/// Hand joints with wrist-relative positions and parent-relative rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHandMotion {
    pub frames: usize,
    pub poses: Vec<Vec<JointPose>>, // T x 30
}

/// Per-channel z-score statistics, std floored at 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute<'a>(tensors: impl Iterator<Item = &'a Array2<f64>> + Clone) -> Result<Self> {
        let mut count = 0usize;
        let mut width = None;
        for t in tensors.clone() {
            width.get_or_insert(t.ncols());
            if Some(t.ncols()) != width {
                return Err(Error::ShapeMismatch("channel widths disagree".into()));
            }
            count += t.nrows();
        }
        let width = width.ok_or(Error::EmptyDataset)?;
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut mean = vec![0.0f64; width];
        for t in tensors.clone() {
            for row in t.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; width];
        for t in tensors {
            for row in t.rows() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|s| (s / count as f64).sqrt().max(1e-8))
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

/// `(x - mean) / std` per channel.
pub fn normalize(x: &Array2<f64>, stats: &ChannelStats) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    out
}

pub fn denormalize(x: &Array2<f64>, stats: &ChannelStats) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = *v * s + m;
        }
    }
    out
}

/// Slice joints 0..22 and 22..52 without changing any value.
pub fn split_body_hands(m: &GlobalMotion) -> Result<(BodyCondition, GlobalHandMotion)> {
    let mut body = Vec::with_capacity(m.frames);
    let mut hands = Vec::with_capacity(m.frames);
    for frame in &m.poses {
        if frame.len() != JOINT_COUNT {
            return Err(Error::WrongJointCount {
                expected: JOINT_COUNT,
                got: frame.len(),
            });
        }
        body.push(frame[..BODY_JOINTS].to_vec());
        hands.push(frame[HAND_START..].to_vec());
    }
    Ok((
        BodyCondition {
            frames: m.frames,
            poses: body,
        },
        GlobalHandMotion {
            frames: m.frames,
            poses: hands,
        },
    ))
}

/// Parent-relative hand rotations via IK plus wrist-relative positions.
pub fn extract_local_hands(m: &GlobalMotion, skel: &SkeletonTemplate) -> Result<LocalHandMotion> {
    let mut out = Vec::with_capacity(m.frames);
    for frame in &m.poses {
        let globals: Vec<Rotation6D> = frame.iter().map(|p| p.rotation).collect();
        let locals = ik(skel, &globals)?;
        let mut hand_frame = Vec::with_capacity(HAND_JOINTS);
        for j in HAND_START..JOINT_COUNT {
            let wrist = skel.wrist_for(j);
            let rel = frame[j].pos() - frame[wrist].pos();
            hand_frame.push(JointPose {
                position: [rel.x, rel.y, rel.z],
                rotation: locals[j],
            });
        }
        out.push(hand_frame);
    }
    Ok(LocalHandMotion {
        frames: m.frames,
        poses: out,
    })
}

/// Local rotations of the body sub-tree (joints 0..22). Body parents are
/// always inside the sub-tree, so IK runs on the slice directly.
fn body_ik(skel: &SkeletonTemplate, body_frame: &[JointPose]) -> Result<Vec<Rotation6D>> {
    let globals: Vec<_> = body_frame
        .iter()
        .map(|p| rot6d_to_matrix(&p.rotation))
        .collect::<Result<Vec<_>>>()?;
    let mut locals = Vec::with_capacity(BODY_JOINTS);
    for i in 0..BODY_JOINTS {
        if i == 0 {
            locals.push(matrix_to_rot6d(&globals[0]));
        } else {
            let p = skel.parent[i] as usize;
            locals.push(matrix_to_rot6d(&(globals[p].transpose() * globals[i])));
        }
    }
    Ok(locals)
}

/// Project wrist-local hands into the body's global frame:
/// run FK over `Cat(IK(body), local hand rotations)` with the body's root
/// translation and return the hand slice. Positions come from FK; the
/// wrist-relative positions stored in `local` are regenerated, not copied.
pub fn project_hands_to_global(
    body: &BodyCondition,
    local: &LocalHandMotion,
    skel: &SkeletonTemplate,
) -> Result<GlobalHandMotion> {
    if body.frames != local.frames {
        return Err(Error::FrameMismatch {
            a: body.frames,
            b: local.frames,
        });
    }
    let mut out = Vec::with_capacity(body.frames);
    for (body_frame, hand_frame) in body.poses.iter().zip(&local.poses) {
        let mut locals = body_ik(skel, body_frame)?;
        locals.extend(hand_frame.iter().map(|p| p.rotation));
        let result = fk(skel, &locals, body_frame[0].pos())?;
        let poses = result.to_poses();
        out.push(poses[HAND_START..].to_vec());
    }
    Ok(GlobalHandMotion {
        frames: body.frames,
        poses: out,
    })
}

/// Flatten per-joint poses to a `T x (9*J)` tensor; channel layout per
/// joint is `[px, py, pz, r6d...]`.
pub fn poses_to_tensor(poses: &[Vec<JointPose>]) -> Array2<f64> {
    let t = poses.len();
    let joints = if t > 0 { poses[0].len() } else { 0 };
    let mut out = Array2::zeros((t, joints * CHANNELS_PER_JOINT));
    for (fi, frame) in poses.iter().enumerate() {
        for (ji, p) in frame.iter().enumerate() {
            let base = ji * CHANNELS_PER_JOINT;
            for k in 0..3 {
                out[(fi, base + k)] = p.position[k];
            }
            for k in 0..6 {
                out[(fi, base + 3 + k)] = p.rotation.0[k];
            }
        }
    }
    out
}

pub fn tensor_to_poses(x: &Array2<f64>) -> Result<Vec<Vec<JointPose>>> {
    if x.ncols() % CHANNELS_PER_JOINT != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} channels is not a multiple of {CHANNELS_PER_JOINT}",
            x.ncols()
        )));
    }
    let joints = x.ncols() / CHANNELS_PER_JOINT;
    let mut out = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let mut frame = Vec::with_capacity(joints);
        for j in 0..joints {
            let base = j * CHANNELS_PER_JOINT;
            frame.push(JointPose {
                position: [row[base], row[base + 1], row[base + 2]],
                rotation: Rotation6D([
                    row[base + 3],
                    row[base + 4],
                    row[base + 5],
                    row[base + 6],
                    row[base + 7],
                    row[base + 8],
                ]),
            });
        }
        out.push(frame);
    }
    Ok(out)
}

/// Re-orthonormalize every rotation channel through a 6d -> matrix -> 6d
/// roundtrip. Used once at final export after linear blending.
pub fn orthonormalize_poses(poses: &mut [Vec<JointPose>]) -> Result<()> {
    for frame in poses.iter_mut() {
        for p in frame.iter_mut() {
            p.rotation = matrix_to_rot6d(&rot6d_to_matrix(&p.rotation)?);
        }
    }
    Ok(())
}

pub fn translate_motion(m: &GlobalMotion, delta: Vector3<f64>) -> GlobalMotion {
    let mut out = m.clone();
    for frame in out.poses.iter_mut() {
        for p in frame.iter_mut() {
            p.position[0] += delta.x;
            p.position[1] += delta.y;
            p.position[2] += delta.z;
        }
    }
    out
}
