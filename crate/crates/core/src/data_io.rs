//! Clip files, the procedural toy-gesture dataset, dataset splits and
//! BVH export.
//!
//! Clip files are versioned structured text so they stay human-diffable.
//! Positions are written at 1e-6 m precision, rotation-6d values at 1e-9.
//! Dataset directories use the layout `clips/*.clip`, `splits/*.split`,
//! `stats/channel_stats`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    fk, matrix_to_rot6d, JointPose, Rotation6D, SkeletonTemplate, JOINT_COUNT, LEFT_WRIST,
    RIGHT_WRIST,
};
use crate::motion_repr::{ChannelStats, GlobalMotion};

pub const CLIP_SCHEMA_VERSION: u32 = 1;
pub const SKELETON_ID: &str = "smplh52";

/// Three independent annotation strings per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub body: [String; 3],
    pub left_hand: [String; 3],
    pub right_hand: [String; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GestureFamily {
    Wave,
    FistCurl,
    Point,
    Pinch,
    Clap,
    CountFingers,
}

pub const ALL_FAMILIES: [GestureFamily; 6] = [
    GestureFamily::Wave,
    GestureFamily::FistCurl,
    GestureFamily::Point,
    GestureFamily::Pinch,
    GestureFamily::Clap,
    GestureFamily::CountFingers,
];

impl fmt::Display for GestureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GestureFamily::Wave => "wave",
            GestureFamily::FistCurl => "fist-curl",
            GestureFamily::Point => "point",
            GestureFamily::Pinch => "pinch",
            GestureFamily::Clap => "clap",
            GestureFamily::CountFingers => "count-fingers",
        };
        f.write_str(s)
    }
}

impl FromStr for GestureFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wave" => Ok(GestureFamily::Wave),
            "fist-curl" => Ok(GestureFamily::FistCurl),
            "point" => Ok(GestureFamily::Point),
            "pinch" => Ok(GestureFamily::Pinch),
            "clap" => Ok(GestureFamily::Clap),
            "count-fingers" => Ok(GestureFamily::CountFingers),
            other => Err(format!("unknown gesture family '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandSide {
    Left,
    Right,
    Both,
}

impl HandSide {
    fn label(&self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
            HandSide::Both => "both",
        }
    }
}

/// One annotated motion clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub motion: GlobalMotion,
    pub family: GestureFamily,
    pub annotations: Annotations,
    pub duration_seconds: f64,
}

// ---------------------------------------------------------------------------
// clip file format

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::ParseError {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn save_clip(clip: &MotionClip, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("clip v{CLIP_SCHEMA_VERSION}\n"));
    out.push_str(&format!("skeleton {SKELETON_ID}\n"));
    out.push_str(&format!("id {}\n", clip.motion.clip_id));
    out.push_str(&format!("family {}\n", clip.family));
    out.push_str(&format!("fps {}\n", clip.motion.fps));
    out.push_str(&format!("frames {}\n", clip.motion.frames));
    out.push_str(&format!("duration {:.6}\n", clip.duration_seconds));
    for (slot, texts) in [
        ("body", &clip.annotations.body),
        ("left_hand", &clip.annotations.left_hand),
        ("right_hand", &clip.annotations.right_hand),
    ] {
        for text in texts {
            out.push_str(&format!("annotation {slot} {text}\n"));
        }
    }
    for (f, frame) in clip.motion.poses.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            out.push_str(&format!(
                "pose {f} {j} {:.6} {:.6} {:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                p.position[0],
                p.position[1],
                p.position[2],
                p.rotation.0[0],
                p.rotation.0[1],
                p.rotation.0[2],
                p.rotation.0[3],
                p.rotation.0[4],
                p.rotation.0[5],
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<MotionClip> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (n, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let version: u32 = first
        .strip_prefix("clip v")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(path, n + 1, "expected 'clip v<version>' header"))?;
    if version != CLIP_SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            found: version,
            expected: CLIP_SCHEMA_VERSION,
        });
    }

    let mut skeleton = None;
    let mut id = None;
    let mut family = None;
    let mut fps = None;
    let mut frames = None;
    let mut duration = None;
    let mut body_ann: Vec<String> = Vec::new();
    let mut left_ann: Vec<String> = Vec::new();
    let mut right_ann: Vec<String> = Vec::new();
    let mut poses: Vec<Vec<JointPose>> = Vec::new();

    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, lineno, "expected '<key> <value>'"))?;
        match key {
            "skeleton" => skeleton = Some(rest.to_string()),
            "id" => id = Some(rest.to_string()),
            "family" => {
                family = Some(
                    GestureFamily::from_str(rest).map_err(|e| parse_err(path, lineno, e))?,
                )
            }
            "fps" => {
                fps = Some(
                    rest.parse::<f64>()
                        .map_err(|e| parse_err(path, lineno, format!("bad fps: {e}")))?,
                )
            }
            "frames" => {
                frames = Some(
                    rest.parse::<usize>()
                        .map_err(|e| parse_err(path, lineno, format!("bad frame count: {e}")))?,
                )
            }
            "duration" => {
                duration = Some(
                    rest.parse::<f64>()
                        .map_err(|e| parse_err(path, lineno, format!("bad duration: {e}")))?,
                )
            }
            "annotation" => {
                let (slot, text) = rest
                    .split_once(' ')
                    .ok_or_else(|| parse_err(path, lineno, "annotation needs slot and text"))?;
                if text.trim().is_empty() {
                    return Err(parse_err(path, lineno, "empty annotation text"));
                }
                match slot {
                    "body" => body_ann.push(text.to_string()),
                    "left_hand" => left_ann.push(text.to_string()),
                    "right_hand" => right_ann.push(text.to_string()),
                    other => {
                        return Err(parse_err(path, lineno, format!("unknown slot '{other}'")))
                    }
                }
            }
            "pose" => {
                let nums: Vec<&str> = rest.split_whitespace().collect();
                if nums.len() != 11 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("pose line needs 11 fields, got {}", nums.len()),
                    ));
                }
                let f: usize = nums[0]
                    .parse()
                    .map_err(|e| parse_err(path, lineno, format!("bad frame index: {e}")))?;
                let j: usize = nums[1]
                    .parse()
                    .map_err(|e| parse_err(path, lineno, format!("bad joint index: {e}")))?;
                let mut vals = [0.0f64; 9];
                for (k, s) in nums[2..].iter().enumerate() {
                    vals[k] = s
                        .parse()
                        .map_err(|e| parse_err(path, lineno, format!("bad number: {e}")))?;
                }
                if f != poses.len().saturating_sub(1) && f != poses.len() {
                    return Err(parse_err(path, lineno, format!("frame {f} out of order")));
                }
                if f == poses.len() {
                    poses.push(Vec::with_capacity(JOINT_COUNT));
                }
                if j != poses[f].len() {
                    return Err(parse_err(path, lineno, format!("joint {j} out of order")));
                }
                poses[f].push(JointPose {
                    position: [vals[0], vals[1], vals[2]],
                    rotation: Rotation6D([
                        vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
                    ]),
                });
            }
            other => return Err(parse_err(path, lineno, format!("unknown key '{other}'"))),
        }
    }

    let skeleton = skeleton.ok_or_else(|| parse_err(path, 0, "missing skeleton line"))?;
    if skeleton != SKELETON_ID {
        return Err(Error::WrongSkeleton {
            found: skeleton,
            expected: SKELETON_ID.to_string(),
        });
    }
    let annotations = Annotations {
        body: ann_array(path, "body", body_ann)?,
        left_hand: ann_array(path, "left_hand", left_ann)?,
        right_hand: ann_array(path, "right_hand", right_ann)?,
    };
    let frames = frames.ok_or_else(|| parse_err(path, 0, "missing frames line"))?;
    let fps = fps.ok_or_else(|| parse_err(path, 0, "missing fps line"))?;
    let duration = duration.ok_or_else(|| parse_err(path, 0, "missing duration line"))?;
    if poses.len() != frames || poses.iter().any(|f| f.len() != JOINT_COUNT) {
        return Err(parse_err(
            path,
            0,
            format!("expected {frames} frames x {JOINT_COUNT} joints of pose data"),
        ));
    }
    if fps > 0.0 && (duration - frames as f64 / fps).abs() > 0.5 / fps {
        return Err(parse_err(path, 0, "duration inconsistent with frames/fps"));
    }
    let motion = GlobalMotion {
        frames,
        fps,
        poses,
        clip_id: id.ok_or_else(|| parse_err(path, 0, "missing id line"))?,
    };
    motion.validate()?;
    Ok(MotionClip {
        motion,
        family: family.ok_or_else(|| parse_err(path, 0, "missing family line"))?,
        annotations,
        duration_seconds: duration,
    })
}

fn ann_array(path: &Path, slot: &str, v: Vec<String>) -> Result<[String; 3]> {
    <[String; 3]>::try_from(v).map_err(|v: Vec<String>| {
        parse_err(
            path,
            0,
            format!("slot '{slot}' needs exactly 3 annotations, got {}", v.len()),
        )
    })
}

// ---------------------------------------------------------------------------
// toy gesture generator

/// Parameters of one generated clip.
#[derive(Debug, Clone)]
pub struct ToyGestureSpec {
    pub family: GestureFamily,
    pub amplitude: f64,
    pub frequency: f64,
    pub side: HandSide,
    /// `count-fingers` only: number of extended fingers, 1..=5.
    pub finger_count: usize,
}

const CURLED_ANGLE: f64 = 1.3;
const EXTENDED_ANGLE: f64 = 0.05;
const REST_ANGLE: f64 = 0.3;
/// Per-joint curl-angle threshold separating extended from curled fingers.
pub const EXTENDED_THRESHOLD: f64 = 0.5;

fn rot_axis(axis: Vector3<f64>, angle: f64) -> Rotation6D {
    let unit = nalgebra::Unit::new_normalize(axis);
    matrix_to_rot6d(Rotation3::from_axis_angle(&unit, angle).matrix())
}

/// Set the curl angle of one finger (index 0..5 within a hand) on all
/// three of its joints. Finger order follows the skeleton: index,
/// middle, pinky, ring, thumb.
fn curl_finger(locals: &mut [Rotation6D], wrist: usize, finger: usize, angle: f64) {
    let hand_start = if wrist == LEFT_WRIST { 22 } else { 37 };
    let sign = if wrist == LEFT_WRIST { -1.0 } else { 1.0 };
    for k in 0..3 {
        locals[hand_start + finger * 3 + k] = rot_axis(Vector3::z(), sign * angle);
    }
}

/// Display order for counting: thumb first, then index to pinky.
const COUNT_ORDER: [usize; 5] = [4, 0, 1, 3, 2];

fn hand_pose_for(
    spec: &ToyGestureSpec,
    locals: &mut [Rotation6D],
    wrist: usize,
    active: bool,
    phase: f64,
) {
    if !active {
        for finger in 0..5 {
            curl_finger(locals, wrist, finger, REST_ANGLE);
        }
        return;
    }
    let osc = 0.5 + 0.5 * (spec.frequency * std::f64::consts::TAU * phase).sin();
    match spec.family {
        GestureFamily::Wave => {
            for finger in 0..5 {
                curl_finger(locals, wrist, finger, 0.1);
            }
            let sign = if wrist == LEFT_WRIST { 1.0 } else { -1.0 };
            locals[wrist] = rot_axis(Vector3::z(), sign * spec.amplitude * (osc - 0.5) * 2.0);
        }
        GestureFamily::FistCurl => {
            for finger in 0..5 {
                curl_finger(locals, wrist, finger, spec.amplitude * osc);
            }
        }
        GestureFamily::Point => {
            for finger in 0..5 {
                let angle = if finger == 0 { EXTENDED_ANGLE } else { CURLED_ANGLE };
                curl_finger(locals, wrist, finger, angle);
            }
        }
        GestureFamily::Pinch => {
            // thumb and index close on each other, others stay half-curled
            curl_finger(locals, wrist, 0, 0.2 + 0.6 * osc);
            curl_finger(locals, wrist, 4, 0.2 + 0.5 * osc);
            for finger in [1, 2, 3] {
                curl_finger(locals, wrist, finger, 0.6);
            }
        }
        GestureFamily::Clap => {
            for finger in 0..5 {
                curl_finger(locals, wrist, finger, EXTENDED_ANGLE);
            }
        }
        GestureFamily::CountFingers => {
            for (slot, &finger) in COUNT_ORDER.iter().enumerate() {
                let angle = if slot < spec.finger_count {
                    EXTENDED_ANGLE
                } else {
                    CURLED_ANGLE
                };
                curl_finger(locals, wrist, finger, angle);
            }
        }
    }
}

fn body_pose_for(spec: &ToyGestureSpec, locals: &mut [Rotation6D], phase: f64) {
    let sway = 0.08 * (0.5 * spec.frequency * std::f64::consts::TAU * phase).sin();
    locals[3] = rot_axis(Vector3::y(), sway); // spine1
    locals[6] = rot_axis(Vector3::y(), -0.5 * sway); // spine2
    // arms slightly forward so the hands sit in front of the torso
    locals[16] = rot_axis(Vector3::x(), 0.3); // left_shoulder
    locals[17] = rot_axis(Vector3::x(), 0.3); // right_shoulder
    locals[18] = rot_axis(Vector3::x(), 0.4); // left_elbow
    locals[19] = rot_axis(Vector3::x(), 0.4); // right_elbow
    if spec.family == GestureFamily::Clap {
        let close = 0.2 + 0.35 * (spec.frequency * std::f64::consts::TAU * phase).sin().abs();
        locals[16] = rot_axis(Vector3::y(), -close);
        locals[17] = rot_axis(Vector3::y(), close);
    }
}

fn annotations_for(spec: &ToyGestureSpec) -> Annotations {
    let side = spec.side.label();
    let hand_texts = |acting: bool, hand: &str| -> [String; 3] {
        if !acting {
            return [
                format!("the {hand} hand rests in a relaxed half curl"),
                format!("{hand} hand relaxed at the side"),
                format!("a loose resting pose of the {hand} hand"),
            ];
        }
        match spec.family {
            GestureFamily::Wave => [
                format!("the {hand} hand waves from side to side"),
                format!("{hand} hand waving back and forth"),
                format!("a waving motion of the {hand} hand"),
            ],
            GestureFamily::FistCurl => [
                format!("the {hand} hand curls into a fist and opens again"),
                format!("{hand} fingers clench and release repeatedly"),
                format!("making a fist with the {hand} hand"),
            ],
            GestureFamily::Point => [
                format!("the {hand} index finger points forward"),
                format!("{hand} hand pointing with the index finger"),
                format!("a pointing gesture of the {hand} hand"),
            ],
            GestureFamily::Pinch => [
                format!("the {hand} thumb and index finger pinch together"),
                format!("{hand} hand performing a pinching motion"),
                format!("pinching with the {hand} thumb and index finger"),
            ],
            GestureFamily::Clap => [
                format!("the {hand} palm opens flat to clap"),
                format!("{hand} hand flat with fingers extended for clapping"),
                format!("open {hand} palm moving to clap"),
            ],
            GestureFamily::CountFingers => [
                format!("the {hand} hand holds up {} fingers", spec.finger_count),
                format!("{} fingers extended on the {hand} hand", spec.finger_count),
                format!("counting to {} on the {hand} hand", spec.finger_count),
            ],
        }
    };
    let body = match spec.family {
        GestureFamily::Clap => [
            "arms swing together in front of the chest".to_string(),
            "the arms move inward as if clapping".to_string(),
            "standing with arms coming together repeatedly".to_string(),
        ],
        _ => [
            format!("standing with the torso swaying gently, {side} hand raised"),
            format!("upright stance, slight sway, acting with the {side} hand"),
            format!("a standing figure gesturing with the {side} hand"),
        ],
    };
    let left_active = matches!(spec.side, HandSide::Left | HandSide::Both);
    let right_active = matches!(spec.side, HandSide::Right | HandSide::Both);
    Annotations {
        body,
        left_hand: hand_texts(left_active, "left"),
        right_hand: hand_texts(right_active, "right"),
    }
}

/// Animate one clip from its spec.
pub fn generate_clip(
    spec: &ToyGestureSpec,
    clip_id: &str,
    fps: f64,
    seconds: f64,
    skel: &SkeletonTemplate,
) -> Result<MotionClip> {
    let frames = (fps * seconds).round().max(1.0) as usize;
    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        let phase = f as f64 / fps;
        let mut locals = vec![Rotation6D::IDENTITY; JOINT_COUNT];
        body_pose_for(spec, &mut locals, phase);
        let left_active = matches!(spec.side, HandSide::Left | HandSide::Both);
        let right_active = matches!(spec.side, HandSide::Right | HandSide::Both);
        hand_pose_for(spec, &mut locals, LEFT_WRIST, left_active, phase);
        hand_pose_for(spec, &mut locals, RIGHT_WRIST, right_active, phase);
        let root = Vector3::new(0.02 * (0.7 * phase).sin(), 0.98, 0.02 * (0.5 * phase).cos());
        poses.push(fk(skel, &locals, root)?.to_poses());
    }
    let motion = GlobalMotion {
        frames,
        fps,
        poses,
        clip_id: clip_id.to_string(),
    };
    Ok(MotionClip {
        motion,
        family: spec.family,
        annotations: annotations_for(spec),
        duration_seconds: frames as f64 / fps,
    })
}

/// Deterministic toy dataset; families cycle so every family is equally
/// represented.
pub fn generate_toy_dataset(
    seed: u64,
    clip_count: usize,
    fps: f64,
    seconds: f64,
) -> Result<Vec<MotionClip>> {
    if clip_count == 0 {
        return Err(Error::EmptyInput("clip_count".into()));
    }
    let skel = SkeletonTemplate::smplh52();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(clip_count);
    for i in 0..clip_count {
        let family = ALL_FAMILIES[i % ALL_FAMILIES.len()];
        let side = match family {
            GestureFamily::Clap => HandSide::Both,
            // one acting hand keeps per-hand annotations unambiguous
            _ => {
                if rng.gen::<bool>() {
                    HandSide::Left
                } else {
                    HandSide::Right
                }
            }
        };
        let spec = ToyGestureSpec {
            family,
            amplitude: rng.gen_range(0.6..1.3),
            frequency: rng.gen_range(0.5..1.5),
            side,
            finger_count: rng.gen_range(1..=5),
        };
        clips.push(generate_clip(
            &spec,
            &format!("toy-{i:04}"),
            fps,
            seconds,
            &skel,
        )?);
    }
    Ok(clips)
}

// ---------------------------------------------------------------------------
// splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded, family-stratified split.
pub fn split_dataset(
    clips: &[MotionClip],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if clips.is_empty() {
        return Err(Error::TooFewClips { got: 0, need: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for family in ALL_FAMILIES {
        let mut ids: Vec<&str> = clips
            .iter()
            .filter(|c| c.family == family)
            .map(|c| c.motion.clip_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.shuffle(&mut rng);
        let n_test = (ids.len() as f64 * test_fraction).round() as usize;
        let n_test = n_test.min(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            if i < n_test {
                test.push(id.to_string());
            } else {
                train.push(id.to_string());
            }
        }
    }
    Ok(DatasetSplit { train, test, seed })
}

pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut out = format!("split v1\nseed {}\n", split.seed);
    for id in &split.train {
        out.push_str(&format!("train {id}\n"));
    }
    for id in &split.test {
        out.push_str(&format!("test {id}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if first != "split v1" {
        return Err(parse_err(path, 1, "expected 'split v1' header"));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed: 0,
    };
    for (i, line) in lines {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, i + 1, "expected '<key> <value>'"))?;
        match key {
            "seed" => {
                split.seed = rest
                    .parse()
                    .map_err(|e| parse_err(path, i + 1, format!("bad seed: {e}")))?
            }
            "train" => split.train.push(rest.to_string()),
            "test" => split.test.push(rest.to_string()),
            other => return Err(parse_err(path, i + 1, format!("unknown key '{other}'"))),
        }
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// dataset directory layout

pub fn save_dataset(dir: &Path, clips: &[MotionClip]) -> Result<()> {
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir)?;
    fs::create_dir_all(dir.join("splits"))?;
    fs::create_dir_all(dir.join("stats"))?;
    for clip in clips {
        save_clip(clip, &clip_dir.join(format!("{}.clip", clip.motion.clip_id)))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<MotionClip>> {
    let clip_dir = dir.join("clips");
    let mut paths: Vec<_> = fs::read_dir(&clip_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "clip"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::TooFewClips { got: 0, need: 1 });
    }
    paths.iter().map(|p| load_clip(p)).collect()
}

pub fn save_stats(stats: &ChannelStats, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(stats).expect("stats serialize");
    fs::write(path, json)?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<ChannelStats> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, 0, e.to_string()))
}

// ---------------------------------------------------------------------------
// BVH export

/// Local ZYX Euler angles (degrees) per joint, root translation in the
/// first three channels. Frame time is 1/fps.
pub fn export_bvh(clip: &MotionClip, path: &Path, skel: &SkeletonTemplate) -> Result<()> {
    use crate::kinematics::{ik, rot6d_to_matrix};

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); skel.joint_count];
    for (j, &p) in skel.parent.iter().enumerate() {
        if p >= 0 {
            children[p as usize].push(j);
        }
    }
    let mut out = String::from("HIERARCHY\n");
    fn emit(
        out: &mut String,
        skel: &SkeletonTemplate,
        children: &[Vec<usize>],
        j: usize,
        depth: usize,
    ) {
        let pad = "  ".repeat(depth);
        let o = &skel.rest_offset[j];
        if j == 0 {
            out.push_str(&format!("ROOT {}\n{pad}{{\n", skel.names[j]));
            out.push_str(&format!("{pad}  OFFSET 0.000000 0.000000 0.000000\n"));
            out.push_str(&format!(
                "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation\n"
            ));
        } else {
            out.push_str(&format!("{pad}JOINT {}\n{pad}{{\n", skel.names[j]));
            out.push_str(&format!(
                "{pad}  OFFSET {:.6} {:.6} {:.6}\n",
                o.x, o.y, o.z
            ));
            out.push_str(&format!(
                "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation\n"
            ));
        }
        if children[j].is_empty() {
            out.push_str(&format!(
                "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0.000000 0.000000 0.020000\n{pad}  }}\n"
            ));
        } else {
            for &c in &children[j] {
                emit(out, skel, children, c, depth + 1);
            }
        }
        out.push_str(&format!("{pad}}}\n"));
    }
    emit(&mut out, skel, &children, 0, 0);

    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", clip.motion.frames));
    out.push_str(&format!("Frame Time: {:.8}\n", 1.0 / clip.motion.fps));
    for frame in &clip.motion.poses {
        let globals: Vec<Rotation6D> = frame.iter().map(|p| p.rotation).collect();
        let locals = ik(skel, &globals)?;
        let mut fields = Vec::with_capacity(3 + 3 * skel.joint_count);
        let root = &frame[0].position;
        fields.extend([root[0], root[1], root[2]]);
        for r6 in &locals {
            let m = rot6d_to_matrix(r6)?;
            let rot = Rotation3::from_matrix_unchecked(m);
            // nalgebra euler_angles() returns (x, y, z) for R = Rz Ry Rx
            let (x, y, z) = rot.euler_angles();
            fields.extend([z.to_degrees(), y.to_degrees(), x.to_degrees()]);
        }
        let line: Vec<String> = fields.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::rot6d_to_matrix;
    use crate::motion_repr::{extract_local_hands, project_hands_to_global, split_body_hands};
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    fn small_dataset() -> Vec<MotionClip> {
        generate_toy_dataset(7, 6, 20.0, 1.0).unwrap()
    }

    #[test]
    fn save_load_roundtrip_at_declared_precision() {
        let dir = tempdir().unwrap();
        for clip in small_dataset() {
            let path = dir.path().join(format!("{}.clip", clip.motion.clip_id));
            save_clip(&clip, &path).unwrap();
            let back = load_clip(&path).unwrap();
            assert_eq!(back.family, clip.family);
            assert_eq!(back.annotations, clip.annotations);
            assert_eq!(back.motion.frames, clip.motion.frames);
            for (a, b) in clip.motion.poses.iter().flatten().zip(back.motion.poses.iter().flatten())
            {
                for k in 0..3 {
                    assert!((a.position[k] - b.position[k]).abs() <= 1e-6);
                }
                for k in 0..6 {
                    assert!((a.rotation.0[k] - b.rotation.0[k]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempdir().unwrap();
        let clip = &small_dataset()[0];
        let path = dir.path().join("c.clip");
        save_clip(clip, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(text.lines().count() / 2).collect::<Vec<_>>().join("\n");
        fs::write(&path, cut).unwrap();
        assert!(matches!(load_clip(&path), Err(Error::ParseError { .. })));
    }

    #[test]
    fn version_and_skeleton_mismatches() {
        let dir = tempdir().unwrap();
        let clip = &small_dataset()[0];
        let path = dir.path().join("c.clip");
        save_clip(clip, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("clip v1", "clip v2")).unwrap();
        assert!(matches!(
            load_clip(&path),
            Err(Error::SchemaVersionMismatch { found: 2, expected: 1 })
        ));

        fs::write(&path, text.replace("skeleton smplh52", "skeleton other99")).unwrap();
        assert!(matches!(load_clip(&path), Err(Error::WrongSkeleton { .. })));
    }

    #[test]
    fn wrong_annotation_count_is_rejected() {
        let dir = tempdir().unwrap();
        let clip = &small_dataset()[0];
        let path = dir.path().join("c.clip");
        save_clip(clip, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // drop one body annotation line
        let dropped: Vec<&str> = text
            .lines()
            .enumerate()
            .filter(|(i, l)| !(*i == 7 && l.starts_with("annotation body")))
            .map(|(_, l)| l)
            .collect();
        fs::write(&path, dropped.join("\n")).unwrap();
        let err = load_clip(&path).unwrap_err();
        assert!(err.to_string().contains("exactly 3 annotations"), "{err}");
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_toy_dataset(3, 6, 20.0, 1.0).unwrap();
        let b = generate_toy_dataset(3, 6, 20.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(4, 6, 20.0, 1.0).unwrap();
        assert_ne!(a, c);
        assert!(matches!(
            generate_toy_dataset(3, 0, 20.0, 1.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn generated_clips_default_to_five_seconds() {
        let clips = generate_toy_dataset(0, 1, 20.0, 5.0).unwrap();
        assert_eq!(clips[0].motion.frames, 100);
        assert!((clips[0].duration_seconds - 5.0).abs() < 1e-9);
    }

    #[test]
    fn generated_clips_pass_extract_project_roundtrip() {
        let skel = SkeletonTemplate::smplh52();
        for clip in small_dataset() {
            clip.motion.validate().unwrap();
            let (body, global_hands) = split_body_hands(&clip.motion).unwrap();
            let local = extract_local_hands(&clip.motion, &skel).unwrap();
            let re = project_hands_to_global(&body, &local, &skel).unwrap();
            for (a, b) in global_hands
                .poses
                .iter()
                .flatten()
                .zip(re.poses.iter().flatten())
            {
                for k in 0..3 {
                    assert_abs_diff_eq!(a.position[k], b.position[k], epsilon = 1e-5);
                }
            }
        }
    }

    /// A finger counts as extended when every one of its joints rotates
    /// less than the threshold angle.
    fn extended_fingers(frame: &[JointPose], skel: &SkeletonTemplate, wrist: usize) -> usize {
        let globals: Vec<Rotation6D> = frame.iter().map(|p| p.rotation).collect();
        let locals = crate::kinematics::ik(skel, &globals).unwrap();
        let hand_start = if wrist == LEFT_WRIST { 22 } else { 37 };
        (0..5)
            .filter(|finger| {
                (0..3).all(|k| {
                    let m = rot6d_to_matrix(&locals[hand_start + finger * 3 + k]).unwrap();
                    let angle = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
                    angle < EXTENDED_THRESHOLD
                })
            })
            .count()
    }

    #[test]
    fn count_fingers_annotation_matches_pose() {
        let skel = SkeletonTemplate::smplh52();
        let clips = generate_toy_dataset(11, 36, 20.0, 0.5).unwrap();
        let mut checked = 0;
        for clip in clips.iter().filter(|c| c.family == GestureFamily::CountFingers) {
            let text = &clip.annotations.left_hand[0];
            let (wrist, text) = if text.contains("rests") {
                (RIGHT_WRIST, &clip.annotations.right_hand[0])
            } else {
                (LEFT_WRIST, text)
            };
            let stated: usize = text
                .split_whitespace()
                .find_map(|w| w.parse().ok())
                .expect("annotation holds a digit");
            for frame in &clip.motion.poses {
                assert_eq!(extended_fingers(frame, &skel, wrist), stated);
            }
            checked += 1;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn split_contract() {
        let clips = generate_toy_dataset(5, 60, 20.0, 0.25).unwrap();
        let split = split_dataset(&clips, 0.2, 9).unwrap();
        assert_eq!(split.train.len() + split.test.len(), clips.len());
        for id in &split.test {
            assert!(!split.train.contains(id));
        }
        // stratified: every family in both halves at 10 clips/family
        for family in ALL_FAMILIES {
            let ids: Vec<&String> = clips
                .iter()
                .filter(|c| c.family == family)
                .map(|c| &c.motion.clip_id)
                .collect();
            assert!(ids.iter().any(|id| split.train.contains(id)), "{family}");
            assert!(ids.iter().any(|id| split.test.contains(id)), "{family}");
        }
        assert_eq!(split, split_dataset(&clips, 0.2, 9).unwrap());
        assert!(split_dataset(&clips, 0.0, 9).unwrap().test.is_empty());
        assert!(matches!(
            split_dataset(&[], 0.2, 9),
            Err(Error::TooFewClips { .. })
        ));
    }

    #[test]
    fn split_file_roundtrip() {
        let dir = tempdir().unwrap();
        let clips = small_dataset();
        let split = split_dataset(&clips, 0.34, 1).unwrap();
        let path = dir.path().join("default.split");
        save_split(&split, &path).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempdir().unwrap();
        let clips = small_dataset();
        save_dataset(dir.path(), &clips).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), clips.len());
        let ids: Vec<&String> = back.iter().map(|c| &c.motion.clip_id).collect();
        for clip in &clips {
            assert!(ids.contains(&&clip.motion.clip_id));
        }
    }

    #[derive(Debug)]
    struct BvhDoc {
        joints: usize,
        frames: usize,
        frame_time: f64,
        channels: usize,
        rows: Vec<Vec<f64>>,
    }

    fn parse_bvh(text: &str) -> BvhDoc {
        let mut joints = 0;
        let mut channels = 0;
        let mut frames = 0;
        let mut frame_time = 0.0;
        let mut rows = Vec::new();
        let mut in_motion = false;
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with("ROOT") || t.starts_with("JOINT") {
                joints += 1;
            } else if let Some(rest) = t.strip_prefix("CHANNELS ") {
                channels += rest
                    .split_whitespace()
                    .next()
                    .unwrap()
                    .parse::<usize>()
                    .unwrap();
            } else if t == "MOTION" {
                in_motion = true;
            } else if let Some(rest) = t.strip_prefix("Frames: ") {
                frames = rest.parse().unwrap();
            } else if let Some(rest) = t.strip_prefix("Frame Time: ") {
                frame_time = rest.parse().unwrap();
            } else if in_motion && !t.is_empty() && frame_time > 0.0 {
                rows.push(
                    t.split_whitespace()
                        .map(|v| v.parse().unwrap())
                        .collect::<Vec<f64>>(),
                );
            }
        }
        BvhDoc {
            joints,
            frames,
            frame_time,
            channels,
            rows,
        }
    }

    #[test]
    fn bvh_export_structure_and_parse_back() {
        let skel = SkeletonTemplate::smplh52();
        let clip = &generate_toy_dataset(2, 2, 20.0, 0.5).unwrap()[1];
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.bvh");
        export_bvh(clip, &path, &skel).unwrap();
        let doc = parse_bvh(&fs::read_to_string(&path).unwrap());
        assert_eq!(doc.joints, JOINT_COUNT);
        assert_eq!(doc.frames, clip.motion.frames);
        assert!((doc.frame_time - 0.05).abs() < 1e-9);
        assert_eq!(doc.channels, 6 + 3 * (JOINT_COUNT - 1));
        assert_eq!(doc.rows.len(), clip.motion.frames);

        // Euler -> matrix round trip against the clip's local rotations
        for (f, row) in doc.rows.iter().enumerate() {
            assert_eq!(row.len(), doc.channels);
            let globals: Vec<Rotation6D> = clip.motion.poses[f]
                .iter()
                .map(|p| p.rotation)
                .collect();
            let locals = crate::kinematics::ik(&skel, &globals).unwrap();
            for j in 0..JOINT_COUNT {
                let base = 3 + j * 3;
                let (z, y, x) = (
                    row[base].to_radians(),
                    row[base + 1].to_radians(),
                    row[base + 2].to_radians(),
                );
                let m = Rotation3::from_euler_angles(x, y, z);
                let want = rot6d_to_matrix(&locals[j]).unwrap();
                for (a, b) in m.matrix().iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-4, "joint {j} frame {f}");
                }
            }
        }
    }
}
