//! Skeletal joint-tree math: rotation-6d algebra, forward kinematics and
//! purely rotational inverse kinematics.
//!
//! Rotations travel through the rest of the crate as 6d values (the first
//! two columns of a rotation matrix, column-major). FK composes
//! parent-relative rotations down the tree; IK inverts that decomposition
//! with `parentᵀ · child` and involves no optimization.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 52;
pub const BODY_JOINTS: usize = 22;
pub const HAND_JOINTS: usize = 30;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;
/// First hand joint index; 22..37 left hand, 37..52 right hand.
pub const HAND_START: usize = 22;

const DEGENERACY_EPS: f64 = 1e-8;

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn col_a(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn col_b(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Orthonormal 3x3 rotation matrix with determinant +1.
pub type RotationMatrix = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointPose {
    pub position: [f64; 3],
    pub rotation: Rotation6D,
}

impl JointPose {
    pub const IDENTITY: JointPose = JointPose {
        position: [0.0; 3],
        rotation: Rotation6D::IDENTITY,
    };

    pub fn pos(&self) -> Vector3<f64> {
        Vector3::new(self.position[0], self.position[1], self.position[2])
    }
}

/// Joint tree: parent indices are topologically sorted (parent[i] < i),
/// joint 0 is the single root.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    pub joint_count: usize,
    pub parent: Vec<isize>,
    pub rest_offset: Vec<Vector3<f64>>,
    pub names: Vec<String>,
}

impl SkeletonTemplate {
    pub fn new(
        parent: Vec<isize>,
        rest_offset: Vec<Vector3<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 || rest_offset.len() != n || names.len() != n {
            return Err(Error::ShapeMismatch(
                "skeleton field lengths disagree".into(),
            ));
        }
        if parent[0] != -1 {
            return Err(Error::ParseError {
                path: "<skeleton>".into(),
                line: 0,
                msg: "joint 0 must be the root (parent -1)".into(),
            });
        }
        for (i, &p) in parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(Error::ParseError {
                    path: "<skeleton>".into(),
                    line: i,
                    msg: format!("parent[{i}] = {p} violates parent[i] < i"),
                });
            }
        }
        Ok(SkeletonTemplate {
            joint_count: n,
            parent,
            rest_offset,
            names,
        })
    }

    /// Parse the structured-text fixture format: one joint per line,
    /// `name parent_index ox oy oz`, `#` comments.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut parent = Vec::new();
        let mut rest_offset = Vec::new();
        let mut names = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::ParseError {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let bad = |msg: &str| Error::ParseError {
                path: path.into(),
                line: lineno + 1,
                msg: msg.into(),
            };
            names.push(fields[0].to_string());
            parent.push(
                fields[1]
                    .parse::<isize>()
                    .map_err(|_| bad("bad parent index"))?,
            );
            let mut v = [0.0f64; 3];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = fields[2 + k]
                    .parse::<f64>()
                    .map_err(|_| bad("bad offset value"))?;
            }
            rest_offset.push(Vector3::new(v[0], v[1], v[2]));
        }
        SkeletonTemplate::new(parent, rest_offset, names)
    }

    /// The canonical 52-joint test skeleton (22 body + 30 hand joints,
    /// wrists at 20/21, 15 joints per hand).
    pub fn smplh52() -> SkeletonTemplate {
        SkeletonTemplate::parse(include_str!("../fixtures/smplh52.skel"), "smplh52.skel")
            .expect("embedded fixture is valid")
    }

    pub fn wrist_for(&self, hand_joint: usize) -> usize {
        debug_assert!(hand_joint >= HAND_START && hand_joint < JOINT_COUNT);
        if hand_joint < HAND_START + 15 {
            LEFT_WRIST
        } else {
            RIGHT_WRIST
        }
    }
}

/// Gram-Schmidt reconstruction of the full rotation matrix.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<RotationMatrix> {
    let a = r.col_a();
    let b = r.col_b();
    let na = a.norm();
    if na <= DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(format!(
            "first column norm {na:.3e}"
        )));
    }
    let c1 = a / na;
    let b_orth = b - c1 * c1.dot(&b);
    let nb = b_orth.norm();
    if nb <= DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(format!(
            "columns parallel (residual norm {nb:.3e})"
        )));
    }
    let c2 = b_orth / nb;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// First two columns of `r`, column-major.
pub fn matrix_to_rot6d(r: &RotationMatrix) -> Rotation6D {
    Rotation6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Global pose of every joint.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<RotationMatrix>,
}

impl FkResult {
    pub fn to_poses(&self) -> Vec<JointPose> {
        self.position
            .iter()
            .zip(&self.rotation)
            .map(|(p, r)| JointPose {
                position: [p.x, p.y, p.z],
                rotation: matrix_to_rot6d(r),
            })
            .collect()
    }
}

/// Forward kinematics: compose parent-relative rotations down the tree.
///
/// `G_0 = rot(local_0)`, `p_0 = root_translation`; for i > 0:
/// `G_i = G_parent · rot(local_i)`, `p_i = p_parent + G_parent · offset_i`.
pub fn fk(
    skel: &SkeletonTemplate,
    local_rot: &[Rotation6D],
    root_translation: Vector3<f64>,
) -> Result<FkResult> {
    if local_rot.len() != skel.joint_count {
        return Err(Error::WrongJointCount {
            expected: skel.joint_count,
            got: local_rot.len(),
        });
    }
    let mut position = Vec::with_capacity(skel.joint_count);
    let mut rotation = Vec::with_capacity(skel.joint_count);
    for i in 0..skel.joint_count {
        let local = rot6d_to_matrix(&local_rot[i])?;
        if i == 0 {
            position.push(root_translation);
            rotation.push(local);
        } else {
            let p = skel.parent[i] as usize;
            rotation.push(rotation[p] * local);
            position.push(position[p] + rotation[p] * skel.rest_offset[i]);
        }
    }
    Ok(FkResult { position, rotation })
}

/// Rotational inverse kinematics: `local_i = G_parentᵀ · G_i`, `local_0 = G_0`.
pub fn ik(skel: &SkeletonTemplate, global_rot: &[Rotation6D]) -> Result<Vec<Rotation6D>> {
    if global_rot.len() != skel.joint_count {
        return Err(Error::WrongJointCount {
            expected: skel.joint_count,
            got: global_rot.len(),
        });
    }
    let globals: Vec<RotationMatrix> = global_rot
        .iter()
        .map(rot6d_to_matrix)
        .collect::<Result<_>>()?;
    let mut local = Vec::with_capacity(skel.joint_count);
    for i in 0..skel.joint_count {
        if i == 0 {
            local.push(matrix_to_rot6d(&globals[0]));
        } else {
            let p = skel.parent[i] as usize;
            local.push(matrix_to_rot6d(&(globals[p].transpose() * globals[i])));
        }
    }
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Rodrigues formula; independent of the 6d construction path.
    pub fn rodrigues(axis: Vector3<f64>, angle: f64) -> RotationMatrix {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }

    pub fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis
        };
        rodrigues(axis, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
    }

    #[test]
    fn rot6d_identity() {
        let m = rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rot6d_z_quarter_turn() {
        let m = rot6d_to_matrix(&Rotation6D([0.0, 1.0, 0.0, -1.0, 0.0, 0.0])).unwrap();
        let expect = Matrix3::from_columns(&[
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]);
        assert_abs_diff_eq!(m, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rot6d_roundtrip_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            assert_abs_diff_eq!(back, r, epsilon = 1e-6);
        }
    }

    #[test]
    fn matrix_to_rot6d_reads_columns() {
        assert_eq!(
            matrix_to_rot6d(&Matrix3::identity()).0,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        let z90 = rodrigues(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let r = matrix_to_rot6d(&z90);
        for (got, want) in r.0.iter().zip([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn rot6d_degenerate_inputs_error() {
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([0.0; 6])),
            Err(Error::DegenerateRotation(_))
        ));
        // parallel columns
        assert!(matches!(
            rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn rot6d_near_parallel_columns_still_orthonormal() {
        // columns separated by ~1e-6
        let r = Rotation6D([1.0, 0.0, 0.0, 1.0, 1e-6, 0.0]);
        let m = rot6d_to_matrix(&r).unwrap();
        assert_abs_diff_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-6);
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn fixture_loads_and_satisfies_invariants() {
        let s = SkeletonTemplate::smplh52();
        assert_eq!(s.joint_count, 52);
        assert_eq!(s.parent[0], -1);
        for i in 1..52 {
            assert!(s.parent[i] >= 0 && (s.parent[i] as usize) < i);
        }
        assert_eq!(s.names[LEFT_WRIST], "left_wrist");
        assert_eq!(s.names[RIGHT_WRIST], "right_wrist");
        assert_eq!(s.names[HAND_START], "left_index1");
        assert_eq!(s.names[37], "right_index1");
    }

    #[test]
    fn fk_identity_rotations_sum_offsets() {
        let s = SkeletonTemplate::smplh52();
        let rots = vec![Rotation6D::IDENTITY; s.joint_count];
        let out = fk(&s, &rots, Vector3::zeros()).unwrap();
        for i in 0..s.joint_count {
            // walk the ancestor chain summing offsets
            let mut expect = Vector3::zeros();
            let mut j = i;
            while j != 0 {
                expect += s.rest_offset[j];
                j = s.parent[j] as usize;
            }
            assert_abs_diff_eq!(out.position[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_two_joint_chain_rotated_root() {
        // offset (0,1,0), root rotated 90 degrees about z -> child at (-1,0,0)
        let s = SkeletonTemplate::new(
            vec![-1, 0],
            vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)],
            vec!["root".into(), "child".into()],
        )
        .unwrap();
        let z90 = matrix_to_rot6d(&rodrigues(Vector3::z(), std::f64::consts::FRAC_PI_2));
        let out = fk(&s, &[z90, Rotation6D::IDENTITY], Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(out.position[1], Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn ik_identity_and_shared_rotation() {
        let s = SkeletonTemplate::smplh52();
        let ident = vec![Rotation6D::IDENTITY; s.joint_count];
        for r in ik(&s, &ident).unwrap() {
            let m = rot6d_to_matrix(&r).unwrap();
            assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-12);
        }
        // parent and child with the same global rotation -> child local identity
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shared = matrix_to_rot6d(&random_rotation(&mut rng));
        let globals = vec![shared; s.joint_count];
        let locals = ik(&s, &globals).unwrap();
        for r in &locals[1..] {
            let m = rot6d_to_matrix(r).unwrap();
            assert_abs_diff_eq!(m, Matrix3::identity(), epsilon = 1e-9);
        }
    }

    fn random_skeleton(rng: &mut impl Rng, max_joints: usize) -> SkeletonTemplate {
        let n = rng.gen_range(2..=max_joints);
        let mut parent = vec![-1isize];
        let mut offsets = vec![Vector3::zeros()];
        let mut names = vec!["j0".to_string()];
        for i in 1..n {
            parent.push(rng.gen_range(0..i) as isize);
            offsets.push(Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ));
            names.push(format!("j{i}"));
        }
        SkeletonTemplate::new(parent, offsets, names).unwrap()
    }

    #[test]
    fn fk_ik_roundtrips_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = random_skeleton(&mut rng, 64);
            let locals: Vec<Rotation6D> = (0..s.joint_count)
                .map(|_| matrix_to_rot6d(&random_rotation(&mut rng)))
                .collect();
            let global = fk(&s, &locals, Vector3::zeros()).unwrap();
            let g6: Vec<Rotation6D> = global.rotation.iter().map(matrix_to_rot6d).collect();
            // ik(fk(x)) = x
            let back = ik(&s, &g6).unwrap();
            for (a, b) in back.iter().zip(&locals) {
                let ma = rot6d_to_matrix(a).unwrap();
                let mb = rot6d_to_matrix(b).unwrap();
                assert_abs_diff_eq!(ma, mb, epsilon = 1e-6);
            }
            // fk(ik(G)) reproduces G
            let again = fk(&s, &back, Vector3::zeros()).unwrap();
            for (a, b) in again.rotation.iter().zip(&global.rotation) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn fk_root_equivariance() {
        // pre-rotating the root rotates all positions (minus translation)
        let s = SkeletonTemplate::smplh52();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let locals: Vec<Rotation6D> = (0..s.joint_count)
            .map(|_| matrix_to_rot6d(&random_rotation(&mut rng)))
            .collect();
        let pre = random_rotation(&mut rng);
        let base = fk(&s, &locals, Vector3::zeros()).unwrap();
        let mut rotated = locals.clone();
        rotated[0] = matrix_to_rot6d(&(pre * rot6d_to_matrix(&locals[0]).unwrap()));
        let out = fk(&s, &rotated, Vector3::zeros()).unwrap();
        for i in 0..s.joint_count {
            assert_abs_diff_eq!(out.position[i], pre * base.position[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn fk_positions_invariant_under_6d_roundtrip() {
        let s = SkeletonTemplate::smplh52();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let locals: Vec<Rotation6D> = (0..s.joint_count)
            .map(|_| matrix_to_rot6d(&random_rotation(&mut rng)))
            .collect();
        let reround: Vec<Rotation6D> = locals
            .iter()
            .map(|r| matrix_to_rot6d(&rot6d_to_matrix(r).unwrap()))
            .collect();
        let a = fk(&s, &locals, Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let b = fk(&s, &reround, Vector3::new(0.1, 0.2, 0.3)).unwrap();
        for i in 0..s.joint_count {
            assert_abs_diff_eq!(a.position[i], b.position[i], epsilon = 1e-9);
        }
    }
}
