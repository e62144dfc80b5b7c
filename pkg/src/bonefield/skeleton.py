"""Human-object skeleton: kinematic tree, object bones, forward kinematics.

The hierarchy is a 24-bone human rig in SMPL joint order plus optional object
bones appended after the human bones, each parented to a hand joint. Synthetic
stick figures animate a handful of slots and leave the rest at identity.

Conventions:
  * rest pose has identity bone rotations; rest joints follow from chaining
    the per-bone offsets (root offset is its world position),
  * a bone's rotation pivots at its own joint and is expressed axis-angle in
    the parent frame,
  * world joints compose as j[i] = j[parent] + D_rot[parent] @ offset[i],
  * per-bone canonical->deformed transforms: R_f = composed rotation,
    t_f = j[i] - R_f @ rest_joint[i]; backward is the exact rigid inverse.

Two forward-kinematics paths exist: a numpy one for data generation and
oracles, and a graph one (`fk_tensor`) used during training so pose-correction
parameters receive gradients. Both implement the identical math.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

HUMAN_BONE_COUNT = 24

# SMPL joint order; index = bone id, value = parent id (-1 for the root).
HUMAN_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12,
                 13, 14, 16, 17, 18, 19, 20, 21)

HUMAN_BONE_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)

LEFT_HAND = 22
RIGHT_HAND = 23


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonHierarchy:
    parents: tuple              # per-bone parent index, -1 for the root
    rest_offsets: np.ndarray    # (K, 3) offset from parent in parent frame
    object_bone_ids: tuple = ()
    bone_names: tuple = ()

    def __post_init__(self):
        k = len(self.parents)
        offs = np.asarray(self.rest_offsets, dtype=np.float64)
        if offs.shape != (k, 3):
            raise SkeletonError(f"rest_offsets shape {offs.shape} != ({k}, 3)")
        object.__setattr__(self, "rest_offsets", offs)
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1 or roots[0] != 0:
            raise SkeletonError("hierarchy must have exactly one root at index 0")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise SkeletonError(f"bone {i}: parent {p} must precede it")
        for b in self.object_bone_ids:
            if self.parents[b] not in (LEFT_HAND, RIGHT_HAND):
                raise SkeletonError(f"object bone {b} must be parented to a hand")

    @property
    def bone_count(self):
        return len(self.parents)

    @property
    def rest_joints(self):
        """World joint positions in the rest pose (identity rotations)."""
        joints = np.zeros((self.bone_count, 3))
        for i, p in enumerate(self.parents):
            joints[i] = self.rest_offsets[i] if p < 0 else joints[p] + self.rest_offsets[i]
        return joints


@dataclass
class Pose:
    joints: np.ndarray      # (K, 3) world joint positions
    rotations: np.ndarray   # (K, 3) axis-angle, parent frame
    frame_index: int = 0
    state_index: int = 0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.joints.shape != self.rotations.shape or self.joints.ndim != 2 \
                or self.joints.shape[1] != 3:
            raise SkeletonError(
                f"pose arrays must be (K, 3): {self.joints.shape} vs {self.rotations.shape}")
        if not (np.isfinite(self.joints).all() and np.isfinite(self.rotations).all()):
            raise SkeletonError("pose contains non-finite values")


def build_human_skeleton(rest_offsets):
    return SkeletonHierarchy(
        parents=HUMAN_PARENTS,
        rest_offsets=rest_offsets,
        bone_names=HUMAN_BONE_NAMES,
    )


def attach_object_bones(h, hand_ids=(LEFT_HAND, RIGHT_HAND), lengths=(0.3, 0.3)):
    """Append one object bone per hand, extending along the parent bone axis.

    The new bone's rest offset points from the hand joint along the hand
    bone's own direction (wrist -> hand), scaled to `lengths`."""
    if h.object_bone_ids:
        raise SkeletonError("object bones already attached")
    k = h.bone_count
    offsets = [h.rest_offsets]
    names = list(h.bone_names)
    for hand, length in zip(hand_ids, lengths):
        if not 0 <= hand < k:
            raise SkeletonError(f"invalid hand index {hand}")
        if length <= 0:
            raise SkeletonError(f"object bone length must be > 0, got {length}")
        axis = h.rest_offsets[hand]
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise SkeletonError(f"hand bone {hand} has zero-length rest offset")
        offsets.append((axis / norm * length)[None])
        names.append(f"object_{HUMAN_BONE_NAMES[hand]}" if hand < len(HUMAN_BONE_NAMES)
                     else f"object_{hand}")
    return SkeletonHierarchy(
        parents=h.parents + tuple(hand_ids),
        rest_offsets=np.concatenate(offsets, axis=0),
        object_bone_ids=tuple(range(k, k + len(hand_ids))),
        bone_names=tuple(names),
    )


def rest_pose(h, frame_index=0, state_index=0):
    return Pose(joints=h.rest_joints,
                rotations=np.zeros((h.bone_count, 3)),
                frame_index=frame_index, state_index=state_index)


# -- rotations ----------------------------------------------------------------

def axis_angle_to_matrix(omega):
    """Rodrigues formula for (..., 3) axis-angle vectors, safe at zero angle.

    The trig factors are evaluated through sin(x)/x forms with a tiny additive
    angle regularizer, which reproduces the series limits to machine precision
    without a branch."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.sqrt(np.sum(omega * omega, axis=-1) + 1e-24)
    a = np.sin(theta) / theta
    half = 0.5 * theta
    sh = np.sin(half) / half
    b = 0.5 * sh * sh
    kx, ky, kz = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([
        np.stack([zero, -kz, ky], axis=-1),
        np.stack([kz, zero, -kx], axis=-1),
        np.stack([-ky, kx, zero], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_tensor(omega):
    """Graph version of `axis_angle_to_matrix` for (..., 3) tensors."""
    omega = ad.as_tensor(omega)
    theta = ad.sqrt(ad.sum_(ad.square(omega), axis=-1, keepdims=True) + 1e-24)
    a = ad.div(ad.sin(theta), theta)
    half = ad.mul(theta, 0.5)
    sh = ad.div(ad.sin(half), half)
    b = ad.mul(ad.square(sh), 0.5)
    K = ad.skew(omega)
    K2 = ad.matmul(K, K)
    eye = ad.Tensor(np.broadcast_to(np.eye(3), K.shape).copy())
    term1 = ad.mul(ad.reshape(a, a.shape + (1,)), K)
    term2 = ad.mul(ad.reshape(b, b.shape + (1,)), K2)
    return eye + term1 + term2


# -- forward kinematics -------------------------------------------------------

@dataclass
class BoneTransforms:
    fwd_rot: np.ndarray   # (K, 3, 3) canonical -> deformed
    fwd_t: np.ndarray     # (K, 3)
    bwd_rot: np.ndarray   # (K, 3, 3) deformed -> canonical
    bwd_t: np.ndarray     # (K, 3)


def forward_kinematics(h, pose):
    """Per-bone rigid transforms between canonical (rest) and deformed space."""
    k = h.bone_count
    if pose.joints.shape[0] != k:
        raise SkeletonError(
            f"pose has {pose.joints.shape[0]} bones, skeleton has {k}")
    rots = axis_angle_to_matrix(pose.rotations)
    composed = np.empty((k, 3, 3))
    for i, p in enumerate(h.parents):
        composed[i] = rots[i] if p < 0 else composed[p] @ rots[i]
    rest = h.rest_joints
    fwd_t = pose.joints - np.einsum("kij,kj->ki", composed, rest)
    bwd_rot = np.swapaxes(composed, -1, -2)
    bwd_t = -np.einsum("kij,kj->ki", bwd_rot, fwd_t)
    return BoneTransforms(composed, fwd_t, bwd_rot, bwd_t)


def fk_tensor(h, joints, rotations):
    """Graph forward kinematics; mirrors `forward_kinematics` exactly.

    joints, rotations: (K, 3) tensors (typically from `PoseCorrection.apply`).
    Returns (fwd_rot, fwd_t, bwd_rot, bwd_t) tensors.
    """
    k = h.bone_count
    if joints.shape != (k, 3) or rotations.shape != (k, 3):
        raise SkeletonError(f"expected ({k}, 3) pose tensors, got "
                            f"{joints.shape} / {rotations.shape}")
    rots = rodrigues_tensor(rotations)
    composed = []
    for i, p in enumerate(h.parents):
        local = rots[i]
        composed.append(local if p < 0 else ad.matmul(composed[p], local))
    fwd_rot = ad.stack(composed, axis=0)
    rest = ad.Tensor(h.rest_joints[:, :, None])
    fwd_t = joints - ad.reshape(ad.matmul(fwd_rot, rest), (k, 3))
    bwd_rot = ad.swap_last2(fwd_rot)
    bwd_t = ad.neg(ad.reshape(ad.matmul(bwd_rot, ad.reshape(fwd_t, (k, 3, 1))), (k, 3)))
    return fwd_rot, fwd_t, bwd_rot, bwd_t


def fk_world_joints(h, rotations, root_position=None):
    """World joint positions implied by per-bone rotations (numpy)."""
    k = h.bone_count
    rots = axis_angle_to_matrix(np.asarray(rotations, dtype=np.float64))
    joints = np.empty((k, 3))
    composed = np.empty((k, 3, 3))
    for i, p in enumerate(h.parents):
        if p < 0:
            joints[i] = h.rest_offsets[i] if root_position is None else root_position
            composed[i] = rots[i]
        else:
            joints[i] = joints[p] + composed[p] @ h.rest_offsets[i]
            composed[i] = composed[p] @ rots[i]
    return joints


# -- pose correction ----------------------------------------------------------

@dataclass
class TensorPose:
    """Pose whose joint/rotation arrays live in the autodiff graph."""
    joints: ad.Tensor
    rotations: ad.Tensor
    frame_index: int
    state_index: int


class PoseCorrection:
    """Per-frame learnable joint offsets and rotation residuals.

    Zero-initialized, so applying a fresh correction is the identity. Both
    residual groups are optimized by default; either one can be excluded via
    the trainer's parameter groups.
    """

    def __init__(self, store, n_frames, n_bones, prefix="pose_correction",
                 optimize_joints=True):
        self.n_frames = n_frames
        self.n_bones = n_bones
        self.optimize_joints = optimize_joints
        self.rot_residual = store.param(f"{prefix}/rotation", np.zeros((n_frames, n_bones, 3)))
        self.joint_offset = store.param(f"{prefix}/joint", np.zeros((n_frames, n_bones, 3)))

    def apply(self, pose):
        """Return a TensorPose with corrections added for pose.frame_index."""
        f = pose.frame_index
        if not 0 <= f < self.n_frames:
            raise KeyError(f"no pose correction entry for frame {f} "
                           f"(have {self.n_frames})")
        rot = ad.Tensor(pose.rotations) + self.rot_residual[f]
        if self.optimize_joints:
            joints = ad.Tensor(pose.joints) + self.joint_offset[f]
        else:
            joints = ad.Tensor(pose.joints) + ad.Tensor(self.joint_offset.data[f])
        return TensorPose(joints=joints, rotations=rot,
                          frame_index=f, state_index=pose.state_index)


def correct_pose(pose, correction):
    """Numpy view of the corrected pose (values only, no graph)."""
    tp = correction.apply(pose)
    return replace(pose, joints=tp.joints.data.copy(),
                   rotations=tp.rotations.data.copy())
