"""Synthetic articulated scenes with closed-form geometry and appearance.

A scene is a textured rectangular room, a capsule stick figure mapped into the
26-slot skeleton layout, and one box object that is either resting in the
background (at one of two floor poses) or held via the object bone. All
surface colors are smooth sinusoidal albedo functions, so coordinate MLPs can
fit them at desk scale, and every quantity needed for supervision (images,
depth, labels, poses, flow) has an analytic oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import skeleton as sk


class SceneSpecError(ValueError):
    pass


_LOCATIONS = ("pose_a", "held", "pose_b")


@dataclass
class TimelineEntry:
    start_frame: int
    state: int
    object_location: str


@dataclass
class SceneSpec:
    name: str = "scene"
    seed: int = 7
    n_frames: int = 20
    holdout_every: int = 5
    image_size: tuple = (64, 64)
    room_lo: np.ndarray = field(default_factory=lambda: np.array([-3.0, -3.0, 0.0]))
    room_hi: np.ndarray = field(default_factory=lambda: np.array([3.0, 3.0, 4.0]))
    orbit_radius: float = 2.2
    orbit_height: float = 1.5
    orbit_degrees: float = 360.0
    focal_px: float = 70.0
    look_at: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    figure_position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0]))
    figure_radius: float = 0.07
    arm_swing: float = 0.7
    root_spin: float = 0.5
    object_size: np.ndarray = field(default_factory=lambda: np.array([0.24, 0.24, 0.24]))
    object_hand: str = "right"
    object_bone_length: float = 0.3
    object_spin: float = 1.0
    object_pose_a: np.ndarray = field(default_factory=lambda: np.array([0.9, 0.7, 0.0]))
    object_pose_b: np.ndarray = field(default_factory=lambda: np.array([-0.9, 0.8, 0.0]))
    timeline: list = field(default_factory=lambda: [TimelineEntry(0, 0, "held")])

    def __post_init__(self):
        for attr in ("room_lo", "room_hi", "look_at", "figure_position",
                     "object_size", "object_pose_a", "object_pose_b"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.float64))
        self.image_size = tuple(int(v) for v in self.image_size)
        self.validate()

    def validate(self):
        if not self.timeline:
            raise SceneSpecError("timeline is empty")
        if self.timeline[0].start_frame != 0:
            raise SceneSpecError(
                f"timeline must start at frame 0, got {self.timeline[0].start_frame}")
        prev = -1
        for e in self.timeline:
            if e.start_frame <= prev:
                raise SceneSpecError(
                    f"timeline start_frames must increase: bad frame {e.start_frame}")
            if e.start_frame >= self.n_frames:
                raise SceneSpecError(
                    f"timeline entry at frame {e.start_frame} is past the "
                    f"last frame {self.n_frames - 1}")
            if e.object_location not in _LOCATIONS:
                raise SceneSpecError(f"unknown object location {e.object_location!r}")
            prev = e.start_frame
        states = sorted({e.state for e in self.timeline})
        if states != list(range(len(states))):
            raise SceneSpecError(f"states must be contiguous from 0, got {states}")
        if self.object_hand not in ("left", "right"):
            raise SceneSpecError(f"object hand must be left/right, got {self.object_hand}")

    @property
    def n_states(self):
        return len({e.state for e in self.timeline})

    def timeline_at(self, frame):
        entry = self.timeline[0]
        for e in self.timeline:
            if e.start_frame <= frame:
                entry = e
        return entry

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        timeline = [TimelineEntry(int(e["start_frame"]), int(e["state"]),
                                  str(e["object_location"]))
                    for e in d.pop("timeline", [])]
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise SceneSpecError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(timeline=timeline or None, **d) if timeline else cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _rest_offsets(spec):
    """T-pose offsets for the 24 human slots (z up, left arm +x, right arm -x)."""
    o = np.zeros((24, 3))
    p0 = spec.figure_position
    o[0] = p0 + np.array([0.0, 0.0, 0.9])            # pelvis (root, world pos)
    o[1] = [0.09, 0.0, -0.05]                        # hips
    o[2] = [-0.09, 0.0, -0.05]
    o[3] = [0.0, 0.0, 0.12]                          # spine chain
    o[4] = [0.0, 0.0, -0.38]                         # knees
    o[5] = [0.0, 0.0, -0.38]
    o[6] = [0.0, 0.0, 0.12]
    o[7] = [0.0, 0.0, -0.38]                         # ankles
    o[8] = [0.0, 0.0, -0.38]
    o[9] = [0.0, 0.0, 0.12]
    o[10] = [0.0, 0.08, -0.04]                       # feet
    o[11] = [0.0, 0.08, -0.04]
    o[12] = [0.0, 0.0, 0.12]                         # neck
    o[13] = [0.08, 0.0, 0.04]                        # collars
    o[14] = [-0.08, 0.0, 0.04]
    o[15] = [0.0, 0.0, 0.14]                         # head
    o[16] = [0.1, 0.0, 0.0]                          # shoulders
    o[17] = [-0.1, 0.0, 0.0]
    o[18] = [0.24, 0.0, 0.0]                         # elbows
    o[19] = [-0.24, 0.0, 0.0]
    o[20] = [0.22, 0.0, 0.0]                         # wrists
    o[21] = [-0.22, 0.0, 0.0]
    o[22] = [0.09, 0.0, 0.0]                         # hands
    o[23] = [-0.09, 0.0, 0.0]
    return o


def build_skeleton(spec):
    human = sk.build_human_skeleton(_rest_offsets(spec))
    hand = sk.LEFT_HAND if spec.object_hand == "left" else sk.RIGHT_HAND
    other = sk.RIGHT_HAND if spec.object_hand == "left" else sk.LEFT_HAND
    return sk.attach_object_bones(
        human, hand_ids=(hand, other),
        lengths=(spec.object_bone_length, spec.object_bone_length))


def frame_rotations(spec, skel, frame):
    """Axis-angle rotations for the animated slots at one frame."""
    k = skel.bone_count
    rot = np.zeros((k, 3))
    phase = 2.0 * np.pi * frame / max(spec.n_frames, 1)
    rot[0, 2] = spec.root_spin * np.sin(phase)
    side = 17 if spec.object_hand == "right" else 16   # shoulder slot
    elbow = 19 if spec.object_hand == "right" else 18
    rot[side, 1] = spec.arm_swing * np.sin(phase)
    rot[elbow, 1] = 0.5 * spec.arm_swing * np.sin(phase + 1.1)
    obj = skel.object_bone_ids[0]
    rot[obj, 0] = spec.object_spin * np.sin(phase + 0.6)
    rot[obj, 1] = 0.6 * spec.object_spin * np.cos(phase)
    return rot


def frame_pose(spec, skel, frame):
    rot = frame_rotations(spec, skel, frame)
    joints = sk.fk_world_joints(skel, rot)
    return sk.Pose(joints=joints, rotations=rot, frame_index=frame,
                   state_index=spec.timeline_at(frame).state)


def frame_camera(spec, frame):
    total = max(spec.n_frames, 1)
    theta = np.deg2rad(spec.orbit_degrees) * frame / total
    return orbit_camera(spec, theta, frame_index=frame)


def orbit_camera(spec, theta, frame_index=0):
    """Camera on the orbit circle at azimuth theta, looking at the target."""
    from ..render import Camera

    w, h = spec.image_size
    pos = spec.look_at + np.array([
        spec.orbit_radius * np.cos(theta),
        spec.orbit_radius * np.sin(theta),
        spec.orbit_height - spec.look_at[2],
    ])
    fwd = spec.look_at - pos
    fwd = fwd / np.linalg.norm(fwd)
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up_world)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rotation = np.stack([right, down, fwd], axis=1)
    return Camera(fx=spec.focal_px, fy=spec.focal_px, cx=w / 2.0, cy=h / 2.0,
                  width=w, height=h, rotation=rotation, origin=pos,
                  frame_index=frame_index)


@dataclass
class ObjectPlacement:
    held: bool
    center: np.ndarray          # box center (world; for held, via bone)
    rotation: np.ndarray        # (3,3) world orientation

    def local(self, pts):
        return (np.asarray(pts) - self.center) @ self.rotation


def object_placement(spec, skel, pose, transforms=None):
    """World placement of the object box at one frame."""
    entry = spec.timeline_at(pose.frame_index)
    if entry.object_location == "held":
        bone = skel.object_bone_ids[0]
        if transforms is None:
            from ..skeleton import forward_kinematics
            transforms = forward_kinematics(skel, pose)
        return ObjectPlacement(held=True, center=pose.joints[bone],
                               rotation=transforms.fwd_rot[bone])
    floor = spec.object_pose_a if entry.object_location == "pose_a" \
        else spec.object_pose_b
    center = floor + np.array([0.0, 0.0, spec.object_size[2] / 2.0])
    return ObjectPlacement(held=False, center=center, rotation=np.eye(3))


class SceneModel:
    """Fully built scene: skeleton, per-frame poses/cameras, geometry hooks."""

    def __init__(self, spec):
        self.spec = spec
        self.skeleton = build_skeleton(spec)
        self.poses = [frame_pose(spec, self.skeleton, f)
                      for f in range(spec.n_frames)]
        self.cameras = [frame_camera(spec, f) for f in range(spec.n_frames)]
        self.transforms = [sk.forward_kinematics(self.skeleton, p)
                           for p in self.poses]
        rng = np.random.default_rng(spec.seed)
        self.albedo = _AlbedoBank(rng)

    @property
    def n_states(self):
        return self.spec.n_states

    def placement(self, frame):
        return object_placement(self.spec, self.skeleton, self.poses[frame],
                                self.transforms[frame])


class _AlbedoBank:
    """Seeded smooth color fields for every surface family."""

    def __init__(self, rng):
        self.wall_base = rng.uniform(0.25, 0.75, size=(6, 3))
        self.wall_amp = rng.uniform(0.08, 0.18, size=(6, 3))
        self.wall_freq = rng.uniform(0.5, 1.2, size=(6, 2))
        self.wall_phase = rng.uniform(0, 2 * np.pi, size=(6, 2))
        self.body_base = rng.uniform(0.3, 0.8, size=(12, 3))
        self.body_amp = rng.uniform(0.05, 0.15, size=(12, 3))
        self.object_base = np.array([0.85, 0.45, 0.15])
        self.object_amp = np.array([0.08, 0.2, 0.08])
        self.object_freq = 5.0

    def wall(self, face, pts, axes):
        """face index 0..5; pts (N, 3) world; axes: the two in-plane axes."""
        u = pts[:, axes[0]]
        v = pts[:, axes[1]]
        mod = (np.sin(self.wall_freq[face, 0] * u * np.pi + self.wall_phase[face, 0])
               * np.sin(self.wall_freq[face, 1] * v * np.pi + self.wall_phase[face, 1]))
        return np.clip(self.wall_base[face] + self.wall_amp[face] * mod[:, None], 0, 1)

    def body(self, prim, local_z):
        mod = np.sin(4.0 * np.pi * local_z)
        return np.clip(self.body_base[prim % 12] +
                       self.body_amp[prim % 12] * mod[:, None], 0, 1)

    def object(self, local_pts):
        mod = (np.sin(self.object_freq * local_pts[:, 0]) *
               np.sin(self.object_freq * local_pts[:, 1]) +
               np.sin(self.object_freq * local_pts[:, 2]))
        return np.clip(self.object_base + self.object_amp * mod[:, None] * 0.5, 0, 1)
