"""Dataset emission and loading.

Layout (all paths relative to the dataset root):

    images/%05d.png    8-bit RGB renders (2x supersampled, box-downsampled)
    masks/%05d.png     8-bit labels: 0 background, 1 human, 2 held object,
                       3 dilation ring around the foreground
    flow/%05d.bin      backward flow t -> t-1 for t >= 1; little-endian
                       header uint32 width, uint32 height, then float32
                       row-major (height, width, 2); NaN marks invalid pixels
    cameras.json       {"frames": [camera dict per frame]}
    poses.json         {"skeleton": {...}, "frames": [{joints, rotations,
                       state} ...]}; rotations are axis-angle triples in the
                       documented bone order, lengths in scene units
    states.json        {"n_states": N, "frame_states": [...]}
    split.json         {"holdout_every": k, "offset": o, "train": [...],
                       "test": [...]}
    scene_spec.json    echo of the generating spec (orbit parameters are
                       reused for freeze-time orbit rendering)

The foreground gating mask is every pixel with label > 0; the dilation ring
is 5% of the image diagonal wide.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .. import skeleton as sk
from ..render import Camera
from . import raytrace as rt
from .scene import SceneModel, SceneSpec, TimelineEntry

LABEL_RING = 3


class DatasetError(RuntimeError):
    pass


def dilate_labels(labels, dilate_frac=0.05):
    """Add the dilation ring around the {human, object} region."""
    fg = labels > 0
    h, w = labels.shape
    radius = dilate_frac * np.hypot(w, h)
    dist = ndimage.distance_transform_edt(~fg)
    out = labels.copy()
    out[(dist <= radius) & ~fg] = LABEL_RING
    return out


def write_flow(path, flow):
    h, w, c = flow.shape
    if c != 2:
        raise DatasetError(f"flow must have 2 channels, got {c}")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path):
    with open(path, "rb") as f:
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(8 * w * h), dtype="<f4")
    return data.reshape(h, w, 2).copy()


def save_image_u8(path, img):
    arr = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1)


def split_frames(n_frames, holdout_every, offset=None):
    if offset is None:
        offset = holdout_every // 2
    test = [f for f in range(n_frames) if f % holdout_every == offset]
    train = [f for f in range(n_frames) if f not in test]
    return train, test, offset


def emit_dataset(spec, out_dir, supersample=2):
    """Generate and write a full dataset; returns the output Path."""
    model = SceneModel(spec) if isinstance(spec, SceneSpec) else spec
    spec = model.spec
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "flow"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directories under {out}: {exc}")

    frame_states = []
    for f in range(spec.n_frames):
        cam = model.cameras[f]
        img, _depth, label = rt.render_image(model, cam, f,
                                             supersample=supersample)
        save_image_u8(out / "images" / f"{f:05d}.png", img)
        Image.fromarray(dilate_labels(label)).save(
            out / "masks" / f"{f:05d}.png", format="PNG")
        if f >= 1:
            write_flow(out / "flow" / f"{f:05d}.bin",
                       rt.oracle_flow(model, f, f - 1))
        frame_states.append(model.poses[f].state_index)

    _dump_json(out / "cameras.json",
               {"frames": [c.to_json() for c in model.cameras]})
    skel = model.skeleton
    _dump_json(out / "poses.json", {
        "skeleton": {
            "parents": list(skel.parents),
            "rest_offsets": skel.rest_offsets.tolist(),
            "object_bone_ids": list(skel.object_bone_ids),
            "bone_names": list(skel.bone_names),
        },
        "frames": [{
            "joints": p.joints.tolist(),
            "rotations": p.rotations.tolist(),
            "state": p.state_index,
        } for p in model.poses],
    })
    _dump_json(out / "states.json", {
        "n_states": spec.n_states,
        "frame_states": frame_states,
    })
    train, test, offset = split_frames(spec.n_frames, spec.holdout_every)
    _dump_json(out / "split.json", {
        "holdout_every": spec.holdout_every, "offset": offset,
        "train": train, "test": test,
    })
    spec_dict = dataclasses.asdict(spec)
    for key, val in spec_dict.items():
        if isinstance(val, np.ndarray):
            spec_dict[key] = val.tolist()
        elif isinstance(val, tuple):
            spec_dict[key] = list(val)
    spec_dict["timeline"] = [dataclasses.asdict(e) for e in spec.timeline]
    _dump_json(out / "scene_spec.json", spec_dict)
    return out


class Dataset:
    """Loaded dataset; everything the trainer and evaluator consume."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "poses.json").exists():
            raise DatasetError(f"{self.root}: not a dataset (poses.json missing)")
        with open(self.root / "cameras.json") as f:
            cams = json.load(f)["frames"]
        self.cameras = [Camera.from_json(c) for c in cams]
        with open(self.root / "poses.json") as f:
            poses = json.load(f)
        skel = poses["skeleton"]
        self.skeleton = sk.SkeletonHierarchy(
            parents=tuple(skel["parents"]),
            rest_offsets=np.array(skel["rest_offsets"]),
            object_bone_ids=tuple(skel["object_bone_ids"]),
            bone_names=tuple(skel.get("bone_names", ())),
        )
        self.poses = [
            sk.Pose(joints=np.array(p["joints"]),
                    rotations=np.array(p["rotations"]),
                    frame_index=i, state_index=int(p["state"]))
            for i, p in enumerate(poses["frames"])]
        with open(self.root / "states.json") as f:
            states = json.load(f)
        self.n_states = int(states["n_states"])
        self.frame_states = list(states["frame_states"])
        with open(self.root / "split.json") as f:
            split = json.load(f)
        self.train_frames = list(split["train"])
        self.test_frames = list(split["test"])
        self.n_frames = len(self.poses)
        spec_path = self.root / "scene_spec.json"
        self.scene_spec = None
        if spec_path.exists():
            with open(spec_path) as f:
                d = json.load(f)
            d["timeline"] = [TimelineEntry(e["start_frame"], e["state"],
                                           e["object_location"])
                             for e in d["timeline"]]
            self.scene_spec = SceneSpec(**d)
        self._images = {}
        self._labels = {}
        self._flow = {}

    def image(self, frame):
        if frame not in self._images:
            self._images[frame] = load_image(
                self.root / "images" / f"{frame:05d}.png")
        return self._images[frame]

    def labels(self, frame):
        if frame not in self._labels:
            self._labels[frame] = np.asarray(
                Image.open(self.root / "masks" / f"{frame:05d}.png"))
        return self._labels[frame]

    def foreground_mask(self, frame):
        """Dilated gating mask (True inside human-object region + ring)."""
        return self.labels(frame) > 0

    def flow(self, frame):
        """Backward flow frame -> frame-1, or None for frame 0."""
        if frame == 0:
            return None
        if frame not in self._flow:
            path = self.root / "flow" / f"{frame:05d}.bin"
            self._flow[frame] = read_flow(path) if path.exists() else None
        return self._flow[frame]
