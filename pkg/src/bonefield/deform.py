"""Object/human linear blend skinning and the forward/backward deformations.

The blend-weight field is a learnable logits grid with K+1 channels (K bones
plus one background channel). Weights at a point are the channel softmax of
the trilinearly interpolated logits, so the field is smooth and sums to one.

Backward skinning evaluates, for each bone, the canonical weight of the point
rigidly mapped by that bone's deformed->canonical transform; the K bone
responses are renormalized over the bones (background excluded) with a floor
on the denominator so empty space degrades to zero weights instead of
dividing by zero.

Fine non-rigid offsets come from two small MLPs (one per direction) whose
final layers start at zero, making the whole deformation exactly the identity
at the rest pose before training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import fields


def skeleton_bounds(rest_joints, dilate=0.25, pad=0.3):
    """Axis-aligned canonical bounds: rest-joint box dilated and padded."""
    lo = rest_joints.min(axis=0)
    hi = rest_joints.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + dilate) + pad
    return center - half, center + half


def bone_gaussian_logits(resolution, lo, hi, rest_joints, parents, sigma=0.12,
                         background_distance=0.35):
    """Distance-based initial logits: each bone channel falls off with squared
    distance to its rest segment; the background channel is the constant
    corresponding to `background_distance`."""
    res = tuple(resolution)
    k = len(parents)
    axes = [np.linspace(lo[d], hi[d], res[d]) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    logits = np.empty(res + (k + 1,))
    inv = 1.0 / (2.0 * sigma * sigma)
    for i in range(k):
        p = parents[i]
        a = rest_joints[p] if p >= 0 else rest_joints[i]
        b = rest_joints[i]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            d2 = np.sum((pts - b) ** 2, axis=-1)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d2 = np.sum((pts - proj) ** 2, axis=-1)
        logits[..., i] = (-d2 * inv).reshape(res)
    logits[..., k] = -background_distance**2 * inv
    return logits


class WeightVolume:
    """K+1 channel blend-weight grid over an axis-aligned canonical box."""

    def __init__(self, store, bone_count, resolution, lo, hi, init_logits=None,
                 eps=1e-9, name="weight_volume/logits"):
        self.bone_count = bone_count
        self.resolution = tuple(resolution)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.eps = eps
        if init_logits is None:
            init_logits = np.zeros(self.resolution + (bone_count + 1,))
        if init_logits.shape != self.resolution + (bone_count + 1,):
            raise ValueError(f"logits shape {init_logits.shape} does not match "
                             f"resolution {self.resolution} + {bone_count + 1} channels")
        self.logits = store.param(name, init_logits)

    def to_grid(self, pts):
        """World -> continuous voxel coordinates, clipped to the grid."""
        scale = (np.array(self.resolution) - 1.0) / (self.hi - self.lo)
        coords = ad.mul(ad.sub(pts, ad.Tensor(self.lo)), ad.Tensor(scale))
        return ad.clip(coords, 0.0, float(max(self.resolution) - 1))

    def canonical_weights(self, pts):
        """Softmax-normalized K+1 weights at canonical points (P, 3)."""
        vals = ad.grid_gather(self.logits, self.to_grid(ad.as_tensor(pts)))
        return ad.softmax(vals, axis=-1)

    def bone_weights_forward(self, pts):
        """Bone channels of the canonical weights, renormalized over K."""
        w = self.canonical_weights(pts)
        raw = w[:, : self.bone_count]
        s = ad.sum_(raw, axis=-1, keepdims=True)
        return ad.div(raw, ad.clip(s, self.eps, np.inf))

    def bone_weights_backward(self, pts_per_bone):
        """Backward weights from per-bone mapped points (P, K, 3)."""
        coords = self.to_grid(pts_per_bone)
        raw = ad.bone_softmax_gather(self.logits, coords)
        s = ad.sum_(raw, axis=-1, keepdims=True)
        return ad.div(raw, ad.clip(s, self.eps, np.inf))


class DeformationModel:
    """Coarse skinning + fine non-rigid offsets, both directions."""

    def __init__(self, store, bone_count, volume, rng, fine_width=128,
                 fine_depth=4, fine_pe_levels=4):
        self.bone_count = bone_count
        self.volume = volume
        self.fine_pe_levels = fine_pe_levels
        in_dim = 6 * fine_pe_levels + 3 * bone_count
        self.fine_backward = fields.MLP(
            store, "fine_backward", in_dim, fine_width, fine_depth - 1, rng,
            out_dim=3, zero_last=True)
        self.fine_forward = fields.MLP(
            store, "fine_forward", in_dim, fine_width, fine_depth - 1, rng,
            out_dim=3, zero_last=True)

    def _fine_input(self, pts, rotations):
        enc = fields.positional_encoding_t(pts, self.fine_pe_levels)
        rot_row = ad.reshape(rotations, (1, 3 * self.bone_count))
        ones = ad.Tensor(np.ones((pts.shape[0], 1)))
        return ad.concat([enc, ad.mul(ones, rot_row)], axis=-1)

    def backward_weights(self, x_d, bwd_rot, bwd_t):
        y = ad.apply_rigid(bwd_rot, bwd_t, ad.as_tensor(x_d))
        return self.volume.bone_weights_backward(y), y

    def deform_backward(self, x_d, bwd_rot, bwd_t, rotations):
        """Deformed points (P, 3) -> canonical points, plus the coarse stage."""
        x_d = ad.as_tensor(x_d)
        w, y = self.backward_weights(x_d, bwd_rot, bwd_t)
        coarse = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), y), axis=1)
        delta = self.fine_backward.forward(self._fine_input(coarse, rotations))
        return coarse + delta, coarse

    def deform_forward(self, x_c, fwd_rot, fwd_t, rotations):
        """Canonical points (P, 3) -> deformed points, plus the coarse stage."""
        x_c = ad.as_tensor(x_c)
        w = self.volume.bone_weights_forward(x_c)
        y = ad.apply_rigid(fwd_rot, fwd_t, x_c)
        coarse = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), y), axis=1)
        delta = self.fine_forward.forward(self._fine_input(coarse, rotations))
        return coarse + delta, coarse

    def cycle_residual(self, x_d, transforms, rotations):
        """forward(backward(x_d)) - x_d for graph transforms
        (fwd_rot, fwd_t, bwd_rot, bwd_t)."""
        fwd_rot, fwd_t, bwd_rot, bwd_t = transforms
        x_d = ad.as_tensor(x_d)
        x_c, _ = self.deform_backward(x_d, bwd_rot, bwd_t, rotations)
        x_back, _ = self.deform_forward(x_c, fwd_rot, fwd_t, rotations)
        return ad.sub(x_back, x_d)
