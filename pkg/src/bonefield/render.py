"""Dual-ray sampling, stream fusion, and differentiable volume rendering.

Per pixel, the renderer shoots one ray through the unbounded scene field and,
when the pixel lies inside the dilated foreground mask, a second ray through
the dynamic human-object model. Human-object samples are warped into canonical
space, queried there, mapped into scene coordinates, and merged with the scene
samples by camera distance before compositing.

Sample *positions* are always taken from the raw dataset pose (not the learned
corrections), so they are constants of the optimization step; gradients reach
the pose parameters through the warped field queries instead. Ties in the
distance ordering resolve scene-before-human-object, frozen for
reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fields


class CameraError(ValueError):
    pass


class UnsortedStreamError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera; `rotation` and `origin` give the world-from-camera
    transform (x_world = rotation @ x_cam + origin), z forward."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    origin: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError(f"focal lengths must be > 0 ({self.fx}, {self.fy})")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-8:
            raise CameraError("camera rotation is not orthonormal")

    @property
    def pixel_radius(self):
        # cone radius at unit distance for the interval Gaussians; the
        # 2/sqrt(12) factor matches the variance of a box pixel footprint
        return 2.0 / np.sqrt(12.0) / self.fx

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(),
                "origin": self.origin.tolist(),
                "frame_index": self.frame_index}

    @classmethod
    def from_json(cls, d):
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=d["width"], height=d["height"],
                   rotation=np.array(d["rotation"]),
                   origin=np.array(d["origin"]),
                   frame_index=d.get("frame_index", 0))


def generate_rays(camera, pixels):
    """Unit rays through pixel centers. pixels: (N, 2) integer (col, row)."""
    px = np.atleast_2d(np.asarray(pixels))
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= camera.width) \
            or np.any(px[:, 1] < 0) or np.any(px[:, 1] >= camera.height):
        raise CameraError("pixel out of bounds")
    x = (px[:, 0] + 0.5 - camera.cx) / camera.fx
    y = (px[:, 1] + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape)
    return origins, dirs


def project(camera, pts):
    """World points -> continuous pixel coordinates and camera depth.

    Accepts Tensors (graph path, used by the flow loss) or arrays."""
    if isinstance(pts, ad.Tensor):
        rel = ad.sub(pts, ad.Tensor(camera.origin))
        cam = ad.matmul(rel, ad.Tensor(camera.rotation))  # == R^T @ rel, rowwise
        z = cam[:, 2]
        u = ad.div(cam[:, 0], z) * camera.fx + camera.cx
        v = ad.div(cam[:, 1], z) * camera.fy + camera.cy
        return ad.stack([u, v], axis=-1), z
    rel = np.asarray(pts) - camera.origin
    cam = rel @ camera.rotation
    z = cam[..., 2]
    u = cam[..., 0] / z * camera.fx + camera.cx
    v = cam[..., 1] / z * camera.fy + camera.cy
    return np.stack([u, v], axis=-1), z


# -- sampling -------------------------------------------------------------------

def sample_scene_intervals(n, near, far, rng=None, n_rays=1):
    """(n_rays, n+1) interval endpoints, linear in disparity, tiling
    [near, far) exactly. Interior endpoints jitter within their stratum when
    an rng is given; the first and last endpoints stay fixed."""
    if n < 2:
        raise ValueError("need at least 2 scene intervals")
    u = np.broadcast_to(np.arange(n + 1) / n, (n_rays, n + 1)).copy()
    if rng is not None:
        xi = rng.uniform(0.0, 1.0, size=(n_rays, n - 1))
        u[:, 1:n] = (np.arange(n - 1) + xi) / n
    d = (1.0 - u) / near + u / far
    return 1.0 / d


def ray_box_intersect(origin, direction, lo, hi):
    """Slab-method entry/exit distances; None when the ray misses the box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2))
    tmax = np.nanmin(np.maximum(t1, t2))
    if not np.isfinite(tmin):
        tmin = -np.inf
    if not np.isfinite(tmax):
        tmax = np.inf
    if tmax <= max(tmin, 0.0):
        return None
    return max(tmin, 1e-6), tmax


def sample_box_intervals(t_enter, t_exit, n, rng=None):
    """(n+1,) endpoints stratified linearly in t inside [t_enter, t_exit]."""
    u = np.arange(n + 1) / n
    if rng is not None:
        xi = rng.uniform(0.0, 1.0, size=n - 1)
        u = u.copy()
        u[1:n] = (np.arange(n - 1) + xi) / n
    return t_enter + (t_exit - t_enter) * u


# -- fusion and compositing -------------------------------------------------------

def fuse_order(scene_dist, ho_dist):
    """Merge permutation over concat([scene, ho]) per ray, stable, non-
    decreasing distance, scene first on ties. Raises on unsorted input."""
    for name, d in (("scene", scene_dist), ("human-object", ho_dist)):
        if d.shape[-1] > 1 and np.any(np.diff(d, axis=-1) < 0):
            raise UnsortedStreamError(f"{name} stream is not sorted by distance")
    merged = np.concatenate([scene_dist, ho_dist], axis=-1)
    return np.argsort(merged, axis=-1, kind="stable"), merged


def volume_render(sigma, delta, color):
    """Composite sorted samples (Eq.-style exponential transmittance).

    sigma (R, S) Tensor, delta (R, S) array, color (R, S, 3) Tensor ->
    (color (R, 3), weights (R, S), opacity (R,)). Zero-length padding
    intervals contribute exactly nothing."""
    tau = ad.mul(sigma, ad.Tensor(delta))
    cum = ad.cumsum(tau, axis=-1)
    transmittance = ad.exp(ad.sub(tau, cum))          # T_i = exp(-sum_{j<i})
    alpha = ad.sub(1.0, ad.exp(ad.neg(tau)))
    weights = ad.mul(transmittance, alpha)
    out = ad.sum_(ad.mul(ad.reshape(weights, weights.shape + (1,)), color), axis=-2)
    opacity = ad.sum_(weights, axis=-1)
    return out, weights, opacity


@dataclass
class SimilarityTransform:
    """Maps human-object coordinates into scene coordinates."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, pts):
        return self.scale * (np.asarray(pts) @ np.asarray(self.rotation).T) \
            + np.asarray(self.translation)

    def inverse_apply(self, pts):
        return ((np.asarray(pts) - np.asarray(self.translation))
                @ np.asarray(self.rotation)) / self.scale

    @property
    def is_identity(self):
        return (self.scale == 1.0
                and np.array_equal(self.rotation, np.eye(3))
                and np.array_equal(self.translation, np.zeros(3)))


@dataclass
class RenderSettings:
    n_scene: int = 64
    n_ho: int = 64
    near: float = 0.1
    far: float = 1e6
    scene_levels: int = 16
    canonical_levels: int = 10
    bbox_margin: float = 0.35
    mask_gating: bool = True


@dataclass
class FrameContext:
    """Everything frame-specific the renderer needs."""
    camera: Camera
    state_index: int
    mask: np.ndarray | None            # (H, W) bool, dilated foreground
    bbox: tuple | None                 # (lo, hi) in human-object coords
    transforms: tuple | None           # graph (fwd_rot, fwd_t, bwd_rot, bwd_t)
    rotations: ad.Tensor | None        # (K, 3) corrected rotation tensor


@dataclass
class RenderResult:
    color: ad.Tensor                   # (R, 3)
    opacity: ad.Tensor                 # (R,)
    aux: dict


class Renderer:
    def __init__(self, scene_field, canonical_field, embeddings, deformation,
                 settings, ho_to_scene=None):
        self.scene_field = scene_field
        self.canonical_field = canonical_field
        self.embeddings = embeddings
        self.deformation = deformation
        self.settings = settings
        self.ho_to_scene = ho_to_scene or SimilarityTransform()

    # -- scene stream ----------------------------------------------------------

    def _scene_stream(self, camera, origins, dirs, rng):
        s = self.settings
        ts = sample_scene_intervals(s.n_scene, s.near, s.far, rng,
                                    n_rays=origins.shape[0])
        g = fields.interval_gaussian(origins[:, None, :], dirs[:, None, :],
                                     ts[:, :-1], ts[:, 1:], camera.pixel_radius)
        delta = ts[:, 1:] - ts[:, :-1]
        dist = 0.5 * (ts[:, :-1] + ts[:, 1:])
        return g, delta, dist

    def _query_scene(self, gaussians, state_index):
        color, density = fields.query_scene(
            self.scene_field, self.embeddings, gaussians, state_index,
            self.settings.scene_levels)
        n_rays, n_samp = gaussians.t0.shape
        return (ad.reshape(color, (n_rays, n_samp, 3)),
                ad.reshape(density, (n_rays, n_samp)))

    def render_scene_only(self, ctx, pixels, rng):
        origins, dirs = generate_rays(ctx.camera, pixels)
        g, delta, dist = self._scene_stream(ctx.camera, origins, dirs, rng)
        color, sigma = self._query_scene(g, ctx.state_index)
        out, weights, opacity = volume_render(sigma, delta, color)
        return RenderResult(out, opacity, aux={
            "weights": weights, "scene_dist": dist, "scene_delta": delta})

    # -- fused stream ----------------------------------------------------------

    def _ho_points(self, ctx, origins, dirs, rng):
        """Stratified human-object samples per ray, or None where the ray
        misses the pose bounding box. Sampling runs in human-object
        coordinates; distances are returned in scene units."""
        lo, hi = ctx.bbox
        sim = self.ho_to_scene
        n = self.settings.n_ho
        pts, deltas, dists = [], [], []
        hit = np.zeros(origins.shape[0], dtype=bool)
        for i in range(origins.shape[0]):
            o = sim.inverse_apply(origins[i])
            d = sim.inverse_apply(origins[i] + dirs[i]) - o
            d_norm = np.linalg.norm(d)
            d = d / d_norm
            span = ray_box_intersect(o, d, lo, hi)
            if span is None:
                continue
            ends = sample_box_intervals(span[0], span[1], n, rng)
            mid = 0.5 * (ends[:-1] + ends[1:])
            hit[i] = True
            pts.append(o + mid[:, None] * d)
            # a similarity with scale s maps ho-space ray distance t to s*t
            deltas.append((ends[1:] - ends[:-1]) * sim.scale)
            dists.append(mid * sim.scale)
        if not np.any(hit):
            return hit, None, None, None
        return hit, np.stack(pts), np.stack(deltas), np.stack(dists)

    def _query_canonical(self, ctx, pts):
        """pts (R, N, 3) in human-object coordinates -> per-sample color and
        density tensors plus canonical points (for the cycle/flow losses)."""
        r, n, _ = pts.shape
        flat = ad.Tensor(pts.reshape(-1, 3))
        _, _, bwd_rot, bwd_t = ctx.transforms
        x_c, _ = self.deformation.deform_backward(flat, bwd_rot, bwd_t,
                                                  ctx.rotations)
        color, density = fields.query_canonical(
            self.canonical_field, self.embeddings, x_c, ctx.state_index,
            self.settings.canonical_levels)
        return (ad.reshape(color, (r, n, 3)), ad.reshape(density, (r, n)),
                x_c)

    def render_rays(self, ctx, pixels, rng):
        """Render a pixel batch for one frame, honoring mask gating.

        Returns colors in input pixel order plus auxiliary tensors for the
        losses (fused weights and human-object sample bookkeeping)."""
        pixels = np.atleast_2d(np.asarray(pixels))
        n_rays = pixels.shape[0]
        s = self.settings
        if ctx.mask is not None and s.mask_gating:
            fg = ctx.mask[pixels[:, 1], pixels[:, 0]]
        else:
            fg = np.ones(n_rays, dtype=bool)
        if ctx.transforms is None:
            fg = np.zeros(n_rays, dtype=bool)

        origins, dirs = generate_rays(ctx.camera, pixels)
        parts = {}
        if np.any(fg):
            hit, pts, deltas, dists = self._ho_points(
                ctx, origins[fg], dirs[fg], rng)
            fused_idx = np.flatnonzero(fg)[hit]
            plain_idx = np.concatenate([np.flatnonzero(~fg),
                                        np.flatnonzero(fg)[~hit]])
        else:
            fused_idx = np.array([], dtype=int)
            plain_idx = np.arange(n_rays)

        group_colors = []
        group_opacities = []
        group_order = []
        aux = {"ho": None}

        if plain_idx.size:
            res = self.render_scene_only(ctx, pixels[plain_idx], rng)
            parts["plain"] = res
            group_colors.append(res.color)
            group_opacities.append(res.opacity)
            group_order.append(plain_idx)

        if fused_idx.size:
            g, sdelta, sdist = self._scene_stream(
                ctx.camera, origins[fused_idx], dirs[fused_idx], rng)
            s_color, s_sigma = self._query_scene(g, ctx.state_index)
            h_color, h_sigma, x_c = self._query_canonical(ctx, pts)

            perm, merged_dist = fuse_order(sdist, dists)
            rows = np.arange(fused_idx.size)[:, None]
            delta_cat = np.concatenate([sdelta, deltas], axis=-1)
            sigma_cat = ad.concat([s_sigma, h_sigma], axis=-1)
            color_cat = ad.concat([s_color, h_color], axis=-2)
            sigma_m = sigma_cat[rows, perm]
            color_m = color_cat[rows, perm]
            delta_m = delta_cat[rows, perm]
            out, weights, opacity = volume_render(sigma_m, delta_m, color_m)
            group_colors.append(out)
            group_opacities.append(opacity)
            group_order.append(fused_idx)
            # positions of the ho samples inside the merged stream
            inv_perm = np.argsort(perm, axis=-1, kind="stable")
            ho_slots = inv_perm[:, s.n_scene:]
            aux["ho"] = {
                "ray_indices": fused_idx, "points": pts, "x_c": x_c,
                "weights": weights, "slots": ho_slots,
                "fused_weights_rows": rows,
            }
            parts["fused"] = RenderResult(out, opacity, {"weights": weights})

        back = np.argsort(np.concatenate(group_order), kind="stable")
        color = ad.concat(group_colors, axis=0)[back] if len(group_colors) > 1 \
            else group_colors[0][back]
        opacity = ad.concat(group_opacities, axis=0)[back] if len(group_opacities) > 1 \
            else group_opacities[0][back]
        return RenderResult(color, opacity, aux)

    def render_image(self, ctx, rng=None, chunk=1024):
        """Full-frame inference render -> float image (H, W, 3) in [0, 1]."""
        cam = ctx.camera
        uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
        rows = []
        with ad.no_grad():
            for lo in range(0, pixels.shape[0], chunk):
                res = self.render_rays(ctx, pixels[lo:lo + chunk], rng)
                rows.append(res.color.data)
        img = np.concatenate(rows, axis=0).reshape(cam.height, cam.width, 3)
        return np.clip(img, 0.0, 1.0)


def write_render(path, image, meta=None):
    """Save an 8-bit RGB render plus a JSON metadata sidecar."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
    if meta is not None:
        side = str(path) + ".json"
        with open(side, "w") as f:
            json.dump(meta, f, sort_keys=True, indent=1)
