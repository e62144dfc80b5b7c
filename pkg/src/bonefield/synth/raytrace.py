"""Analytic first-hit raytracer for the synthetic scenes.

Shading is pure albedo (no lighting), so surface color is view independent
and matches what the radiance fields can represent. The tracer also produces
depth, instance labels, and exact backward optical flow with occlusion flags.

Labels: 0 background (room and resting object), 1 human, 2 held object.
"""

from __future__ import annotations

import numpy as np

from ..render import generate_rays, project
from . import scene as sc

LABEL_BACKGROUND = 0
LABEL_HUMAN = 1
LABEL_OBJECT = 2

_INF = np.inf

# figure primitives as (bone_id, joint_a_slot, joint_b_slot, radius_scale)
# capsules span rest joints a->b and move rigidly with bone_id
_FIGURE_CAPSULES = (
    (0, 0, 12, 1.8),     # torso: pelvis -> neck
    (0, 1, 7, 1.0),      # left leg: hip -> ankle
    (0, 2, 8, 1.0),      # right leg
    (16, 16, 18, 0.9),   # left upper arm
    (18, 18, 20, 0.8),   # left forearm
    (17, 17, 19, 0.9),   # right upper arm
    (19, 19, 21, 0.8),   # right forearm
)
_HEAD = (0, 15, 2.0)     # sphere: bone, joint, radius scale


def _ray_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("nj,nj->n", oc, d)
    c = np.einsum("nj,nj->n", oc, oc) - radius * radius
    disc = b * b - c
    t = np.full(o.shape[0], _INF)
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    cand = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, _INF))
    t[ok] = cand[ok]
    t[~ok] = _INF
    return t


def _ray_capsule(o, d, a, b, radius):
    """First positive hit with the capsule around segment [a, b]."""
    ab = b - a
    len2 = float(ab @ ab)
    if len2 < 1e-12:
        return _ray_sphere(o, d, a, radius)
    axis = ab / np.sqrt(len2)
    oa = o - a
    d_perp = d - np.outer(d @ axis, axis)
    o_perp = oa - np.outer(oa @ axis, axis)
    A = np.einsum("nj,nj->n", d_perp, d_perp)
    B = np.einsum("nj,nj->n", o_perp, d_perp)
    C = np.einsum("nj,nj->n", o_perp, o_perp) - radius * radius
    disc = B * B - A * C
    t_cyl = np.full(o.shape[0], _INF)
    ok = (disc >= 0) & (A > 1e-14)
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-B - sq) / A
    h = (oa + t0[:, None] * d) @ axis
    body = ok & (t0 > 1e-6) & (h >= 0.0) & (h <= np.sqrt(len2))
    t_cyl[body] = t0[body]
    t_a = _ray_sphere(o, d, a, radius)
    t_b = _ray_sphere(o, d, b, radius)
    return np.minimum(t_cyl, np.minimum(t_a, t_b))


def _ray_room(o, d, lo, hi):
    """Exit intersection with the room walls (camera is inside the box).

    Returns (t, face) with face in 0..5 ordered [-x, +x, -y, +y, -z, +z]."""
    n = o.shape[0]
    t_best = np.full(n, _INF)
    face_best = np.zeros(n, dtype=np.int8)
    for axis in range(3):
        for side, plane in ((0, lo[axis]), (1, hi[axis])):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (plane - o[:, axis]) / d[:, axis]
            t = np.where(np.isfinite(t) & (t > 1e-6), t, _INF)
            p = o + t[:, None] * d
            ok = np.ones(n, dtype=bool)
            for other in range(3):
                if other == axis:
                    continue
                ok &= (p[:, other] >= lo[other] - 1e-9) & (p[:, other] <= hi[other] + 1e-9)
            better = ok & (t < t_best)
            t_best[better] = t[better]
            face_best[better] = axis * 2 + side
    return t_best, face_best


def _ray_obb(o, d, center, rotation, half):
    """Oriented box via slab test in the box frame. Returns entry t."""
    ol = (o - center) @ rotation
    dl = d @ rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
    t1 = (-half - ol) * inv
    t2 = (half - ol) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax > np.maximum(tmin, 1e-6))
    t = np.where(hit & (tmin > 1e-6), tmin, np.where(hit, tmax, _INF))
    return np.where(t > 1e-6, t, _INF)


def trace(model, camera, frame, pixels=None):
    """First-hit trace. Returns dict with color, depth, label, prim, local
    hit coordinates and the per-pixel world hit points."""
    spec = model.spec
    if pixels is None:
        uu, vv = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
    o, d = generate_rays(camera, pixels)
    n = o.shape[0]
    pose = model.poses[frame]
    tf = model.transforms[frame]
    placement = model.placement(frame)
    rest = model.skeleton.rest_joints

    # room
    t_room, face = _ray_room(o, d, spec.room_lo, spec.room_hi)
    best_t = t_room
    best_prim = -np.ones(n, dtype=np.int64)   # -1 room, 0.. figure, 100 object

    # figure capsules and head, posed via each bone's rigid transform
    for idx, (bone, ja, jb, rscale) in enumerate(_FIGURE_CAPSULES):
        a = tf.fwd_rot[bone] @ rest[ja] + tf.fwd_t[bone]
        b = tf.fwd_rot[bone] @ rest[jb] + tf.fwd_t[bone]
        t = _ray_capsule(o, d, a, b, spec.figure_radius * rscale)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_prim = np.where(closer, idx, best_prim)
    bone, joint, rscale = _HEAD
    center = tf.fwd_rot[bone] @ rest[joint] + tf.fwd_t[bone]
    t = _ray_sphere(o, d, center, spec.figure_radius * rscale)
    closer = t < best_t
    best_t = np.where(closer, t, best_t)
    best_prim = np.where(closer, len(_FIGURE_CAPSULES), best_prim)

    # object box
    half = spec.object_size / 2.0
    t = _ray_obb(o, d, placement.center, placement.rotation, half)
    closer = t < best_t
    best_t = np.where(closer, t, best_t)
    best_prim = np.where(closer, 100, best_prim)

    pts = o + best_t[:, None] * d
    color = np.zeros((n, 3))
    label = np.zeros(n, dtype=np.uint8)

    room_hit = best_prim == -1
    for f in range(6):
        m = room_hit & (face == f)
        if np.any(m):
            axes = [ax for ax in range(3) if ax != f // 2]
            color[m] = model.albedo.wall(f, pts[m], axes)

    for idx, (bone, ja, jb, _r) in enumerate(_FIGURE_CAPSULES):
        m = best_prim == idx
        if np.any(m):
            local = (pts[m] - tf.fwd_t[bone]) @ tf.fwd_rot[bone]
            color[m] = model.albedo.body(idx, local[:, 2])
            label[m] = LABEL_HUMAN
    m = best_prim == len(_FIGURE_CAPSULES)
    if np.any(m):
        head_bone = _HEAD[0]
        local = (pts[m] - tf.fwd_t[head_bone]) @ tf.fwd_rot[head_bone]
        color[m] = model.albedo.body(len(_FIGURE_CAPSULES), local[:, 2])
        label[m] = LABEL_HUMAN

    m = best_prim == 100
    if np.any(m):
        local = placement.local(pts[m])
        color[m] = model.albedo.object(local)
        label[m] = LABEL_OBJECT if placement.held else LABEL_BACKGROUND

    # distinct ids per wall so surface-consistency checks see room corners
    eff_prim = np.where(best_prim == -1, -1 - face.astype(np.int64), best_prim)
    return {"color": color, "depth": best_t, "label": label,
            "prim": best_prim, "eff_prim": eff_prim, "points": pts,
            "pixels": pixels}


def render_image(model, camera, frame, supersample=1):
    """(H, W, 3) float image plus depth and label maps."""
    w, h = camera.width, camera.height
    if supersample == 1:
        out = trace(model, camera, frame)
        return (out["color"].reshape(h, w, 3),
                out["depth"].reshape(h, w),
                out["label"].reshape(h, w))
    s = supersample
    from ..render import Camera
    big = Camera(fx=camera.fx * s, fy=camera.fy * s, cx=camera.cx * s,
                 cy=camera.cy * s, width=w * s, height=h * s,
                 rotation=camera.rotation, origin=camera.origin,
                 frame_index=camera.frame_index)
    out = trace(model, big, frame)
    color = out["color"].reshape(h, s, w, s, 3).mean(axis=(1, 3))
    depth = out["depth"].reshape(h, s, w, s).mean(axis=(1, 3))
    label = out["label"].reshape(h, s, w, s)[:, 0, :, 0]
    return color, depth, label


def _clean_map(model, camera, frame):
    """Per-pixel surface id where the whole pixel footprint shows one
    primitive (checked on a 2x subsample grid), else -999. Also returns the
    per-pixel deepest subsample depth."""
    from ..render import Camera

    w, h = camera.width, camera.height
    big = Camera(fx=camera.fx * 2, fy=camera.fy * 2, cx=camera.cx * 2,
                 cy=camera.cy * 2, width=w * 2, height=h * 2,
                 rotation=camera.rotation, origin=camera.origin,
                 frame_index=camera.frame_index)
    out = trace(model, big, frame)
    sub = out["eff_prim"].reshape(h, 2, w, 2).transpose(0, 2, 1, 3).reshape(h, w, 4)
    ids = np.where((sub == sub[..., :1]).all(axis=-1), sub[..., 0], -999)
    depth = out["depth"].reshape(h, 2, w, 2).max(axis=(1, 3))
    return ids, depth


def oracle_flow(model, frame_t, frame_prev):
    """Exact backward flow frame_t -> frame_prev per pixel.

    Returns flow (H, W, 2) float32 with NaN at invalid pixels. A pixel is
    invalid when its surface point has no same-placement counterpart at the
    previous frame (object pickup/putdown), is occluded there, or when either
    endpoint's interpolation footprint straddles more than one surface (such
    pixels cannot be compared by image warping)."""
    cam_t = model.cameras[frame_t]
    cam_p = model.cameras[frame_prev]
    w, h = cam_t.width, cam_t.height
    out_t = trace(model, cam_t, frame_t)
    ids_t, _ = _clean_map(model, cam_t, frame_t)
    ids_p, depth_prev = _clean_map(model, cam_p, frame_prev)

    pts_t = out_t["points"]
    prim = out_t["prim"]
    pixels = out_t["pixels"].astype(np.float64) + 0.5
    flow = np.full((h * w, 2), np.nan, dtype=np.float64)

    place_t = model.placement(frame_t)
    place_p = model.placement(frame_prev)
    tf_p = model.transforms[frame_prev]

    prev_pts = np.full_like(pts_t, np.nan)
    room = prim == -1
    prev_pts[room] = pts_t[room]

    for idx, (bone, _ja, _jb, _r) in enumerate(list(_FIGURE_CAPSULES) + [(_HEAD[0],) * 4]):
        m = prim == idx
        if not np.any(m):
            continue
        tf_t = model.transforms[frame_t]
        local = (pts_t[m] - tf_t.fwd_t[bone]) @ tf_t.fwd_rot[bone]
        prev_pts[m] = local @ tf_p.fwd_rot[bone].T + tf_p.fwd_t[bone]

    m = prim == 100
    if np.any(m):
        if place_t.held == place_p.held and (
                place_t.held or np.allclose(place_t.center, place_p.center)):
            local = place_t.local(pts_t[m])
            prev_pts[m] = local @ place_p.rotation.T + place_p.center
        # else: placement changed between frames -> stays invalid

    # source pixel plus its 3x3 neighborhood must be subpixel-clean
    uniform = ids_t != -999
    base = ids_t.copy()
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            shifted = np.roll(np.roll(base, dv, axis=0), du, axis=1)
            uniform &= shifted == base
    uniform[0, :] = uniform[-1, :] = False
    uniform[:, 0] = uniform[:, -1] = False

    valid = np.isfinite(prev_pts[:, 0]) & uniform.reshape(-1)
    if np.any(valid):
        uv, z = project(cam_p, prev_pts[valid])
        inside = (z > 0) & (uv[:, 0] >= 1) & (uv[:, 0] < w - 1) \
            & (uv[:, 1] >= 1) & (uv[:, 1] < h - 1)
        dist = np.linalg.norm(prev_pts[valid] - cam_p.origin, axis=-1)
        u0 = np.clip(np.floor(uv[:, 0] - 0.5).astype(int), 0, w - 2)
        v0 = np.clip(np.floor(uv[:, 1] - 0.5).astype(int), 0, h - 2)
        corners_d = np.stack([depth_prev[v0, u0], depth_prev[v0, u0 + 1],
                              depth_prev[v0 + 1, u0], depth_prev[v0 + 1, u0 + 1]])
        corners_id = np.stack([ids_p[v0, u0], ids_p[v0, u0 + 1],
                               ids_p[v0 + 1, u0], ids_p[v0 + 1, u0 + 1]])
        src_id = out_t["eff_prim"][valid]
        clean = np.all(corners_id == src_id[None, :], axis=0)
        seen = dist <= corners_d.max(axis=0) * (1.0 + 5e-3) + 1e-3
        smooth = (corners_d.max(axis=0) - corners_d.min(axis=0)) \
            <= 0.04 * np.maximum(dist, 1e-6) + 2e-3
        ok = inside & seen & clean & smooth
        rows = np.flatnonzero(valid)[ok]
        flow[rows] = uv[ok] - pixels[rows]
    return flow.reshape(h, w, 2).astype(np.float32)
