"""State-conditional radiance fields and their input encodings.

Two fields share one MLP architecture family:
  * the scene field consumes integrated positional encodings of contracted
    interval Gaussians concatenated with a scene state embedding,
  * the canonical human-object field consumes plain positional encodings of
    canonical points concatenated with a canonical state embedding.

Neither field sees the viewing direction; color is a function of position and
state only.

Encoding layouts are frozen:
  positional_encoding: per level l, [sin(2^l pi x), sin(.y), sin(.z),
                                     cos(2^l pi x), cos(.y), cos(.z)]
  integrated encoding: per level l, [sin(2^l mu) * damp, cos(2^l mu) * damp]
                       with damp = exp(-2^(2l-1) diag(cov)), same xyz order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DegenerateIntervalError(ValueError):
    pass


# -- scene contraction ---------------------------------------------------------

def contract(x):
    """Compress unbounded points into the radius-2 ball.

    Identity inside the unit ball, (2 - 1/|x|) * x/|x| outside."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(r, 1.0)
    return np.where(r <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))


def contract_jacobian(x):
    """Analytic Jacobian of `contract` at each point, shape (..., 3, 3)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)
    eye = np.broadcast_to(np.eye(3), x.shape + (3,)).copy()
    inside = r <= 1.0
    safe = np.where(inside, 1.0, r)
    # f = g(r) x with g = 2/r - 1/r^2; J = g I + (g'/r) x x^T
    g = 2.0 / safe - 1.0 / safe**2
    gp_over_r = (-2.0 / safe**2 + 2.0 / safe**3) / safe
    outer = x[..., :, None] * x[..., None, :]
    J = g[..., None, None] * eye + gp_over_r[..., None, None] * outer
    return np.where(inside[..., None, None], eye, J)


def contract_gaussian(mean, cov):
    """Push a Gaussian through the contraction: (f(mu), J Sigma J^T)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    J = contract_jacobian(mean)
    new_cov = J @ cov @ np.swapaxes(J, -1, -2)
    return contract(mean), new_cov


# -- encodings -----------------------------------------------------------------

def integrated_encoding(mean, cov_diag, levels):
    """Expected sin/cos features of Gaussian-distributed points.

    mean (..., 3), cov_diag (..., 3). Output (..., 6 * levels)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    mean = np.asarray(mean, dtype=np.float64)
    cov_diag = np.asarray(cov_diag, dtype=np.float64)
    feats = []
    for level in range(levels):
        scale = 2.0 ** level
        damp = np.exp(-(2.0 ** (2 * level - 1)) * cov_diag)
        feats.append(np.sin(scale * mean) * damp)
        feats.append(np.cos(scale * mean) * damp)
    return np.concatenate(feats, axis=-1)


def positional_encoding(x, levels):
    """Classic sin/cos encoding with the pi convention, numpy arrays."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    feats = []
    for level in range(levels):
        s = (2.0 ** level) * np.pi
        feats.append(np.sin(s * x))
        feats.append(np.cos(s * x))
    return np.concatenate(feats, axis=-1)


def positional_encoding_t(x, levels):
    """Graph version of `positional_encoding` for Tensor inputs."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    feats = []
    for level in range(levels):
        s = (2.0 ** level) * np.pi
        feats.append(ad.sin(ad.mul(x, s)))
        feats.append(ad.cos(ad.mul(x, s)))
    return ad.concat(feats, axis=-1)


# -- interval Gaussians ---------------------------------------------------------

@dataclass
class GaussianSamples:
    """Batched conical-frustum Gaussians along rays."""
    mean: np.ndarray     # (..., 3)
    cov: np.ndarray      # (..., 3, 3) symmetric PSD
    t0: np.ndarray       # (...)
    t1: np.ndarray       # (...)

    @property
    def cov_diag(self):
        return np.diagonal(self.cov, axis1=-2, axis2=-1)


def interval_gaussian(origin, direction, t0, t1, pixel_radius):
    """First two moments of the conical frustum spanned by [t0, t1).

    `direction` must be unit-norm; `pixel_radius` is the cone radius at unit
    distance. Uses the numerically stable closed forms from the mip-style
    rendering literature."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(t1 <= t0) or np.any(t0 <= 0):
        raise DegenerateIntervalError("intervals need t1 > t0 > 0")
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    mid = 0.5 * (t0 + t1)
    hw = 0.5 * (t1 - t0)
    denom = 3.0 * mid**2 + hw**2
    t_mean = mid + (2.0 * mid * hw**2) / denom
    t_var = hw**2 / 3.0 - (4.0 / 15.0) * (hw**4 * (12.0 * mid**2 - hw**2)) / denom**2
    r_var = pixel_radius**2 * (mid**2 / 4.0 + (5.0 / 12.0) * hw**2
                               - (4.0 / 15.0) * hw**4 / denom)
    mean = origin + d * t_mean[..., None]
    dd = d[..., :, None] * d[..., None, :]
    eye = np.broadcast_to(np.eye(3), dd.shape)
    cov = t_var[..., None, None] * dd + r_var[..., None, None] * (eye - dd)
    return GaussianSamples(mean=mean, cov=cov, t0=t0, t1=t1)


# -- MLPs ------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class MLP:
    """Fully connected trunk with optional input re-concatenation (skip).

    `skip_at` counts layers from 1; the input is concatenated to that layer's
    input, matching the usual radiance-field trunk layout."""

    def __init__(self, store, prefix, in_dim, width, depth, rng,
                 skip_at=None, out_dim=None, zero_last=False):
        self.in_dim = in_dim
        self.skip_at = skip_at
        self.weights = []
        dim = in_dim
        for i in range(1, depth + 1):
            if skip_at is not None and i == skip_at:
                dim += in_dim
            W = store.param(f"{prefix}/layer{i}/weight", _glorot(rng, dim, width))
            b = store.param(f"{prefix}/layer{i}/bias", np.zeros(width))
            self.weights.append((W, b))
            dim = width
        self.out = None
        if out_dim is not None:
            if zero_last:
                W = store.param(f"{prefix}/out/weight", np.zeros((dim, out_dim)))
            else:
                W = store.param(f"{prefix}/out/weight", _glorot(rng, dim, out_dim))
            b = store.param(f"{prefix}/out/bias", np.zeros(out_dim))
            self.out = (W, b)

    def forward(self, x):
        h = x
        for i, (W, b) in enumerate(self.weights, start=1):
            if self.skip_at is not None and i == self.skip_at:
                h = ad.concat([h, x], axis=-1)
            h = ad.relu(ad.matmul(h, W) + b)
        if self.out is not None:
            W, b = self.out
            h = ad.matmul(h, W) + b
        return h


class RadianceField:
    """MLP trunk with a softplus density head and a sigmoid color head."""

    def __init__(self, store, prefix, in_dim, width, depth, skip_at, rng,
                 density_bias=0.0):
        self.trunk = MLP(store, prefix + "/trunk", in_dim, width, depth, rng,
                         skip_at=skip_at)
        self.density_head = (
            store.param(f"{prefix}/density/weight", _glorot(rng, width, 1)),
            store.param(f"{prefix}/density/bias", np.full(1, density_bias)),
        )
        self.color_head = (
            store.param(f"{prefix}/color/weight", _glorot(rng, width, 3)),
            store.param(f"{prefix}/color/bias", np.zeros(3)),
        )

    def query(self, feats):
        """feats (P, in_dim) Tensor -> (color (P, 3), density (P,))."""
        h = self.trunk.forward(feats)
        Wd, bd = self.density_head
        Wc, bc = self.color_head
        density = ad.softplus(ad.reshape(ad.matmul(h, Wd) + bd, (h.shape[0],)))
        color = ad.sigmoid(ad.matmul(h, Wc) + bc)
        return color, density


class StateEmbeddings:
    """Learnable per-state rows for the scene and canonical fields."""

    def __init__(self, store, n_states, dim=64, rng=None, prefix="embeddings"):
        if n_states < 1:
            raise ValueError("need at least one object state")
        rng = rng or np.random.default_rng(0)
        self.n_states = n_states
        self.dim = dim
        self.scene = store.param(f"{prefix}/scene",
                                 rng.normal(scale=0.01, size=(n_states, dim)))
        self.canonical = store.param(f"{prefix}/canonical",
                                     rng.normal(scale=0.01, size=(n_states, dim)))

    def _rows(self, table, state_index):
        idx = np.asarray(state_index)
        if np.any(idx < 0) or np.any(idx >= self.n_states):
            raise IndexError(f"state index out of range [0, {self.n_states})")
        return table[idx]

    def scene_rows(self, state_index):
        return self._rows(self.scene, state_index)

    def canonical_rows(self, state_index):
        return self._rows(self.canonical, state_index)


def query_scene(field, embeddings, gaussians, state_index, levels):
    """Color/density of contracted interval Gaussians at a given state.

    The Gaussian moments do not depend on learnable parameters, so the
    encoding runs in plain numpy and enters the graph as a constant."""
    mean, cov = contract_gaussian(gaussians.mean, gaussians.cov)
    diag = np.diagonal(cov, axis1=-2, axis2=-1)
    enc = integrated_encoding(mean, diag, levels)
    enc = enc.reshape(-1, enc.shape[-1])
    idx = np.broadcast_to(np.asarray(state_index),
                          gaussians.mean.shape[:-1]).reshape(-1)
    feats = ad.concat([ad.Tensor(enc), embeddings.scene_rows(idx)], axis=-1)
    return field.query(feats)


def query_canonical(field, embeddings, x_c, state_index, levels):
    """Color/density of canonical points (Tensor (P, 3)) at a given state."""
    enc = positional_encoding_t(x_c, levels)
    idx = np.broadcast_to(np.asarray(state_index), (x_c.shape[0],)).reshape(-1)
    feats = ad.concat([enc, embeddings.canonical_rows(idx)], axis=-1)
    return field.query(feats)
