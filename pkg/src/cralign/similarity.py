"""Multi-modal similarity: Parzen correlation ratio, its losses, and MI.

The differentiable correlation ratio of ``y`` given ``x`` replaces hard
intensity classes by Gaussian windows on ``x``::

    w_ik    = exp(-(x_i - bin_k)^2 / (2 h^2)) / (h sqrt(2 pi))
    ybar_k  = sum_i w_ik y_i / sum_i w_ik
    n_k     = sum_i w_ik / sum_ik w_ik
    eta     = sum_k n_k (ybar_k - ybar)^2 / var(y)

Optional per-voxel weights (the soft validity of warped samples) multiply
every sum, including the ones defining ``ybar`` and ``var(y)``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _parzen
from .affine import AffineParams, build_matrix, matrix_derivatives
from .errors import (ConstantTargetError, InvalidArgumentError, NoAdmissiblePatchesError,
                     NoOverlapError)
from .volume import trilinear

METRICS = ("cr_global", "cr_patch", "mi")

# voxels per block in whole-image evaluation
BLOCK_SIZE = 16384
# largest cached window matrix (entries) for the fixed image
KERNEL_CACHE_LIMIT = 1 << 24
# width, in moving-grid voxels, of the soft validity margin beyond the
# outermost voxel centres (0.5 reaches the physical edge of the image)
EDGE_MARGIN = 0.5
# registration aborts below this fraction of in-bounds samples
MIN_VALID_FRACTION = 0.01


@dataclass(frozen=True)
class ParzenConfig:
    """Parzen window settings; intensities are assumed to lie in [0, 1]."""

    num_bins: int = 32
    bandwidth_ratio: float = 0.5
    mask_policy: str = "valid_only"

    def __post_init__(self):
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise InvalidArgumentError("num_bins must be an integer >= 2")
        if not self.bandwidth_ratio > 0:
            raise InvalidArgumentError("bandwidth_ratio must be positive")
        if self.mask_policy not in ("use_all", "valid_only"):
            raise InvalidArgumentError(f"unknown mask policy {self.mask_policy!r}")

    @property
    def bandwidth(self):
        return self.bandwidth_ratio / self.num_bins

    @property
    def bin_centers(self):
        return (np.arange(self.num_bins) + 0.5) / self.num_bins

    def kernel(self):
        return _parzen.Kernel(self.num_bins, self.bandwidth_ratio)


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 16
    min_valid: float = 0.5
    min_voxels: int = 64

    def __post_init__(self):
        if int(self.patch_size) != self.patch_size or self.patch_size < 2:
            raise InvalidArgumentError("patch_size must be an integer >= 2")
        if not 0 < self.min_valid <= 1:
            raise InvalidArgumentError("min_valid must lie in (0, 1]")


@dataclass(frozen=True)
class MetricValue:
    value: float
    n_effective: int


def _flat_pair(x, y, weights):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InvalidArgumentError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InvalidArgumentError("need at least two samples")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != x.shape:
        raise InvalidArgumentError("weights do not match the samples")
    return x, y, w


def _global_engine(n, cfg, threads=1):
    return _parzen.ParzenEngine(cfg.kernel(), _parzen.regular_blocks(n, BLOCK_SIZE), threads=threads)


def correlation_ratio(x, y, cfg=ParzenConfig(), weights=None):
    """Parzen-windowed correlation ratio eta(y | x)."""
    x, y, w = _flat_pair(x, y, weights)
    yx, _, _, _ = _global_engine(x.size, cfg).cr_directions(x, y, w)
    if not yx.ok[0]:
        raise ConstantTargetError("target intensities are constant")
    return float(yx.value[0])


def discrete_cr_oracle(x, y, num_bins):
    """Hard-binned correlation ratio eta(y | x), bins ``floor(x * K)``."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InvalidArgumentError(f"length mismatch: {x.size} vs {y.size}")
    dev = y - y.mean()
    total = float(np.dot(dev, dev))
    if total < _parzen.MIN_VARIANCE * y.size:
        raise ConstantTargetError("target intensities are constant")
    bins = np.clip(np.floor(x * num_bins), 0, num_bins - 1).astype(np.intp)
    counts = np.bincount(bins, minlength=num_bins)
    sums = np.bincount(bins, weights=y, minlength=num_bins)
    means = np.divide(sums, counts, out=np.zeros(num_bins), where=counts > 0)
    # 1 - within / total equals between / total, and is exactly 1 when
    # every bin holds a single value
    within = y - means[bins]
    return float(min(max(1.0 - np.dot(within, within) / total, 0.0), 1.0))


def cr_loss_symmetric(X, Y, cfg=ParzenConfig(), weights=None):
    """``-(eta(Y|X) + eta(X|Y)) / 2``."""
    x, y, w = _flat_pair(X, Y, weights)
    yx, xy, _, _ = _global_engine(x.size, cfg).cr_directions(x, y, w)
    _parzen.check_targets(yx, xy)
    return float(-0.5 * (yx.value[0] + xy.value[0]))


class PatchLayout:
    """Non-overlapping cubic tiling of a grid, as a voxel permutation.

    ``order`` lists C-order flat voxel indices grouped patch by patch;
    ``blocks`` gives each patch's range within that order.
    """

    def __init__(self, dims, patch_size):
        self.dims = tuple(dims)
        counts = [-(-n // patch_size) for n in self.dims]
        idx = np.indices(self.dims).reshape(3, -1) // patch_size
        pid = np.ravel_multi_index(tuple(idx), counts)
        self.order = np.argsort(pid, kind="stable")
        sizes = np.bincount(pid, minlength=int(np.prod(counts)))
        keep = sizes > 0
        stops = np.cumsum(sizes)[keep]
        starts = stops - sizes[keep]
        self.blocks = list(zip(starts.tolist(), stops.tolist()))
        self.sizes = sizes[keep].astype(float)

    def engine(self, cfg, threads=1):
        return _parzen.ParzenEngine(cfg.kernel(), self.blocks, np.arange(len(self.blocks)), threads=threads)


def _patch_scale(yx, xy, W, sizes, patch):
    admissible = yx.ok & xy.ok & (sizes >= patch.min_voxels) & (W >= patch.min_valid * sizes)
    n = int(admissible.sum())
    if n == 0:
        raise NoAdmissiblePatchesError("no patch has enough valid, non-constant voxels")
    return np.where(admissible, -0.5 / n, 0.0), n


def cr_loss_patch(X, Y, cfg=ParzenConfig(), patch=PatchConfig(), weights=None):
    """Mean symmetric CR loss over admissible non-overlapping patches.

    ``X`` and ``Y`` are 3D arrays on the same grid; ``weights`` (same shape)
    marks valid voxels and defaults to all ones.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 3:
        raise InvalidArgumentError("patch loss needs two 3D arrays on the same grid")
    w = np.ones(X.shape) if weights is None else np.asarray(weights, dtype=float)
    layout = PatchLayout(X.shape, patch.patch_size)
    o = layout.order
    x, y, w = X.ravel()[o], Y.ravel()[o], w.ravel()[o]
    yx, xy, _, _ = layout.engine(cfg).cr_directions(x, y, w)
    scale, n = _patch_scale(yx, xy, yx.W, layout.sizes, patch)
    value = np.sum(np.where(scale != 0, scale * (yx.value + xy.value), 0.0))
    return MetricValue(float(value), n)


def mutual_information(x, y, cfg=ParzenConfig(), weights=None):
    """Parzen mutual information (nats) between ``x`` and ``y``."""
    x, y, w = _flat_pair(x, y, weights)
    J, _, _ = _global_engine(x.size, cfg).joint(x, y, w)
    mi, _ = _parzen.ParzenEngine.mutual_information(J)
    return float(mi[0])


def mi_loss(x, y, cfg=ParzenConfig(), weights=None):
    return -mutual_information(x, y, cfg, weights)


# -- registration objective ----------------------------------------------


def _taper(u, n):
    """Soft validity along one axis and its derivative.

    One on the hull of voxel centres ``[0, n - 1]``, falling to zero over
    :data:`EDGE_MARGIN` voxels beyond it along a quintic smoothstep, so the
    weights are twice continuously differentiable.
    """
    below = -u
    above = u - (n - 1)
    use_lo = below >= above
    d = np.clip(np.where(use_lo, below, above) / EDGE_MARGIN, 0.0, 1.0)
    m = 1.0 - d
    r = m * m * m * (m * (6.0 * m - 15.0) + 10.0)
    dm = np.where(use_lo, 1.0, -1.0) / EDGE_MARGIN
    dr = 30.0 * m * m * (m - 1.0) * (m - 1.0) * dm
    return r, dr


def soft_validity(u, dims):
    """Product of per-axis tapers: one inside the grid, zero half a voxel beyond it."""
    r = np.empty(u.shape)
    dr = np.empty(u.shape)
    for a in range(3):
        r[:, a], dr[:, a] = _taper(u[:, a], dims[a])
    w = r[:, 0] * r[:, 1] * r[:, 2]
    dw = np.stack([dr[:, 0] * r[:, 1] * r[:, 2], r[:, 0] * dr[:, 1] * r[:, 2], r[:, 0] * r[:, 1] * dr[:, 2]], axis=1)
    return w, dw


@dataclass
class Evaluation:
    loss: float
    grad: Optional[np.ndarray]
    valid_fraction: float
    n_effective: int


class RegistrationCost:
    """Loss of ``moving`` warped onto ``fixed`` as a function of the 12 parameters.

    Fixed-image quantities (grid coordinates, patch layout, windows) are
    computed once; :meth:`evaluate` then costs one warp plus one metric pass.
    """

    def __init__(self, moving, fixed, metric="cr_global", cfg=ParzenConfig(), patch=PatchConfig(), threads=1):
        if metric not in METRICS:
            raise InvalidArgumentError(f"unknown metric {metric!r}")
        self.moving, self.fixed = moving, fixed
        self.metric, self.cfg, self.patch = metric, cfg, patch
        n = int(np.prod(fixed.dims))
        if metric == "cr_patch":
            self.layout = PatchLayout(fixed.dims, patch.patch_size)
            order = self.layout.order
            self.engine = self.layout.engine(cfg, threads)
        else:
            self.layout = None
            order = np.arange(n)
            self.engine = _global_engine(n, cfg, threads)
        coords = fixed.grid_coords().reshape(-1, 3)[order]
        self.coords_h = np.concatenate([coords, np.ones((n, 1))], axis=1)
        self.y = fixed.data.ravel()[order]
        self.ky = self.engine.kernels(self.y) if n * cfg.num_bins <= KERNEL_CACHE_LIMIT else None
        self.du_dc = moving.half_extent / np.array(moving.spacing)

    def evaluate(self, p, gradient=True):
        if not isinstance(p, AffineParams):
            p = AffineParams.from_vector(p)
        M = build_matrix(p)
        if not np.all(np.isfinite(M)):
            raise NoOverlapError("transform has non-finite entries")
        cm = self.coords_h @ M[:3].T
        u = self.moving.to_voxel(cm)
        if self.cfg.mask_policy == "valid_only":
            w, dw = soft_validity(u, self.moving.dims)
            out = trilinear(self.moving.data, u, with_gradient=gradient, margin=EDGE_MARGIN)
            x, valid = out[0], out[1]
            gu = out[2] if gradient else None
            valid_fraction = float(w.mean())
        else:
            # zero padding, every fixed voxel counts
            out = trilinear(self.moving.data, u, with_gradient=gradient)
            x, valid = out[0], out[1]
            gu = out[2] if gradient else None
            w, dw = np.ones_like(x), None
            valid_fraction = float(valid.mean())
        if valid_fraction < MIN_VALID_FRACTION:
            raise NoOverlapError(f"only {valid_fraction:.4f} of the fixed grid maps inside the moving image")
        eng, y = self.engine, self.y
        if self.metric == "mi":
            J, kx, ky = eng.joint(x, y, w, ky=self.ky)
            mi, E = eng.mutual_information(J)
            scale = np.array([-1.0])
            loss, n_eff = -float(mi[0]), int(valid.sum())
        else:
            yx, xy, kx, ky = eng.cr_directions(x, y, w, ky=self.ky)
            if self.metric == "cr_patch":
                scale, n_eff = _patch_scale(yx, xy, yx.W, self.layout.sizes, self.patch)
                loss = float(np.sum(np.where(scale != 0, scale * (yx.value + xy.value), 0.0)))
            else:
                _parzen.check_targets(yx, xy)
                scale, n_eff = np.array([-0.5]), int(valid.sum())
                loss = float(-0.5 * (yx.value[0] + xy.value[0]))
        if not gradient:
            return Evaluation(loss, None, valid_fraction, n_eff)
        if self.metric == "mi":
            gx, _, gw = eng.mi_gradient(x, y, w, E, scale, kx, ky, need_y=False)
        else:
            gx, _, gw = eng.cr_gradient(x, y, w, yx, xy, scale, kx, ky, need_y=False)
        g_u = gx[:, None] * gu
        if dw is not None:
            g_u += gw[:, None] * dw
        g_c = g_u * self.du_dc
        G = g_c.T @ self.coords_h
        grad = np.einsum("ij,pij->p", G, matrix_derivatives(p)[:, :3, :])
        return Evaluation(loss, grad, valid_fraction, n_eff)

    def __call__(self, p):
        ev = self.evaluate(p)
        return ev.loss, ev.grad


def loss_and_gradient(p, moving, fixed, metric="cr_global", cfg=ParzenConfig(), patch=PatchConfig(), threads=1):
    """Loss of ``warp(moving, fixed, p)`` against ``fixed`` and its gradient.

    The gradient is exact (chain rule through the Parzen windows, trilinear
    sampling and the coordinate map) and ordered as ``AffineParams.as_vector``.
    """
    return RegistrationCost(moving, fixed, metric, cfg, patch, threads)(p)
