"""Synthetic cross-modality phantoms, random transforms and evaluation metrics."""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .affine import AffineParams, build_matrix, warp_matrix
from .errors import InvalidArgumentError, PhantomGenerationError
from .volume import Volume

PLACEMENT_ATTEMPTS = 100
RAMP = (0.08, 0.28)  # CT background gradient end points
MOVING_PAD = 0.5  # padding per side, as a fraction of each axis, for the moving render


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (2.8, 2.8, 3.8)
    seed: int = 0
    n_blobs: int = 6
    noise_sigma: float = 0.02
    blur_sigma_pet: float = 1.5

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise InvalidArgumentError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if self.noise_sigma < 0 or self.blur_sigma_pet < 0:
            raise InvalidArgumentError("noise and blur must be non-negative")
        if self.n_blobs < 1:
            raise InvalidArgumentError("need at least one blob")


@dataclass(frozen=True)
class TransformRanges:
    """Half-widths of the uniform distributions used by :func:`random_affine`.

    ``max_trans`` is a fraction of the volume's extent along each axis.
    """

    max_rot: float = math.radians(15.0)
    max_trans: float = 0.10
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_shear: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise InvalidArgumentError(f"scale_range must satisfy 0 < lo <= 1 <= hi, got {self.scale_range}")
        if min(self.max_rot, self.max_trans, self.max_shear) < 0:
            raise InvalidArgumentError("ranges must be non-negative")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)


def pet_remap(ct_value):
    """Non-monotonic CT -> PET intensity map used for the phantoms.

    The soft-tissue range (< 0.35) is inverted and the organ range folds
    twice, so bright CT structures can be dark in PET and vice versa.
    """
    ct_value = np.asarray(ct_value, dtype=float)
    tissue = 0.75 - 1.6 * ct_value
    organ = 0.5 + 0.45 * np.sin(2.0 * np.pi * 1.75 * (ct_value - 0.45) + 0.8)
    return np.where(ct_value < 0.35, tissue, organ)


@dataclass
class _Layout:
    direction: np.ndarray
    ramp_half: float
    blobs: list  # (center_mm, semi_axes_mm, rotation, level)


def _sample_layout(spec, rng):
    dims = np.array(spec.dims)
    spacing = np.array(spec.spacing, dtype=float)
    extent = dims * spacing
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    # projection range over the voxel centres of the phantom grid
    ramp_half = float(np.sum(np.abs(direction) * (dims - 1) * spacing / 2.0))
    levels = rng.permutation(np.linspace(0.45, 1.0, spec.n_blobs))
    half = extent / 2.0
    blobs = []
    for j in range(spec.n_blobs):
        for _ in range(PLACEMENT_ATTEMPTS):
            axes = rng.uniform(0.08, 0.15, size=3) * extent.min()
            radius = axes.max()
            if np.any(half - radius * 1.1 <= -half + radius * 1.1):
                continue
            center = rng.uniform(-half + radius * 1.1, half - radius * 1.1)
            if all(np.linalg.norm(center - c) > radius + a.max() for c, a, _, _ in blobs):
                break
        else:
            raise PhantomGenerationError(f"could not place blob {j + 1} after {PLACEMENT_ATTEMPTS} attempts")
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        blobs.append((center, axes, q, levels[j]))
    return _Layout(direction, ramp_half, blobs)


def _render(spec, layout, dims, rng):
    """CT, PET and labels of ``layout`` on a grid centred like the phantom grid."""
    pts = [((np.arange(n) + 0.5) * s - n * s / 2.0) for n, s in zip(dims, spec.spacing)]
    X, Y, Z = np.meshgrid(*pts, indexing="ij")
    coords = np.stack([X, Y, Z], axis=-1)
    proj = coords @ layout.direction
    lo, hi = RAMP
    ct = np.clip(lo + (hi - lo) * (proj + layout.ramp_half) / (2.0 * layout.ramp_half), lo, hi)
    labels = np.zeros(dims, dtype=np.int32)
    for j, (center, axes, q, level) in enumerate(layout.blobs):
        local = (coords - center) @ q
        inside = np.sum((local / axes) ** 2, axis=-1) <= 1.0
        ct[inside] = level
        labels[inside] = j + 1
    pet = pet_remap(ct)
    if spec.blur_sigma_pet > 0:
        pet = ndimage.gaussian_filter(pet, spec.blur_sigma_pet, mode="nearest")
    if spec.noise_sigma > 0:
        pet = pet + rng.normal(0.0, spec.noise_sigma, size=dims)
    pet = np.clip(pet, 0.0, 1.0)
    sp = tuple(float(s) for s in spec.spacing)
    return Volume(ct, sp), Volume(pet, sp), Volume(labels, sp)


def make_phantom_pair(spec=PhantomSpec()):
    """Generate ``(ct_like, pet_like, labels)`` volumes, deterministic per seed.

    CT: ellipsoids of distinct constant intensity on a smooth linear ramp.
    PET: :func:`pet_remap` of the CT intensities, blurred, plus Gaussian noise,
    clipped to [0, 1]. Labels: blob ``j`` carries label ``j + 1``.
    """
    rng = np.random.default_rng(spec.seed)
    layout = _sample_layout(spec, rng)
    return _render(spec, layout, tuple(int(d) for d in spec.dims), rng)


def make_moving_pet(spec, params, pad=MOVING_PAD):
    """PET-like phantom seen through ``params``, on the phantom grid.

    The value at fixed voxel ``x`` is the PET phantom at ``M(params) x``.
    The PET is rendered on a grid enlarged by ``pad`` of each axis per side
    (same layout, fresh noise) before resampling, so structures entering the
    field of view are present instead of zero-filled. Registering the result
    to the CT-like image therefore recovers ``invert(build_matrix(params))``.
    """
    rng = np.random.default_rng(spec.seed)
    layout = _sample_layout(spec, rng)
    dims = tuple(int(d) for d in spec.dims)
    core = Volume(np.zeros(dims), spec.spacing)
    big_dims = tuple(d + 2 * int(math.ceil(pad * d)) for d in dims)
    _, pet_big, _ = _render(spec, layout, big_dims, rng)
    # express the phantom-grid normalized map in the padded grid's units
    ratio = core.half_extent / pet_big.half_extent
    m = _as_matrix(params).copy()
    m[:3, :] *= ratio
    return warp_matrix(pet_big, core, m, "trilinear")[0]


def random_affine(ranges=TransformRanges(), seed=0, volume=None):
    """Draw parameters uniformly within ``ranges``.

    Translations are scaled to normalized units with the extents of
    ``volume`` (or of a cube when omitted).
    """
    rng = np.random.default_rng(seed)
    if volume is not None:
        axis_extent = volume.extent / volume.extent.max()
    else:
        axis_extent = np.ones(3)
    # a full axis spans 2 normalized units when it is the longest one
    t = rng.uniform(-1.0, 1.0, 3) * ranges.max_trans * 2.0 * axis_extent
    r = rng.uniform(-1.0, 1.0, 3) * ranges.max_rot
    lo, hi = ranges.scale_range
    s = rng.uniform(lo, hi, 3) if hi > lo else np.full(3, lo)
    k = rng.uniform(-1.0, 1.0, 3) * ranges.max_shear
    return AffineParams(tuple(t), tuple(r), tuple(s), tuple(k))


def _label_array(v):
    return np.asarray(v.data if isinstance(v, Volume) else v)


def dice(a, b, label_set=None):
    """Per-label Dice coefficients and their mean.

    Labels absent from both volumes are skipped; by default every nonzero
    label present in either volume is evaluated.
    """
    A, B = _label_array(a), _label_array(b)
    if A.shape != B.shape:
        raise InvalidArgumentError(f"label grids differ: {A.shape} vs {B.shape}")
    if isinstance(a, Volume) and isinstance(b, Volume) and not a.same_grid(b):
        raise InvalidArgumentError("label volumes have different spacing")
    A = np.rint(A).astype(np.int64)
    B = np.rint(B).astype(np.int64)
    if label_set is None:
        label_set = sorted((set(np.unique(A).tolist()) | set(np.unique(B).tolist())) - {0})
    per_label = {}
    for lab in label_set:
        in_a = A == lab
        in_b = B == lab
        total = int(in_a.sum()) + int(in_b.sum())
        if total == 0:
            continue
        per_label[int(lab)] = 2.0 * int(np.logical_and(in_a, in_b).sum()) / total
    mean = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return per_label, mean


def _as_matrix(p):
    return build_matrix(p) if isinstance(p, AffineParams) else np.asarray(p, dtype=float)


def displacement_error(true_p, est_p, fixed):
    """Mean and max distance (mm) between fixed voxel centres mapped by two transforms.

    Either argument may be :class:`AffineParams` or a 4x4 normalized-space matrix.
    """
    diff = _as_matrix(true_p) - _as_matrix(est_p)
    c = fixed.grid_coords().reshape(-1, 3)
    delta = c @ diff[:3, :3].T + diff[:3, 3]
    dist = np.sqrt(np.sum(delta * delta, axis=1)) * fixed.half_extent
    return float(dist.mean()), float(dist.max())
