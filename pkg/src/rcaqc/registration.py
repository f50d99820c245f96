"""Multi-resolution demons registration and single-atlas label propagation.

Fields are backward maps in millimetres: the warped moving image at fixed
voxel ``v`` is the moving image sampled at physical position
``v * spacing + field[v]``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume, validate_pair

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class RegistrationParams:
    levels: int = 3
    iterations_per_level: int = 30
    update_smoothing_sigma: float = 1.0
    field_smoothing_sigma: float = 0.75
    step_cap: float = 2.0
    convergence_tol: float = 1e-4
    # Gaussian pre-smoothing of both images before matching, mm; 0 disables
    image_smoothing_sigma: float = 1.0
    multichannel: bool = False
    com_prealign: bool = False

    def __post_init__(self):
        for name in (
            "levels",
            "iterations_per_level",
            "update_smoothing_sigma",
            "field_smoothing_sigma",
            "step_cap",
            "convergence_tol",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.image_smoothing_sigma < 0:
            raise ValueError("image_smoothing_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacements in mm, shape ``(nx, ny, nz, 3)``."""

    displacement: np.ndarray
    spacing: tuple

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.displacement.shape[:3])

    def max_norm(self) -> float:
        return float(np.sqrt((self.displacement.astype(np.float64) ** 2).sum(-1)).max())

    def to_volume(self) -> Volume:
        return Volume(self.displacement.astype(np.float32), self.spacing)

    @classmethod
    def from_volume(cls, vol: Volume) -> "DeformationField":
        if vol.channels != 3:
            raise ValueError("a deformation field volume needs 3 channels")
        return cls(np.array(vol.data, dtype=np.float64), vol.spacing)


class RegistrationError(ValueError):
    pass


def _sample_positions(shape, spacing, disp):
    """Index-space sample coordinates ``v + disp / spacing`` for a grid."""
    grid = np.indices(shape, dtype=np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    return grid + np.moveaxis(disp, -1, 0) / sp[:, None, None, None]


def warp_image(img: np.ndarray, disp: np.ndarray, spacing) -> np.ndarray:
    """Trilinear backward warp of one 3-D channel."""
    coords = _sample_positions(img.shape, spacing, disp)
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _ssd(fixed: np.ndarray, warped: np.ndarray) -> float:
    diff = fixed - warped
    return float(np.sum(diff * diff))


def _smooth_field(disp: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    sigma = [sigma_mm / s for s in spacing]
    out = np.empty_like(disp)
    for k in range(disp.shape[-1]):
        out[..., k] = ndimage.gaussian_filter(disp[..., k], sigma, mode="nearest")
    return out


def _downsample(img: np.ndarray) -> np.ndarray:
    """Halve resolution: smooth with sigma of one fine voxel, keep even voxels."""
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2, ::2]


def _upsample_field(disp: np.ndarray, shape) -> np.ndarray:
    coords = np.indices(shape, dtype=np.float64) / 2.0
    out = np.empty(tuple(shape) + (3,), dtype=disp.dtype)
    for k in range(3):
        out[..., k] = ndimage.map_coordinates(disp[..., k], coords, order=1, mode="nearest")
    return out


def _similarity_channels(vol: Volume, multichannel: bool) -> list:
    chans = range(vol.channels) if multichannel else [0]
    return [np.asarray(vol.data[..., c], dtype=np.float32) for c in chans]


def _center_of_mass(img: np.ndarray, spacing) -> np.ndarray:
    w = img - img.min()
    if w.sum() <= 0:
        return np.zeros(3)
    return np.asarray(ndimage.center_of_mass(w)) * np.asarray(spacing)


def _total_ssd(fixed_chans, moving_chans, disp, spacing) -> float:
    return sum(_ssd(f, warp_image(m, disp, spacing)) for f, m in zip(fixed_chans, moving_chans))


def _demons_level(fixed_chans, moving_chans, disp, spacing, params: RegistrationParams):
    """Run demons iterations on one pyramid level, returning the lowest-SSD field."""
    sp = np.asarray(spacing, dtype=np.float64)
    warped = [warp_image(m, disp, spacing) for m in moving_chans]
    ssd = sum(_ssd(f, w) for f, w in zip(fixed_chans, warped))
    best_disp, best_ssd = disp, ssd
    trail = [ssd]
    for it in range(params.iterations_per_level):
        update = np.zeros_like(disp)
        for f, w in zip(fixed_chans, warped):
            diff = f - w
            grad = np.stack(np.gradient(w, *sp), axis=-1)
            denom = (grad * grad).sum(-1) + diff * diff
            scale = np.divide(diff, denom, out=np.zeros_like(diff), where=denom >= 1e-12)
            update += grad * scale[..., None]
        update = _smooth_field(update, params.update_smoothing_sigma, spacing)
        norm = np.sqrt((update * update).sum(-1))
        over = norm > params.step_cap
        if np.any(over):
            update[over] *= (params.step_cap / norm[over])[:, None]
        disp = _smooth_field(disp + update, params.field_smoothing_sigma, spacing)
        warped = [warp_image(m, disp, spacing) for m in moving_chans]
        ssd = sum(_ssd(f, w) for f, w in zip(fixed_chans, warped))
        if ssd < best_ssd:
            best_disp, best_ssd = disp, ssd
        trail.append(best_ssd)
        # demons oscillates, so convergence is judged on the best SSD over a window
        if len(trail) > CONVERGENCE_WINDOW:
            old = trail[-1 - CONVERGENCE_WINDOW]
            if (old - best_ssd) <= params.convergence_tol * max(old, 1e-300):
                log.debug("converged after %d iterations (ssd %.6g)", it + 1, best_ssd)
                break
    return best_disp, best_ssd


def register(moving: Volume, fixed: Volume, params: RegistrationParams = RegistrationParams()) -> DeformationField:
    """Estimate a field that warps ``moving`` onto ``fixed``."""
    validate_pair(moving, fixed)
    if moving.channels != fixed.channels:
        raise RegistrationError(
            f"channel count mismatch: {moving.channels} vs {fixed.channels}"
        )
    fixed_chans = _similarity_channels(fixed, params.multichannel)
    moving_chans = _similarity_channels(moving, params.multichannel)
    for ch in fixed_chans + moving_chans:
        if not np.all(np.isfinite(ch)):
            raise RegistrationError("non-finite intensities")
    spacing = tuple(fixed.spacing)
    if params.image_smoothing_sigma > 0:
        sigma = [params.image_smoothing_sigma / s for s in spacing]
        fixed_chans = [ndimage.gaussian_filter(c, sigma, mode="nearest") for c in fixed_chans]
        moving_chans = [ndimage.gaussian_filter(c, sigma, mode="nearest") for c in moving_chans]
    shape = fixed.dims

    disp = np.zeros(shape + (3,), dtype=np.float32)
    if params.com_prealign:
        shift = _center_of_mass(moving_chans[0], spacing) - _center_of_mass(fixed_chans[0], spacing)
        disp[...] = shift

    # pyramid[0] is full resolution
    pyramid = [(fixed_chans, moving_chans, spacing)]
    for _ in range(params.levels - 1):
        f, m, s = pyramid[-1]
        if min(f[0].shape) < 8:
            break
        pyramid.append(([_downsample(a) for a in f], [_downsample(a) for a in m], tuple(2 * v for v in s)))

    full_ssd = _total_ssd(fixed_chans, moving_chans, disp, spacing)
    accepted = disp
    coarsest = len(pyramid) - 1
    level_disp = _restrict(disp, coarsest)
    for lvl in range(coarsest, -1, -1):
        f, m, s = pyramid[lvl]
        level_disp, _ = _demons_level(f, m, level_disp, s, params)
        candidate = level_disp
        for finer in range(lvl - 1, -1, -1):
            candidate = _upsample_field(candidate, pyramid[finer][0][0].shape)
        cand_ssd = _total_ssd(fixed_chans, moving_chans, candidate, spacing)
        # a level is kept only if it does not worsen full-resolution SSD
        if cand_ssd <= full_ssd:
            accepted, full_ssd = candidate, cand_ssd
        log.debug("level %d: full-res ssd %.6g", lvl, full_ssd)
        if lvl > 0:
            level_disp = _restrict(accepted, lvl - 1)
    return DeformationField(accepted, spacing)


def _restrict(disp: np.ndarray, level: int) -> np.ndarray:
    step = 2**level
    return np.ascontiguousarray(disp[::step, ::step, ::step])


def warp_labels(labels: LabelVolume, field: DeformationField) -> LabelVolume:
    """Nearest-neighbour backward warp; samples outside the grid become background."""
    if tuple(labels.dims) != tuple(field.dims):
        raise ValueError(f"label grid {labels.dims} does not match field grid {field.dims}")
    pos = _sample_positions(labels.dims, labels.spacing, field.displacement)
    idx = np.floor(pos + 0.5).astype(np.int64)
    inside = np.ones(labels.dims, dtype=bool)
    for axis, n in enumerate(labels.dims):
        inside &= (idx[axis] >= 0) & (idx[axis] < n)
    out = np.zeros(labels.dims, dtype=np.uint8)
    src = labels.labels
    out[inside] = src[idx[0][inside], idx[1][inside], idx[2][inside]]
    return LabelVolume(out, labels.spacing, labels.num_classes)


def propagate_single_atlas(
    atlas_image: Volume,
    atlas_labels: LabelVolume,
    target: Volume,
    params: RegistrationParams = RegistrationParams(),
    field: Optional[DeformationField] = None,
) -> LabelVolume:
    """Segment ``target`` by registering the atlas onto it and warping its labels.

    A precomputed ``field`` (atlas -> target) may be supplied to skip registration.
    """
    validate_pair(atlas_image, atlas_labels)
    if field is None:
        field = register(atlas_image, target, params)
    return warp_labels(atlas_labels, field)
