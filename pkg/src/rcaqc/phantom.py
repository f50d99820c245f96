"""Synthetic multi-structure cohorts with known ground truth.

Each subject is drawn from a :class:`PhantomSpec` by jittering the centre and
radii of a fixed set of parametric shapes and painting per-structure mean
intensities plus Gaussian noise.  :func:`degrade` corrupts a label map in a
controlled way to stand in for segmenters of varying quality.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .metrics import evaluate_all
from .volume import LabelVolume, Volume, save_volume

log = logging.getLogger(__name__)

SHAPE_KINDS = ("ellipsoid", "box", "tube")
DEGRADATION_OPS = (
    "erode",
    "dilate",
    "translate",
    "drop_component",
    "boundary_noise",
    "relabel_patch",
    "delete_structure",
)


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    label: int
    center: tuple
    radii: tuple
    kind: str = "ellipsoid"
    name: str = ""
    # tube axis (0, 1 or 2); radii[axis] is the half length
    axis: int = 2
    center_jitter: float = 2.0
    radius_jitter: float = 0.15
    means: tuple = (0.5, 0.5)
    std: float = 0.02


@dataclass(frozen=True)
class PhantomSpec:
    structures: tuple
    dims: tuple = (48, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    channels: int = 2
    background: tuple = (0.0, 0.0)
    # unlabelled body region painted before the structures
    body: Optional[ShapeSpec] = None
    noise_std: float = 0.04
    bias_amplitude: float = 0.05
    blur_sigma: float = 0.7
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return max(s.label for s in self.structures) + 1

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise PhantomSpecError(f"dims must be 3 integers >= 4, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomSpecError("spacing must be 3 positive reals")
        if self.channels < 1:
            raise PhantomSpecError("channels must be >= 1")
        labels = sorted(s.label for s in self.structures)
        if not labels or labels != list(range(1, len(labels) + 1)):
            raise PhantomSpecError(f"structures must use distinct labels 1..K, got {labels}")
        if len(self.background) != self.channels:
            raise PhantomSpecError("background needs one mean per channel")
        shapes = list(self.structures) + ([self.body] if self.body else [])
        for s in shapes:
            if s.kind not in SHAPE_KINDS:
                raise PhantomSpecError(f"unknown shape kind {s.kind!r}")
            if len(s.center) != 3 or len(s.radii) != 3 or min(s.radii) <= 0:
                raise PhantomSpecError(f"shape {s.label}: centre/radii must be 3-vectors, radii > 0")
            if len(s.means) != self.channels:
                raise PhantomSpecError(f"shape {s.label}: needs one mean per channel")
            if s.center_jitter < 0 or not 0 <= s.radius_jitter < 1:
                raise PhantomSpecError(f"shape {s.label}: invalid jitter")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        try:
            doc = dict(doc)
            doc["structures"] = tuple(_shape_from_dict(s) for s in doc["structures"])
            if doc.get("body") is not None:
                doc["body"] = _shape_from_dict(doc["body"])
            for key in ("dims", "spacing", "background"):
                if key in doc:
                    doc[key] = tuple(doc[key])
            spec = cls(**doc)
        except (KeyError, TypeError) as exc:
            raise PhantomSpecError(f"invalid phantom spec: {exc}") from exc
        spec.validate()
        return spec


def _shape_from_dict(doc: dict) -> ShapeSpec:
    doc = dict(doc)
    for key in ("center", "radii", "means"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return ShapeSpec(**doc)


def default_spec(seed: int = 0) -> PhantomSpec:
    """Four structures: one large, two medium look-alikes, one small."""
    return PhantomSpec(
        structures=(
            ShapeSpec(1, (17.0, 24.0, 24.0), (8.5, 11.0, 9.0), name="large", means=(0.85, 0.35)),
            ShapeSpec(2, (33.0, 15.0, 22.0), (5.0, 4.0, 6.0), name="medium_left", means=(0.55, 0.9)),
            ShapeSpec(3, (33.0, 33.0, 22.0), (5.0, 4.0, 6.0), name="medium_right", means=(0.55, 0.9)),
            ShapeSpec(4, (33.0, 24.0, 34.0), (2.5, 2.5, 2.5), name="small", means=(0.3, 0.65), center_jitter=1.5),
        ),
        body=ShapeSpec(0, (24.0, 24.0, 24.0), (20.0, 20.0, 19.0), name="body", means=(0.2, 0.2),
                       center_jitter=1.0, radius_jitter=0.05, std=0.0),
        background=(0.0, 0.0),
        seed=seed,
    )


BUILTIN_SPECS = {"default20": default_spec}


def _shape_mask(shape: ShapeSpec, center, radii, dims, spacing) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    rel = [(grid[a] - center[a]) for a in range(3)]
    if shape.kind == "ellipsoid":
        return sum((rel[a] / radii[a]) ** 2 for a in range(3)) <= 1.0
    if shape.kind == "box":
        return np.all([np.abs(rel[a]) <= radii[a] for a in range(3)], axis=0)
    ax = shape.axis
    others = [a for a in range(3) if a != ax]
    radial = sum((rel[a] / radii[a]) ** 2 for a in others) <= 1.0
    return radial & (np.abs(rel[ax]) <= radii[ax])


def _jittered(shape: ShapeSpec, rng: np.random.Generator, dims) -> tuple:
    center = np.asarray(shape.center, dtype=np.float64) + rng.uniform(-shape.center_jitter, shape.center_jitter, 3)
    radii = np.asarray(shape.radii, dtype=np.float64) * rng.uniform(1 - shape.radius_jitter, 1 + shape.radius_jitter, 3)
    lo = center - radii
    hi = center + radii
    if np.any(lo < 0) or np.any(hi > np.asarray(dims) - 1):
        raise PhantomSpecError(
            f"shape {shape.label or shape.name} out of bounds after jitter: extent {lo.round(2)}..{hi.round(2)}"
        )
    return center, radii


def generate_subject(spec: PhantomSpec, subject_index: int) -> tuple:
    """Return ``(image, labels)`` for one subject; deterministic in ``(spec.seed, subject_index)``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, subject_index])
    dims = tuple(spec.dims)
    labels = np.zeros(dims, dtype=np.uint8)
    means = np.empty(dims + (spec.channels,), dtype=np.float64)
    means[...] = spec.background

    if spec.body is not None:
        c, r = _jittered(spec.body, rng, dims)
        body = _shape_mask(spec.body, c, r, dims, spec.spacing)
        means[body] = spec.body.means
    for shape in sorted(spec.structures, key=lambda s: s.label):
        c, r = _jittered(shape, rng, dims)
        mask = _shape_mask(shape, c, r, dims, spec.spacing)
        labels[mask] = shape.label
        means[mask] = shape.means
    for shape in spec.structures:
        if not np.any(labels == shape.label):
            raise PhantomSpecError(f"structure {shape.label} vanished (overlapping shapes?)")

    texture = np.zeros(dims, dtype=np.float64)
    for shape in spec.structures:
        if shape.std > 0:
            m = labels == shape.label
            texture[m] = rng.normal(0.0, shape.std, int(m.sum()))
    img = means + texture[..., None]
    if spec.blur_sigma > 0:
        for c in range(spec.channels):
            img[..., c] = ndimage.gaussian_filter(img[..., c], spec.blur_sigma, mode="nearest")
    if spec.bias_amplitude > 0:
        grid = np.indices(dims, dtype=np.float64) / (np.asarray(dims, dtype=np.float64)[:, None, None, None] - 1)
        coef = rng.uniform(-1, 1, 3)
        bias = 1.0 + spec.bias_amplitude * np.tensordot(coef, grid - 0.5, axes=1)
        img *= bias[..., None]
    img += rng.normal(0.0, spec.noise_std, img.shape)
    return (
        Volume(img.astype(np.float32), spec.spacing),
        LabelVolume(labels, spec.spacing, spec.num_classes),
    )


# ---------------------------------------------------------------------------
# degradations


@dataclass(frozen=True)
class DegradationOp:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in DEGRADATION_OPS:
            raise ValueError(f"unknown degradation {self.name!r}")


@dataclass(frozen=True)
class DegradationRecipe:
    """Ordered label corruptions; ``severity`` in [0, 1] scales every parameter.

    Parameters (before scaling):

    * ``erode`` / ``dilate``: ``radius`` in voxels
    * ``translate``: ``magnitude`` in voxels, random direction per structure
    * ``drop_component``: ``p``, probability of dropping each connected component
    * ``boundary_noise``: ``p``, probability of flipping each boundary voxel
    * ``relabel_patch``: ``p`` per structure, ``size`` cube side in voxels
    * ``delete_structure``: ``label`` (applied whenever severity > 0)
    """

    ops: tuple
    severity: float = 1.0
    seed: int = 0
    id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        ops = tuple(op if isinstance(op, DegradationOp) else DegradationOp(op["name"], dict(op.get("params", {})))
                    for op in self.ops)
        object.__setattr__(self, "ops", ops)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "severity": self.severity,
            "seed": self.seed,
            "ops": [{"name": op.name, "params": op.params} for op in self.ops],
        }


def _structures(labels: np.ndarray) -> list:
    return [int(v) for v in np.unique(labels) if v != 0]


def _erode(lab, s, rng, radius=1.0):
    r = radius * s
    out = lab.copy()
    for c in _structures(lab):
        m = lab == c
        inner = ndimage.distance_transform_edt(m)
        out[m & (inner <= r)] = 0
    return out


def _dilate(lab, s, rng, radius=1.0):
    r = radius * s
    out = lab.copy()
    for c in _structures(lab):
        dist = ndimage.distance_transform_edt(lab != c)
        out[(dist <= r) & (out == 0)] = c
    return out


def _translate(lab, s, rng, magnitude=3.0):
    out = np.zeros_like(lab)
    for c in _structures(lab):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shift = np.rint(direction * magnitude * s * rng.uniform(0.5, 1.5)).astype(int)
        moved = ndimage.shift((lab == c).astype(np.uint8), shift, order=0, mode="constant", cval=0).astype(bool)
        out[moved & (out == 0)] = c
    return out


def _drop_component(lab, s, rng, p=0.2):
    out = lab.copy()
    for c in _structures(lab):
        comps, n = ndimage.label(lab == c)
        drop = np.flatnonzero(rng.random(n) < p * s) + 1
        out[np.isin(comps, drop)] = 0
    return out


def _boundary_noise(lab, s, rng, p=0.3):
    fg = lab > 0
    grown = ndimage.grey_dilation(lab, size=(3, 3, 3))
    inner = fg & ~ndimage.binary_erosion(fg, border_value=1)
    outer = ~fg & ndimage.binary_dilation(fg)
    flip = rng.random(lab.shape) < p * s
    out = lab.copy()
    out[inner & flip] = 0
    out[outer & flip] = grown[outer & flip]
    return out


def _relabel_patch(lab, s, rng, p=0.3, size=6):
    out = lab.copy()
    present = _structures(lab)
    if len(present) < 2:
        return out
    half = max(1, int(size)) // 2
    for c in present:
        if rng.random() >= p * s:
            continue
        where = np.argwhere(lab == c)
        centre = where[rng.integers(len(where))]
        target = int(rng.choice([o for o in present if o != c]))
        box = tuple(slice(max(0, v - half), v + half + 1) for v in centre)
        region = out[box]
        region[lab[box] == c] = target
    return out


def _delete_structure(lab, s, rng, label=1):
    out = lab.copy()
    if s > 0:
        out[out == label] = 0
    return out


_OPS = {
    "erode": _erode,
    "dilate": _dilate,
    "translate": _translate,
    "drop_component": _drop_component,
    "boundary_noise": _boundary_noise,
    "relabel_patch": _relabel_patch,
    "delete_structure": _delete_structure,
}


def degrade(labels: LabelVolume, recipe: DegradationRecipe, subject_index: int = 0) -> LabelVolume:
    if recipe.severity == 0:
        return labels
    rng = np.random.default_rng([recipe.seed, subject_index])
    lab = np.array(labels.labels)
    for op in recipe.ops:
        lab = _OPS[op.name](lab, recipe.severity, rng, **op.params)
    return labels.with_labels(lab)


DEFAULT_SEVERITIES = (0.1, 0.3, 0.5, 0.7, 1.0)


def default_recipes(seed: int = 0, small_label: int = 4) -> list:
    """Five increasingly severe recipes; the most severe one deletes the small structure."""
    base = [
        DegradationOp("boundary_noise", {"p": 0.3}),
        DegradationOp("translate", {"magnitude": 5.0}),
        DegradationOp("erode", {"radius": 1.5}),
        DegradationOp("relabel_patch", {"p": 0.3, "size": 6}),
    ]
    recipes = []
    for k, sev in enumerate(DEFAULT_SEVERITIES):
        ops = list(base)
        if sev >= 1.0:
            ops.append(DegradationOp("delete_structure", {"label": small_label}))
        recipes.append(DegradationRecipe(tuple(ops), sev, seed + 1000 * (k + 1), id=f"sev{int(round(sev * 100)):03d}"))
    return recipes


# ---------------------------------------------------------------------------
# cohorts


def subject_id(index: int) -> str:
    return f"s{index:03d}"


def generate_cohort(spec: PhantomSpec, n_subjects: int, recipes: Sequence[DegradationRecipe], out_dir) -> dict:
    """Write a cohort to ``out_dir`` and return its manifest (also saved as ``manifest.json``)."""
    if n_subjects < 2:
        raise ValueError("a cohort needs at least 2 subjects")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels_of_interest = range(1, spec.num_classes)
    subjects = []
    for i in range(n_subjects):
        sid = subject_id(i)
        image, gt = generate_subject(spec, i)
        save_volume(image, out / f"{sid}_image.volj")
        save_volume(gt, out / f"{sid}_gt.volj")
        cases = []
        for recipe in recipes:
            seg = degrade(gt, recipe, i)
            seg_name = f"{sid}_{recipe.id}_seg.volj"
            save_volume(seg, out / seg_name)
            report = evaluate_all(seg, gt, labels_of_interest, case_id=f"{sid}/{recipe.id}")
            cases.append(
                {
                    "recipe_id": recipe.id,
                    "severity": recipe.severity,
                    "seg_path": seg_name,
                    "real_metrics": {str(k): asdict(v) for k, v in sorted(report.rows.items())},
                }
            )
        subjects.append({"id": sid, "index": i, "gt_image": f"{sid}_image.volj", "gt_labels": f"{sid}_gt.volj", "cases": cases})
        log.info("generated subject %s", sid)
    manifest = {
        "spec": spec.to_dict(),
        "recipes": [r.to_dict() for r in recipes],
        "num_classes": spec.num_classes,
        "subjects": subjects,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
