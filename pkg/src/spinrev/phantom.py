"""Parametric short-axis cardiac phantoms with known spin properties."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .physics import BACKGROUND_RELAXATION, SpinMap
from .rng import stream


class Tissue(enum.IntEnum):
    background = 0
    blood = 1
    myocardium = 2
    fat = 3


@dataclass(frozen=True)
class TissueClass:
    name: Tissue
    pd: float
    t1: float
    t2: float

    def __post_init__(self):
        object.__setattr__(self, "name", Tissue[self.name] if isinstance(self.name, str) else Tissue(self.name))
        if self.name is Tissue.background:
            if self.pd < 0:
                raise ValidationError("background pd must be >= 0")
            return
        if not (self.t1 > 0 and self.t2 > 0 and self.pd >= 0):
            raise ValidationError(f"{self.name.name}: need t1 > 0, t2 > 0, pd >= 0")
        if self.t2 > self.t1:
            raise ValidationError(f"{self.name.name}: t2 ({self.t2}) exceeds t1 ({self.t1})")


# Representative 1.5T values; only their ordering is load-bearing in tests.
DEFAULT_CLASSES = (
    TissueClass(Tissue.background, 0.0, BACKGROUND_RELAXATION, BACKGROUND_RELAXATION),
    TissueClass(Tissue.blood, 0.9, 1550.0, 240.0),
    TissueClass(Tissue.myocardium, 0.7, 950.0, 50.0),
    TissueClass(Tissue.fat, 1.0, 260.0, 80.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    seed: int = 0
    classes: tuple = DEFAULT_CLASSES
    noise_level: float = 0.0
    smoothness: float = 0.0

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError("phantom width/height must be integers")
        if self.width < 16 or self.height < 16:
            raise ValidationError(f"phantom must be at least 16x16, got {self.width}x{self.height}")
        if not (0.0 <= self.noise_level <= 0.5):
            raise ValidationError(f"noise_level must lie in [0, 0.5], got {self.noise_level}")
        if self.smoothness < 0:
            raise ValidationError(f"smoothness must be >= 0, got {self.smoothness}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValidationError("class table has duplicate tissue names")

    def table(self) -> dict:
        return {c.name: c for c in self.classes}

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "noise_level": self.noise_level,
            "smoothness": self.smoothness,
            "classes": [
                {"name": c.name.name, "pd": c.pd, "t1": c.t1, "t2": c.t2} for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(TissueClass(**c) for c in d["classes"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad phantom spec: {exc}") from exc


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def phantom_labels(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Label raster: LV pool, myocardial annulus, RV crescent, fat rim, background."""
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    r = 0.5 * min(width, height)
    cy = 0.5 * (height - 1) + rng.uniform(-0.05, 0.05) * r
    cx = 0.5 * (width - 1) + rng.uniform(-0.05, 0.05) * r + 0.1 * r
    theta = rng.uniform(-0.3, 0.3)
    ry_lv = r * rng.uniform(0.20, 0.26)
    rx_lv = ry_lv * rng.uniform(0.85, 1.15)
    wall = max(1.6, r * rng.uniform(0.08, 0.11))
    fat = max(1.6, r * 0.045)

    lv = _ellipse(yy, xx, cy, cx, ry_lv, rx_lv, theta)
    myo_outer = _ellipse(yy, xx, cy, cx, ry_lv + wall, rx_lv + wall, theta)
    rv_cx = cx - (rx_lv + wall) * rng.uniform(0.75, 0.95)
    rv = _ellipse(yy, xx, cy, rv_cx, (ry_lv + wall) * 1.25, (rx_lv + wall) * 1.05, theta) & ~myo_outer

    heart = myo_outer | rv
    dist = ndimage.distance_transform_edt(~heart)
    rim = (dist > 0.5) & (dist <= fat + 0.5)

    labels = np.zeros((height, width), dtype=np.int64)
    labels[rim] = Tissue.fat
    labels[rv] = Tissue.blood
    labels[myo_outer] = Tissue.myocardium
    labels[lv] = Tissue.blood
    return labels


def _jitter_field(shape, level, smoothness, rng):
    n = rng.standard_normal(shape)
    if smoothness > 0:
        n = ndimage.gaussian_filter(n, smoothness, mode="reflect")
        sd = n.std()
        if sd > 0:
            n = n / sd
    return np.exp(level * n - 0.5 * level * level)


def generate_phantom(spec: PhantomSpec) -> SpinMap:
    """Deterministic phantom spin map for ``spec`` (labels included)."""
    geom = stream(spec.seed, "phantom.geometry")
    jit = stream(spec.seed, "phantom.jitter")
    labels = phantom_labels(spec.width, spec.height, geom)
    table = spec.table()
    shape = labels.shape
    pd = np.zeros(shape)
    t1 = np.full(shape, BACKGROUND_RELAXATION)
    t2 = np.full(shape, BACKGROUND_RELAXATION)
    for tissue in Tissue:
        mask = labels == tissue
        if not mask.any():
            continue
        if tissue not in table:
            raise ValidationError(f"class table lacks {tissue.name}")
        cls = table[tissue]
        pd[mask], t1[mask], t2[mask] = cls.pd, cls.t1, cls.t2
    if spec.noise_level > 0:
        tissue = labels != Tissue.background
        # drawn for every voxel so the field does not depend on the geometry
        fields = [_jitter_field(shape, spec.noise_level, spec.smoothness, jit) for _ in range(3)]
        for arr, fld in zip((pd, t1, t2), fields):
            arr[tissue] *= fld[tissue]
    return SpinMap(pd, t1, t2, labels)
