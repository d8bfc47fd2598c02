"""Voxel-wise (A, T1, T2) estimation from a stack of saturation-recovery/T2-prep images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, ValidationError
from .physics import Image, Msasha, SpinMap, forward_image


def default_protocol(mode: str = "physical") -> list[Msasha]:
    """Eight (TS, TD, TE) tuples spanning TS in {300, 600, inf}, TD in {0, 30, 50}, TE in {0, 25, 50} ms."""
    inf = math.inf
    tuples = [
        (300.0, 0.0, 0.0),
        (600.0, 0.0, 0.0),
        (inf, 0.0, 0.0),
        (inf, 0.0, 25.0),
        (inf, 0.0, 50.0),
        (300.0, 30.0, 25.0),
        (600.0, 50.0, 50.0),
        (inf, 30.0, 25.0),
    ]
    return [Msasha(ts, td, te, mode) for ts, td, te in tuples]


@dataclass
class MsashaStack:
    images: list

    def __post_init__(self):
        self.images = list(self.images)
        if len(self.images) < 4:
            raise ValidationError(f"need at least 4 acquisitions for 3 unknowns, got {len(self.images)}")
        shape = self.images[0].shape
        for im in self.images:
            if not isinstance(im.params, Msasha):
                raise ValidationError(f"stack image has {im.params.kind} params, expected msasha")
            if im.shape != shape:
                raise DimensionMismatchError(f"stack images differ in shape: {im.shape} vs {shape}")
        modes = {im.params.saturation_exponent_mode for im in self.images}
        if len(modes) != 1:
            raise ValidationError(f"mixed saturation_exponent_mode in stack: {sorted(modes)}")
        tuples = [(p.ts, p.td, p.te) for p in self.params]
        if len(set(tuples)) == 1:
            raise ValidationError("all stack acquisitions share one (TS, TD, TE) tuple")
        if len({(p.ts, p.td) for p in self.params}) < 2:
            raise ValidationError("stack needs T1 encoding: vary TS or TD across acquisitions")
        if len({p.te for p in self.params}) < 2:
            raise ValidationError("stack needs T2 encoding: vary TE across acquisitions")

    @property
    def params(self) -> list[Msasha]:
        return [im.params for im in self.images]

    @property
    def shape(self):
        return self.images[0].shape

    def data(self) -> np.ndarray:
        """``(H, W, K)`` measurement array."""
        return np.stack([im.data for im in self.images], axis=-1)


@dataclass(frozen=True)
class FitConfig:
    t1_bounds: tuple = (50.0, 3000.0)
    t2_bounds: tuple = (5.0, 500.0)
    a_max_factor: float = 10.0
    starts: tuple = ((300.0, 30.0), (300.0, 200.0), (1500.0, 30.0), (1500.0, 200.0))
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        lo1, hi1 = self.t1_bounds
        lo2, hi2 = self.t2_bounds
        if not (0 < lo1 < hi1 and 0 < lo2 < hi2):
            raise ValidationError("fit bounds must satisfy 0 < lo < hi")
        if self.a_max_factor <= 0 or self.max_iter < 1 or self.tol <= 0:
            raise ValidationError("a_max_factor, tol and max_iter must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        for key in ("t1_bounds", "t2_bounds"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if "starts" in d:
            d["starts"] = tuple(tuple(float(v) for v in s) for s in d["starts"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad fit config: {exc}") from exc

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FitResult:
    spinmap: SpinMap
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    start_residuals: np.ndarray = field(repr=False, default=None)


def fit_msasha(stack: MsashaStack, config: FitConfig | None = None, labels=None) -> FitResult:
    """Least-squares (A, T1, T2) per voxel; the fitted A is reported as PD."""
    config = config or FitConfig()
    y = stack.data()
    h, w, k = y.shape
    params = stack.params
    ts = np.array([p.ts for p in params])
    td = np.array([p.td for p in params])
    te = np.array([p.te for p in params])
    lower = np.array([0.0, config.t1_bounds[0], config.t2_bounds[0]])
    upper = np.array([np.inf, config.t1_bounds[1], config.t2_bounds[1]])
    p, cost, iters, conv, start_cost = kernels.lm_msasha(
        y.reshape(-1, k), ts, td, te, params[0].verbatim, np.array(config.starts),
        lower, upper, config.a_max_factor, config.tol, config.max_iter,
    )
    p = p.reshape(h, w, 3)
    if labels is None and stack.images[0].labels is not None:
        labels = stack.images[0].labels
    return FitResult(
        SpinMap.from_stack(p, labels),
        cost.reshape(h, w),
        iters.reshape(h, w),
        conv.reshape(h, w),
        start_cost.reshape(h, w, -1),
    )


def simulate_stack(z: SpinMap, protocol: list | None = None, noise_sigma: float = 0.0,
                   seed: int = 0) -> MsashaStack:
    """Forward-simulate one image per protocol entry (PD plays the role of A)."""
    protocol = protocol or default_protocol()
    images = [forward_image(z, p, noise_sigma, seed + i) for i, p in enumerate(protocol)]
    return MsashaStack(images)
