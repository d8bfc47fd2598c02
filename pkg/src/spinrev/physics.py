"""MR signal equations, their analytic gradients, and the L2 data-fidelity term.

All relaxation and timing values are in milliseconds; flip angles are in
radians. Spin maps hold proton density (arbitrary units), T1 and T2 rasters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import ClassVar, Union

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, SingularInputError, ValidationError

CHANNELS = ("pd", "t1", "t2")
UNITS = ("a.u.", "ms", "ms")

# t1/t2 stored in background voxels (pd == 0)
BACKGROUND_RELAXATION = 1.0


def _check_flip(flip_angle: float) -> None:
    if not (0.0 < flip_angle < math.pi):
        raise ValidationError(f"flip angle must lie in (0, pi) rad, got {flip_angle!r}")


def _check_times(**times: float) -> None:
    for name, value in times.items():
        if not value >= 0.0:
            raise ValidationError(f"{name} must be >= 0 ms, got {value!r}")


def _encode_float(v: float):
    return "inf" if math.isinf(v) else v


def _decode_float(v) -> float:
    return math.inf if v in ("inf", "Infinity") else float(v)


@dataclass(frozen=True)
class Bssfp:
    flip_angle: float
    kind: ClassVar[str] = "bssfp"
    code: ClassVar[int] = kernels.BSSFP

    def __post_init__(self):
        _check_flip(self.flip_angle)

    def kernel_params(self) -> np.ndarray:
        return np.array([self.flip_angle])


@dataclass(frozen=True)
class Molli:
    flip_angle: float
    t_inv: float
    kind: ClassVar[str] = "molli"
    code: ClassVar[int] = kernels.MOLLI

    def __post_init__(self):
        _check_flip(self.flip_angle)
        _check_times(t_inv=self.t_inv)

    def kernel_params(self) -> np.ndarray:
        return np.array([self.flip_angle, self.t_inv])


@dataclass(frozen=True)
class Gre:
    flip_angle: float
    tr: float
    te: float
    kind: ClassVar[str] = "gre"
    code: ClassVar[int] = kernels.GRE

    def __post_init__(self):
        _check_flip(self.flip_angle)
        _check_times(tr=self.tr, te=self.te)
        if self.te > self.tr:
            raise ValidationError(f"GRE echo time {self.te} ms exceeds TR {self.tr} ms")

    def kernel_params(self) -> np.ndarray:
        return np.array([self.flip_angle, self.tr, self.te])


@dataclass(frozen=True)
class Msasha:
    """Saturation recovery + T2-prep readout.

    ``saturation_exponent_mode="paper_verbatim"`` evaluates the recovery term
    as ``exp(-TS/TE)``; ``"physical"`` (default) uses ``exp(-TS/T1)``.
    ``ts`` may be ``math.inf`` (no saturation pulse).
    """

    ts: float
    td: float
    te: float
    saturation_exponent_mode: str = "physical"
    kind: ClassVar[str] = "msasha"
    code: ClassVar[int] = kernels.MSASHA

    def __post_init__(self):
        _check_times(ts=self.ts, td=self.td, te=self.te)
        if self.saturation_exponent_mode not in ("physical", "paper_verbatim"):
            raise ValidationError(
                f"unknown saturation_exponent_mode {self.saturation_exponent_mode!r}"
            )

    @property
    def verbatim(self) -> bool:
        return self.saturation_exponent_mode == "paper_verbatim"

    def kernel_params(self) -> np.ndarray:
        return np.array([self.ts, self.td, self.te, 1.0 if self.verbatim else 0.0])


@dataclass(frozen=True)
class LinearTest:
    """Affine operator ``w . (pd, t1, t2) + offset``; used for posterior oracles."""

    weights: tuple = (1.0, 0.0, 0.0)
    offset: float = 0.0
    kind: ClassVar[str] = "linear"
    code: ClassVar[int] = kernels.LINEAR

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != 3 or not all(math.isfinite(v) for v in w):
            raise ValidationError(f"LinearTest needs 3 finite weights, got {self.weights!r}")
        object.__setattr__(self, "weights", w)

    def kernel_params(self) -> np.ndarray:
        return np.array([*self.weights, self.offset])


SequenceParams = Union[Bssfp, Molli, Gre, Msasha, LinearTest]
_KINDS = {cls.kind: cls for cls in (Bssfp, Molli, Gre, Msasha, LinearTest)}


def params_to_dict(p: SequenceParams) -> dict:
    out = {"kind": p.kind}
    if isinstance(p, LinearTest):
        out.update(weights=list(p.weights), offset=p.offset)
        return out
    for f in fields(p):
        v = getattr(p, f.name)
        out[f.name] = _encode_float(v) if isinstance(v, float) else v
    return out


def params_from_dict(d: dict, degrees: bool = False) -> SequenceParams:
    """Parse a sequence description; ``degrees=True`` reads ``flip_angle`` in degrees.

    A ``flip_angle_deg`` key is always read as degrees.
    """
    d = dict(d)
    try:
        cls = _KINDS[d.pop("kind")]
    except KeyError as exc:
        raise ValidationError(f"sequence needs a 'kind' in {sorted(_KINDS)}") from exc
    if "flip_angle_deg" in d:
        d["flip_angle"] = math.radians(float(d.pop("flip_angle_deg")))
    elif degrees and "flip_angle" in d:
        d["flip_angle"] = math.radians(float(d["flip_angle"]))
    if cls is LinearTest:
        return LinearTest(tuple(d.get("weights", (1.0, 0.0, 0.0))), float(d.get("offset", 0.0)))
    try:
        kwargs = {k: (v if isinstance(v, str) and k.endswith("mode") else _decode_float(v))
                  for k, v in d.items()}
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad fields for {cls.kind}: {exc}") from exc


@dataclass
class SpinMap:
    pd: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.pd = np.asarray(self.pd, dtype=np.float64)
        self.t1 = np.asarray(self.t1, dtype=np.float64)
        self.t2 = np.asarray(self.t2, dtype=np.float64)
        if not (self.pd.shape == self.t1.shape == self.t2.shape) or self.pd.ndim != 2:
            raise DimensionMismatchError(
                f"pd/t1/t2 rasters must share one 2D shape, got "
                f"{self.pd.shape}, {self.t1.shape}, {self.t2.shape}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.pd.shape:
                raise DimensionMismatchError(
                    f"labels shape {self.labels.shape} != property shape {self.pd.shape}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pd.shape

    @property
    def height(self) -> int:
        return self.pd.shape[0]

    @property
    def width(self) -> int:
        return self.pd.shape[1]

    def stack(self) -> np.ndarray:
        """Channel-last ``(H, W, 3)`` view of (pd, t1, t2)."""
        return np.stack([self.pd, self.t1, self.t2], axis=-1)

    @classmethod
    def from_stack(cls, arr: np.ndarray, labels=None) -> "SpinMap":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0].copy(), arr[..., 1].copy(), arr[..., 2].copy(), labels)

    def validate(self) -> None:
        tissue = self.pd != 0.0
        for name in ("t1", "t2"):
            bad = tissue & ~(getattr(self, name) > 0.0)
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise SingularInputError(
                    f"{name} must be > 0 where pd != 0; voxel ({r}, {c}) has "
                    f"{name}={getattr(self, name)[r, c]!r}"
                )


@dataclass
class Image:
    data: np.ndarray
    params: SequenceParams
    noise_sigma: float = 0.0
    labels: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionMismatchError(f"image data must be 2D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("image data contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.data.shape:
                raise DimensionMismatchError(
                    f"labels shape {self.labels.shape} != image shape {self.data.shape}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def evaluate(p: SequenceParams, pd, t1, t2, want_grad: bool = True, check: bool = True):
    """Signal and gradient for arbitrary-shaped (pd, t1, t2) arrays.

    Returns ``(signal, grad)`` where ``grad`` has a trailing axis of length 3
    holding ``(df/dPD, df/dT1, df/dT2)``, or ``None`` if not requested.
    Background voxels (``pd == 0``) of physical sequences get signal 0 and a
    zero gradient.
    """
    pd, t1, t2 = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (pd, t1, t2)))
    shape = pd.shape
    pd, t1, t2 = pd.ravel(), t1.ravel(), t2.ravel()
    linear = isinstance(p, LinearTest)
    if not linear:
        bg = pd == 0.0
        if check:
            for name, arr in (("t1", t1), ("t2", t2)):
                bad = ~bg & ~(arr > 0.0)
                if bad.any():
                    i = int(np.flatnonzero(bad)[0])
                    where = np.unravel_index(i, shape) if shape else ()
                    raise SingularInputError(
                        f"{name} must be > 0 for the {p.kind} signal; voxel {tuple(map(int, where))} "
                        f"has {name}={arr[i]!r}"
                    )
        if bg.any():
            t1 = np.where(bg, BACKGROUND_RELAXATION, t1)
            t2 = np.where(bg, BACKGROUND_RELAXATION, t2)
    f, g = kernels.signal_grad(p.code, p.kernel_params(), pd, t1, t2, want_grad)
    if not linear and bg.any() and g is not None:
        g[bg] = 0.0
    f = f.reshape(shape)
    if g is not None:
        g = g.reshape(shape + (3,))
    return f, g


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def bssfp_signal(pd, t1, t2, p: Bssfp):
    return _scalar(evaluate(p, pd, t1, t2, want_grad=False)[0])


def molli_apparent_t1(t1, t2, flip_angle):
    """Apparent relaxation time T1* under continuous bSSFP readout."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    half = 0.5 * flip_angle
    return _scalar(1.0 / (np.cos(half) ** 2 / t1 + np.sin(half) ** 2 / t2))


def molli_inversion_factor(t1, t2, flip_angle):
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    c = math.cos(flip_angle)
    ratio = math.sin(0.5 * flip_angle) / math.sin(flip_angle)
    return _scalar(1.0 + ratio * (1.0 + c + (1.0 - c) * t1 / t2))


def molli_signal(pd, t1, t2, p: Molli, return_aux: bool = False):
    """Magnitude inversion-recovery readout; ``return_aux`` adds (T1*, INV)."""
    f = _scalar(evaluate(p, pd, t1, t2, want_grad=False)[0])
    if return_aux:
        return f, molli_apparent_t1(t1, t2, p.flip_angle), molli_inversion_factor(t1, t2, p.flip_angle)
    return f


def gre_signal(pd, t1, t2, p: Gre):
    return _scalar(evaluate(p, pd, t1, t2, want_grad=False)[0])


def msasha_signal(a, t1, t2, p: Msasha):
    return _scalar(evaluate(p, a, t1, t2, want_grad=False)[0])


def signal(z: SpinMap, p: SequenceParams) -> np.ndarray:
    z.validate()
    return evaluate(p, z.pd, z.t1, z.t2, want_grad=False)[0]


def signal_gradient(z: SpinMap | np.ndarray, p: SequenceParams) -> np.ndarray:
    """Per-voxel ``(df/dPD, df/dT1, df/dT2)``, shape ``(H, W, 3)``.

    ``z`` is a SpinMap or a channel-last ``(..., 3)`` array. At the MOLLI
    null point the magnitude's sign is taken as +1.
    """
    if isinstance(z, SpinMap):
        z = z.stack()
    z = np.asarray(z, dtype=np.float64)
    return evaluate(p, z[..., 0], z[..., 1], z[..., 2])[1]


def forward_image(z: SpinMap, p: SequenceParams, noise_sigma: float = 0.0,
                  seed: int | None = 0) -> Image:
    """Simulate an acquisition of ``z``: noiseless signal plus i.i.d. Gaussian noise."""
    if noise_sigma < 0 or not math.isfinite(noise_sigma):
        raise ValidationError(f"noise_sigma must be finite and >= 0, got {noise_sigma!r}")
    data = signal(z, p)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + noise_sigma * rng.standard_normal(data.shape)
    labels = None if z.labels is None else z.labels.copy()
    return Image(data, p, float(noise_sigma), labels, seed)


def data_fidelity(z: SpinMap | np.ndarray, x: Image) -> tuple[float, np.ndarray]:
    """Squared L2 residual ``||f(z) - x||^2`` and its gradient w.r.t. z, shape ``(H, W, 3)``."""
    arr = z.stack() if isinstance(z, SpinMap) else np.asarray(z, dtype=np.float64)
    if arr.shape[:-1] != x.shape:
        raise DimensionMismatchError(f"spin map shape {arr.shape[:-1]} != image shape {x.shape}")
    f, g = evaluate(x.params, arr[..., 0], arr[..., 1], arr[..., 2])
    r = f - x.data
    return float(np.sum(r * r)), 2.0 * r[..., None] * g
