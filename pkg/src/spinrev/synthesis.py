"""Cross-sequence synthesis and augmentation stacks from estimated spin maps."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ValidationError
from .physics import Bssfp, Gre, Image, Molli, SequenceParams, SpinMap, forward_image, params_to_dict
from .rng import child_seed, stream


def default_tinv_grid(n: int = 11, lo: float = 100.0, hi: float = 5000.0) -> list[float]:
    """``n`` inversion times log-spaced over ``[lo, hi]`` ms."""
    return [float(v) for v in np.geomspace(lo, hi, n)]


def synthesize(z: SpinMap, p: SequenceParams, noise_sigma: float = 0.0, seed: int | None = 0) -> Image:
    """Render ``z`` under a new sequence (noiseless unless ``noise_sigma`` > 0)."""
    im = forward_image(z, p, noise_sigma, seed)
    im.meta = {"synthesized": True, "params": params_to_dict(p)}
    return im


# recipe field -> constructor keyword; "_deg" fields are converted to radians
_FIELDS = {
    "bssfp": {"flip_angle_deg": "flip_angle"},
    "molli": {"flip_angle_deg": "flip_angle", "t_inv": "t_inv"},
    "gre": {"flip_angle_deg": "flip_angle", "tr": "tr", "te": "te"},
}
_CLASSES = {"bssfp": Bssfp, "molli": Molli, "gre": Gre}


def _is_range(v) -> bool:
    return isinstance(v, dict)


def _check_field(kind, name, v):
    if _is_range(v):
        if set(v) != {"uniform"} or len(v["uniform"]) != 2:
            raise ValidationError(f"{kind}.{name}: a range must look like {{\"uniform\": [lo, hi]}}")
        lo, hi = (float(u) for u in v["uniform"])
        if not lo <= hi:
            raise ValidationError(f"{kind}.{name}: range lo {lo} > hi {hi}")
        return {"uniform": [lo, hi]}
    vals = [float(u) for u in (v if isinstance(v, (list, tuple)) else [v])]
    if not vals:
        raise ValidationError(f"{kind}.{name}: empty grid")
    return vals


@dataclass(frozen=True)
class AugmentationRecipe:
    """Sequence-parameter draws for augmentation.

    ``sequences`` maps a kind (``bssfp``, ``molli``, ``gre``) to its fields.
    Each field is a grid (list of values) or ``{"uniform": [lo, hi]}``. Flip
    angles are in degrees, times in ms. A block with only grids expands to
    the Cartesian product; a block with any range yields ``samples`` random
    draws, grid fields being picked uniformly from their values.
    """

    sequences: dict = field(default_factory=dict)
    samples: int = 1
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.samples < 1:
            raise ValidationError(f"samples must be >= 1, got {self.samples}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        clean = {}
        for kind, block in self.sequences.items():
            if kind not in _FIELDS:
                raise ValidationError(f"unknown sequence kind {kind!r}; expected one of {sorted(_FIELDS)}")
            block = dict(block)
            if kind == "molli" and "t_inv" not in block:
                block["t_inv"] = default_tinv_grid()
            missing = set(_FIELDS[kind]) - set(block)
            extra = set(block) - set(_FIELDS[kind])
            if missing or extra:
                raise ValidationError(
                    f"{kind}: missing fields {sorted(missing)}, unknown fields {sorted(extra)}")
            clean[kind] = {k: _check_field(kind, k, v) for k, v in sorted(block.items())}
        object.__setattr__(self, "sequences", clean)
        # fail early on invalid parameter combinations
        self.draws()

    def draws(self) -> list[SequenceParams]:
        out = []
        for kind in sorted(self.sequences):
            block = self.sequences[kind]
            names = sorted(block)
            if any(_is_range(block[n]) for n in names):
                rng = stream(self.seed, f"recipe.{kind}")
                combos = []
                for _ in range(self.samples):
                    row = []
                    for n in names:
                        v = block[n]
                        if _is_range(v):
                            row.append(float(rng.uniform(*v["uniform"])))
                        else:
                            row.append(v[int(rng.integers(len(v)))])
                    combos.append(row)
            else:
                combos = itertools.product(*(block[n] for n in names))
            for row in combos:
                kw = {}
                for n, v in zip(names, row):
                    key = _FIELDS[kind][n]
                    kw[key] = math.radians(v) if n.endswith("_deg") else v
                out.append(_CLASSES[kind](**kw))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationRecipe":
        d = dict(d)
        seqs = d.pop("sequences", {})
        try:
            return cls(seqs, int(d.pop("samples", 1)), int(d.pop("seed", 0)),
                       float(d.pop("noise_sigma", 0.0)), **d)
        except TypeError as exc:
            raise ValidationError(f"bad recipe: {exc}") from exc

    def to_dict(self) -> dict:
        return {"sequences": self.sequences, "samples": self.samples, "seed": self.seed,
                "noise_sigma": self.noise_sigma}


def molli_recipe(t_inv=None, flip_angle_deg: float = 35.0, seed: int = 0) -> AugmentationRecipe:
    """MOLLI baselines over ``t_inv`` (default: 11 log-spaced values)."""
    grid = default_tinv_grid() if t_inv is None else list(t_inv)
    return AugmentationRecipe({"molli": {"flip_angle_deg": [flip_angle_deg], "t_inv": grid}}, seed=seed)


def make_augmentation_stack(z: SpinMap, recipe: AugmentationRecipe) -> list[Image]:
    """One image per recipe draw, labels propagated, parameters in ``meta``."""
    draws = recipe.draws()
    if not draws:
        return []

    def one(i):
        p = draws[i]
        im = synthesize(z, p, recipe.noise_sigma, child_seed(recipe.seed, f"recipe.noise.{i}"))
        im.meta.update(index=i, recipe_seed=recipe.seed)
        return im

    workers = min(kernels.thread_count(), len(draws))
    if workers <= 1:
        return [one(i) for i in range(len(draws))]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(len(draws))))


def contrast(im: Image, labels=None, a: int = 1, b: int = 2) -> float:
    """Difference of class medians ``median(a) - median(b)`` (default blood minus myocardium)."""
    labels = im.labels if labels is None else labels
    if labels is None:
        raise ValidationError("contrast needs labels")
    va, vb = im.data[labels == a], im.data[labels == b]
    if va.size == 0 or vb.size == 0:
        raise ValidationError(f"class {a if va.size == 0 else b} is empty")
    return float(np.median(va) - np.median(vb))
