"""DDPM machinery over normalised spin-property space.

Spin maps are mapped channel-wise into [-1, 1] by :class:`Normalizer` and
handled as channel-last arrays ``(..., 3)``. A :class:`ScoreModel` supplies
``grad log p_t(z)`` for the diffused prior; the analytic and sample-bank
models here stand in for a trained denoiser and expose the same interface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by diffusion step ``t = 1..T`` (array slot ``t - 1``)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas; ``alpha_bar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def timesteps(self, steps: int) -> list[int]:
        """Evenly strided descending subsequence of ``{T, ..., 1}``."""
        if not 1 <= steps <= self.T:
            raise ValidationError(f"steps must lie in [1, {self.T}], got {steps}")
        ts = [int(round(i * self.T / steps)) for i in range(steps, 0, -1)]
        return ts

    def step_coefficients(self, t: int, t_prev: int) -> tuple[float, float]:
        """Effective ``(alpha, sigma)`` for a jump from ``t`` to ``t_prev``.

        Unit strides use the schedule entries directly so the full chain is
        reproduced exactly.
        """
        if t_prev == t - 1:
            return float(self.alphas[t - 1]), float(self.sigmas[t - 1])
        ab_t, ab_prev = self.alpha_bar(t), self.alpha_bar(t_prev)
        alpha = ab_t / ab_prev
        sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha)
        return alpha, math.sqrt(sigma2)


def build_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta ramp with derived alpha, alpha-bar and posterior-sigma tables."""
    if T < 2:
        raise ValidationError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValidationError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, sigmas)


class Normalizer:
    """Per-channel affine map of (pd, t1, t2) onto [-1, 1]."""

    def __init__(self, lo=(0.0, 0.0, 0.0), hi=(1.2, 3000.0, 500.0)):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValidationError("normaliser ranges must have hi > lo")

    @property
    def scale(self) -> np.ndarray:
        """d(physical)/d(normalised) per channel."""
        return 0.5 * (self.hi - self.lo)

    def normalize(self, phys, clamp: bool = True) -> np.ndarray:
        phys = np.asarray(phys, dtype=np.float64)
        if clamp:
            out = (phys < self.lo) | (phys > self.hi)
            if out.any():
                logger.warning("clamping %d values outside the normalisation ranges", int(out.sum()))
                phys = np.clip(phys, self.lo, self.hi)
        return (phys - self.lo) / self.scale - 1.0

    def denormalize(self, z) -> np.ndarray:
        return self.lo + (np.asarray(z, dtype=np.float64) + 1.0) * self.scale

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


class ScoreModel:
    """Interface: ``score(z, alpha_bar)`` approximates ``grad log p_t(z)``.

    ``alpha_bar`` identifies the diffusion time (``alpha_bar = 1`` is the
    clean prior). ``z`` has shape ``(..., 3)``.
    """

    kind = "abstract"

    def score(self, z: np.ndarray, alpha_bar: float) -> np.ndarray:
        raise NotImplementedError

    def tweedie(self, z: np.ndarray, alpha_bar: float) -> np.ndarray:
        return (z + (1.0 - alpha_bar) * self.score(z, alpha_bar)) / math.sqrt(alpha_bar)

    def tweedie_jacobian(self, z: np.ndarray, alpha_bar: float) -> np.ndarray:
        """``d tweedie / d z`` per voxel, shape ``(..., 3, 3)``."""
        raise NotImplementedError(f"{type(self).__name__} has no exact Tweedie Jacobian")

    def score_and_jacobian(self, z: np.ndarray, alpha_bar: float):
        return self.score(z, alpha_bar), self.tweedie_jacobian(z, alpha_bar)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _bmv(m, v):
    return np.einsum("ij,...j->...i", m, v)


class GaussianScore(ScoreModel):
    """Exact score of a diffused Gaussian prior N(mean, cov)."""

    kind = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(3)
        self.cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.cov, self.cov.T):
            raise ValidationError("covariance must be symmetric")
        np.linalg.cholesky(self.cov)

    def diffused(self, alpha_bar: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the marginal at ``alpha_bar``."""
        return (math.sqrt(alpha_bar) * self.mean,
                alpha_bar * self.cov + (1.0 - alpha_bar) * np.eye(3))

    def score(self, z, alpha_bar):
        mu, cov = self.diffused(alpha_bar)
        return -_bmv(np.linalg.inv(cov), np.asarray(z) - mu)

    def tweedie_jacobian(self, z, alpha_bar):
        _, cov = self.diffused(alpha_bar)
        jac = math.sqrt(alpha_bar) * self.cov @ np.linalg.inv(cov)
        return np.broadcast_to(jac, np.shape(z)[:-1] + (3, 3))

    def sample_prior(self, n, rng):
        return rng.multivariate_normal(self.mean, self.cov, size=n)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class GmmScore(ScoreModel):
    """Exact score of a diffused Gaussian mixture."""

    kind = "gmm"

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        self.covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
        if not (len(self.weights) == len(self.means) == len(self.covs)):
            raise ValidationError("weights, means and covs need equal lengths")
        if np.any(self.weights <= 0):
            raise ValidationError("mixture weights must be positive")
        self.weights = self.weights / self.weights.sum()

    def _terms(self, z, alpha_bar):
        z = np.asarray(z, dtype=np.float64)
        sab = math.sqrt(alpha_bar)
        logits, scores, precs = [], [], []
        for w, mu, cov in zip(self.weights, self.means, self.covs):
            c = alpha_bar * cov + (1.0 - alpha_bar) * np.eye(3)
            prec = np.linalg.inv(c)
            d = z - sab * mu
            s = -_bmv(prec, d)
            _, logdet = np.linalg.slogdet(c)
            logits.append(math.log(w) - 0.5 * logdet + 0.5 * np.sum(d * s, axis=-1))
            scores.append(s)
            precs.append(prec)
        logits = np.stack(logits, axis=-1)
        logits -= logits.max(axis=-1, keepdims=True)
        resp = np.exp(logits)
        resp /= resp.sum(axis=-1, keepdims=True)
        return resp, np.stack(scores, axis=-2), np.stack(precs)

    def score(self, z, alpha_bar):
        resp, scores, _ = self._terms(z, alpha_bar)
        return np.einsum("...k,...ki->...i", resp, scores)

    def tweedie_jacobian(self, z, alpha_bar):
        resp, scores, precs = self._terms(z, alpha_bar)
        s = np.einsum("...k,...ki->...i", resp, scores)
        hess = (-np.einsum("...k,kij->...ij", resp, precs)
                + np.einsum("...k,...ki,...kj->...ij", resp, scores, scores)
                - s[..., :, None] * s[..., None, :])
        return (np.eye(3) + (1.0 - alpha_bar) * hess) / math.sqrt(alpha_bar)

    def sample_prior(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, 3))
        for k in range(len(self.weights)):
            idx = comp == k
            out[idx] = rng.multivariate_normal(self.means[k], self.covs[k], size=int(idx.sum()))
        return out

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist(),
                "means": self.means.tolist(), "covs": self.covs.tolist()}


def scott_factor(n: int, d: int = 3) -> float:
    return n ** (-1.0 / (d + 4))


class KdeScore(ScoreModel):
    """Score of a Gaussian kernel density over a bank of normalised samples.

    The kernel covariance is ``bandwidth**2 * I`` for a scalar bandwidth or
    ``scott_factor(n)**2 * cov(bank)`` for ``bandwidth="scott"``. Diffusing
    the KDE keeps it a mixture with shared covariance
    ``alpha_bar * H + (1 - alpha_bar) * I``, so the score is exact for the
    smoothed bank.
    """

    kind = "kde"

    def __init__(self, bank, bandwidth="scott", weights=None, dedupe=True):
        bank = np.ascontiguousarray(bank, dtype=np.float64).reshape(-1, 3)
        n = len(bank)
        if n < 2:
            raise ValidationError("KDE bank needs at least two samples")
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (n,) or np.any(weights <= 0):
                raise ValidationError("KDE weights must be positive, one per bank sample")
            weights = weights / weights.sum()
        self.n_samples = n
        self.bandwidth = bandwidth
        if isinstance(bandwidth, str):
            if bandwidth != "scott":
                raise ValidationError(f"unknown bandwidth rule {bandwidth!r}")
            # same convention as scipy.stats.gaussian_kde
            cov = np.atleast_2d(np.cov(bank.T, aweights=weights))
            neff = 1.0 / np.sum(weights ** 2)
            self.kernel_cov = scott_factor(neff) ** 2 * cov + 1e-12 * np.eye(3)
        else:
            if not bandwidth > 0:
                raise ValidationError("bandwidth must be positive")
            self.kernel_cov = float(bandwidth) ** 2 * np.eye(3)
        if dedupe:
            # identical rows become one centre carrying their summed weight
            uniq, inverse = np.unique(bank, axis=0, return_inverse=True)
            if len(uniq) < n:
                weights = np.bincount(inverse.ravel(), weights=weights, minlength=len(uniq))
                bank = np.ascontiguousarray(uniq)
        self.bank = bank
        self.weights = weights
        self._logw = np.log(self.weights)

    def _posterior(self, z, alpha_bar, want_second):
        z = np.asarray(z, dtype=np.float64)
        shape = z.shape
        c = alpha_bar * self.kernel_cov + (1.0 - alpha_bar) * np.eye(3)
        lchol = np.linalg.cholesky(c)
        linv = np.linalg.inv(lchol)
        u = z.reshape(-1, 3) @ linv.T
        v = (math.sqrt(alpha_bar) * self.bank) @ linv.T
        vbar, second = kernels.kde_posterior(u, v, self._logw, want_second)
        return shape, linv, u, vbar, second

    def score(self, z, alpha_bar):
        shape, linv, u, vbar, _ = self._posterior(z, alpha_bar, False)
        return (-(u - vbar) @ linv).reshape(shape)

    def score_and_jacobian(self, z, alpha_bar):
        shape, linv, u, vbar, second = self._posterior(z, alpha_bar, True)
        s = (-(u - vbar) @ linv).reshape(shape)
        idx = np.array([[0, 1, 2], [1, 3, 4], [2, 4, 5]])
        cov_w = second[:, idx] - vbar[:, :, None] * vbar[:, None, :]
        inner = cov_w - np.eye(3)
        hess = linv.T @ inner @ linv
        jac = (np.eye(3) + (1.0 - alpha_bar) * hess) / math.sqrt(alpha_bar)
        return s, jac.reshape(shape[:-1] + (3, 3))

    def tweedie_jacobian(self, z, alpha_bar):
        return self.score_and_jacobian(z, alpha_bar)[1]

    def sample_prior(self, n, rng):
        idx = rng.choice(len(self.bank), size=n, p=self.weights)
        return self.bank[idx] + rng.multivariate_normal(np.zeros(3), self.kernel_cov, size=n)

    def to_dict(self):
        return {"kind": self.kind, "bandwidth": self.bandwidth, "n_bank": self.n_samples}

    @classmethod
    def from_spinmap(cls, z, normalizer: Normalizer, per_class: int, rng: np.random.Generator,
                     bandwidth="scott") -> "KdeScore":
        """Bank of ``per_class`` voxels drawn from every labelled class of ``z``."""
        return cls(spinmap_bank(z, normalizer, per_class, rng), bandwidth)


def spinmap_bank(z, normalizer: Normalizer, per_class: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified normalised sample bank (shape ``(n, 3)``) from a labelled spin map."""
    flat = z.stack().reshape(-1, 3)
    labels = (np.zeros(len(flat), dtype=np.int64) if z.labels is None else z.labels.ravel())
    picks = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        picks.append(rng.choice(idx, size=per_class, replace=len(idx) < per_class))
    return normalizer.normalize(flat[np.concatenate(picks)])


def score_from_dict(d: dict, bank: np.ndarray | None = None) -> ScoreModel:
    kind = d.get("kind")
    if kind == "gaussian":
        return GaussianScore(d["mean"], d["cov"])
    if kind == "gmm":
        return GmmScore(d["weights"], d["means"], d["covs"])
    if kind == "kde":
        if bank is None:
            raise ValidationError("kde score needs a sample bank")
        return KdeScore(bank, d.get("bandwidth", "scott"))
    raise ValidationError(f"unknown score kind {kind!r}; expected gaussian, gmm or kde")


def forward_noise(z0, t: int, seed, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``z_t ~ q(z_t | z_0)``."""
    if not 1 <= t <= schedule.T:
        raise ValidationError(f"t must lie in [1, {schedule.T}], got {t}")
    z0 = np.asarray(z0, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * rng.standard_normal(z0.shape)


def ddpm_update(z, score_value, alpha: float, sigma: float, noise) -> np.ndarray:
    """Ancestral update ``(z + (1 - alpha) * score) / sqrt(alpha) + sigma * noise``."""
    out = (z + (1.0 - alpha) * score_value) / math.sqrt(alpha)
    if noise is not None:
        out = out + sigma * noise
    return out


def reverse_step(z_t, t: int, score: ScoreModel, seed, schedule: NoiseSchedule,
                 t_prev: int | None = None) -> np.ndarray:
    """One unconditional reverse step from ``t`` to ``t_prev`` (default ``t - 1``)."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not (1 <= t <= schedule.T and 0 <= t_prev < t):
        raise ValidationError(f"invalid reverse step {t} -> {t_prev}")
    alpha, sigma = schedule.step_coefficients(t, t_prev)
    s = score.score(z_t, schedule.alpha_bar(t))
    noise = None
    if t_prev > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = rng.standard_normal(np.shape(z_t))
    return ddpm_update(z_t, s, alpha, sigma, noise)


def sample(score: ScoreModel, shape, steps: int, seed, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Unconditional ancestral sampling on a strided step grid.

    Returns a normalised array of shape ``(*shape, 3)``.
    """
    schedule = schedule or build_schedule()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ts = schedule.timesteps(steps)
    z = rng.standard_normal(tuple(shape) + (3,))
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        z = reverse_step(z, t, score, rng, schedule, t_prev)
    return z
