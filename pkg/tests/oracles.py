"""Closed-form references shared by the statistical tests."""

import json
import math
from pathlib import Path

import numpy as np

from spinrev.diffusion import GaussianScore, Normalizer
from spinrev.physics import Image, LinearTest, SpinMap

# anisotropic prior used by the sampler and posterior oracles
PRIOR_MEAN = np.array([0.2, -0.3, 0.1])
PRIOR_COV = np.array([[0.5, 0.2, 0.05], [0.2, 0.4, -0.1], [0.05, -0.1, 0.3]])


def chain_law(mean, cov, schedule, steps):
    """Exact output law ``(mean, cov)`` of ``sample`` with a GaussianScore prior."""
    ts = schedule.timesteps(steps)
    d = len(mean)
    m = np.zeros(d)
    s = np.eye(d)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        alpha, sigma = schedule.step_coefficients(t, t_prev)
        ab = schedule.alpha_bar(t)
        prec = np.linalg.inv(ab * cov + (1 - ab) * np.eye(d))
        a = (np.eye(d) - (1 - alpha) * prec) / math.sqrt(alpha)
        b = (1 - alpha) * prec @ (math.sqrt(ab) * mean) / math.sqrt(alpha)
        m = a @ m + b
        s = a @ s @ a.T + (sigma ** 2 if t_prev > 0 else 0.0) * np.eye(d)
    return m, s


# linear-Gaussian posterior oracle
LIN_WEIGHTS = np.array([0.8, 0.5, -0.4])  # in normalised coordinates
LIN_OFFSET = 0.5
LIN_TRUTH = np.array([0.4, -0.1, -0.2])
# unbounded conjugate problem: no box clamp on the Tweedie estimate
LINEAR_GUIDANCE = dict(xi=0.05, steps=200, reduction="sum", jacobian="constant_eps", clamp=False)


def linear_problem(shape=(8, 8), normalizer=None):
    """Observed image, prior score and analytic posterior mean (normalised)."""
    n = normalizer or Normalizer()
    w_phys = LIN_WEIGHTS / n.scale
    # f(phys) = w_phys . phys + b; phys = lo + (z + 1) * scale, so f = wn . z + c + b
    c = float(w_phys @ (n.lo + n.scale))
    params = LinearTest(tuple(float(v) for v in w_phys), LIN_OFFSET)
    y = float(LIN_WEIGHTS @ LIN_TRUTH) + c + LIN_OFFSET
    x = Image(np.full(shape, y), params)
    prior = GaussianScore(PRIOR_MEAN, PRIOR_COV)
    w = LIN_WEIGHTS
    gain = PRIOR_COV @ w / float(w @ PRIOR_COV @ w)
    post_mean = PRIOR_MEAN + gain * float(w @ LIN_TRUTH - w @ PRIOR_MEAN)
    return x, prior, post_mean


def truth_spinmap(shape, normalizer=None):
    n = normalizer or Normalizer()
    phys = n.denormalize(np.broadcast_to(LIN_TRUTH, tuple(shape) + (3,)))
    return SpinMap.from_stack(phys)


# phantom round trip, configured like ``spinrev demo``
ROUND_TRIP_SIZE = 128
ROUND_TRIP_SEEDS = (1, 2, 3, 4, 5)
BANDWIDTH = 0.02
PER_CLASS = 64
GRE_PARAMS = dict(flip_angle_deg=15.0, tr=5.0, te=1.5)


def phantom_prior(z, seed):
    from spinrev.diffusion import KdeScore, spinmap_bank
    from spinrev.rng import stream

    bank = spinmap_bank(z, Normalizer(), PER_CLASS, stream(seed, "prior.bank"))
    # the demo stores the bank as float32
    return KdeScore(bank.astype(np.float32).astype(np.float64), BANDWIDTH)


_CACHE = {}


def round_trip(seed, size=ROUND_TRIP_SIZE):
    """bSSFP and GRE inversions of one phantom; cached per (seed, size)."""
    key = (seed, size)
    if key in _CACHE:
        return _CACHE[key]
    from spinrev.phantom import PhantomSpec, generate_phantom
    from spinrev.physics import Bssfp, Gre, forward_image
    from spinrev.reverse import GuidanceConfig, reverse_image
    from spinrev.rng import child_seed

    z = generate_phantom(PhantomSpec(size, size, seed=seed))
    score = phantom_prior(z, seed)
    cfg = GuidanceConfig(xi=400.0, steps=200, jacobian="exact")
    x = forward_image(z, Bssfp(math.radians(45.0)))
    gre = Gre(math.radians(GRE_PARAMS["flip_angle_deg"]), GRE_PARAMS["tr"], GRE_PARAMS["te"])
    xg = forward_image(z, gre)
    out = {
        "z": z,
        "x": x,
        "score": score,
        "bssfp": reverse_image(x, score, cfg, child_seed(seed, "demo.reverse")),
        "x_gre": xg,
        "gre": reverse_image(xg, score, cfg, child_seed(seed, "gre.reverse")),
    }
    _CACHE[key] = out
    return out


GOLDEN = Path(__file__).parent / "golden" / "round_trip.json"


def record_golden(margin=1.25):
    """Recompute the round-trip oracle values and rewrite the golden file."""
    from spinrev import metrics

    rows = {}
    for seed in ROUND_TRIP_SEEDS:
        rt = round_trip(seed)
        rec = rt["bssfp"].reconstruction.data
        rows[str(seed)] = {"rmse": metrics.rmse(rt["x"].data, rec), "psnr": metrics.psnr(rt["x"].data, rec)}
    worst_rmse = max(r["rmse"] for r in rows.values())
    worst_psnr = min(r["psnr"] for r in rows.values())
    out = {
        "size": ROUND_TRIP_SIZE,
        "seeds": rows,
        "rmse_threshold": float(f"{worst_rmse * margin:.3g}"),
        "psnr_threshold": float(f"{worst_psnr - 20 * math.log10(margin):.3g}"),
        "note": "margin 1.25 on the worst seed; regenerate with: python3 tests/oracles.py --record",
    }
    GOLDEN.parent.mkdir(exist_ok=True)
    GOLDEN.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


if __name__ == "__main__":
    import sys

    if "--record" in sys.argv:
        print(json.dumps(record_golden(), indent=2, sort_keys=True))
