"""``spinrev`` command line: phantom -> simulate -> fit -> prior -> reverse -> synthesize -> evaluate.

Every subcommand writes into ``--out`` and leaves a ``manifest.json`` with
the resolved arguments, seeds, library versions and SHA-256 digests of the
files it produced. Flip angles are given in degrees here and converted to
radians once, on parsing.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, kernels, metrics
from .diffusion import Normalizer, sample, score_from_dict, spinmap_bank
from .errors import SpinrevError, ValidationError
from .fitting import FitConfig, MsashaStack, default_protocol, fit_msasha, simulate_stack
from .phantom import PhantomSpec, Tissue, generate_phantom
from .physics import Bssfp, Gre, Molli, forward_image, params_from_dict, params_to_dict
from .reverse import GuidanceConfig, reverse_image, reverse_image_t2s, to_spinmap
from .rng import child_seed, stream
from .synthesis import AugmentationRecipe, contrast, make_augmentation_stack, molli_recipe

logger = logging.getLogger("spinrev")

DEFAULT_BANDWIDTH = 0.02
DEFAULT_PER_CLASS = 64


def _load_json_arg(value: str, what: str) -> dict:
    """Inline JSON or a path to a JSON file."""
    text = value
    p = Path(value)
    if not value.lstrip().startswith("{"):
        if not p.is_file():
            raise ValidationError(f"{what}: {value!r} is neither inline JSON nor an existing file")
        text = p.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what}: malformed JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"{what}: expected a JSON object")
    return obj


def _sequence_from_args(args):
    if args.sequence:
        return params_from_dict(_load_json_arg(args.sequence, "--sequence"), degrees=True)
    if not args.kind:
        raise ValidationError("give --sequence JSON or --kind with its parameters")
    d = {"kind": args.kind}
    for name in ("flip_angle", "t_inv", "tr", "te", "ts", "td"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if args.kind == "msasha" and args.mode:
        d["saturation_exponent_mode"] = args.mode
    return params_from_dict(d, degrees=True)


def _stem(path, kind: str | None = None) -> Path:
    """Accept a run directory (use its only raster of ``kind``) or an explicit stem."""
    p = Path(path)
    if p.is_dir():
        sides = sorted(p.glob("*.json"))
        sides = [s for s in sides if s.name != "manifest.json" and s.with_suffix(".f32").exists()]
        if kind is not None:
            sides = [s for s in sides if io.read_json(s).get("object") == kind]
        if len(sides) != 1:
            what = f"{kind} rasters" if kind else "rasters"
            raise ValidationError(f"{p} holds {len(sides)} {what}; name one explicitly")
        return sides[0].with_suffix("")
    return p.with_suffix("") if p.suffix in (".json", ".f32") else p


def _load_score(path):
    path = Path(path)
    d = io.read_json(path)
    bank = None
    if d.get("kind") == "kde":
        if "bank" not in d:
            raise ValidationError(f"{path}: kde score needs a 'bank' entry")
        bank, _ = io.read_bank(path.parent / d["bank"])
    return score_from_dict(d, bank)


def _versions() -> dict:
    import scipy

    return {"spinrev": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernel_backend": kernels.BACKEND}


def _write_manifest(out: Path, command: str, args: dict, extra=None) -> None:
    manifest = {
        "command": command,
        "args": args,
        "versions": _versions(),
        "outputs": {k: v for k, v in io.tree_digests(out).items() if k != "manifest.json"},
    }
    if extra:
        manifest.update(extra)
    io.write_json(out / "manifest.json", manifest)


def _args_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "out")}


def _preview_spinmap(out: Path, name: str, z) -> None:
    for ch in ("pd", "t1", "t2"):
        io.export_raster_preview(getattr(z, ch), out / f"{name}_{ch}.pgm")


def _guidance(args) -> GuidanceConfig:
    return GuidanceConfig(xi=args.xi, steps=args.steps, T=args.T, gradient=args.gradient,
                          jacobian=args.jacobian, clamp=not args.no_clamp,
                          normalize_residual=args.normalize_residual, intensity=args.intensity,
                          reduction=args.reduction)


# subcommands

def cmd_phantom(args) -> int:
    out = Path(args.out)
    d = _load_json_arg(args.config, "--config") if args.config else {}
    d.setdefault("width", args.width)
    d.setdefault("height", args.height)
    d.setdefault("seed", args.seed)
    d.setdefault("noise_level", args.noise_level)
    d.setdefault("smoothness", args.smoothness)
    spec = PhantomSpec.from_dict(d)
    z = generate_phantom(spec)
    io.write_spinmap(out / "phantom", z, seed=spec.seed, meta={"phantom": spec.to_dict()})
    _preview_spinmap(out, "phantom", z)
    _write_manifest(out, "phantom", _args_dict(args), {"phantom": spec.to_dict()})
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    z = io.read_spinmap(_stem(args.spinmap, "spinmap"))
    if args.protocol == "msasha":
        protocol = default_protocol(args.mode or "physical")
        stack = simulate_stack(z, protocol, args.noise_sigma, args.seed)
        io.write_stack(out, stack.images)
        seqs = [params_to_dict(p) for p in protocol]
    else:
        p = _sequence_from_args(args)
        im = forward_image(z, p, args.noise_sigma, args.seed)
        io.write_image(out / "image", im)
        io.export_raster_preview(im.data, out / "image.pgm")
        seqs = [params_to_dict(p)]
    _write_manifest(out, "simulate", _args_dict(args), {"sequences": seqs})
    return 0


def cmd_fit(args) -> int:
    out = Path(args.out)
    stack = MsashaStack(io.read_stack(args.stack))
    d = _load_json_arg(args.config, "--config") if args.config else {}
    if args.bounds:
        b = _load_json_arg(args.bounds, "--bounds")
        unknown = set(b) - {"t1", "t2"}
        if unknown:
            raise ValidationError(f"--bounds: unknown keys {sorted(unknown)}; use t1 and t2")
        d.update({f"{k}_bounds": v for k, v in b.items()})
    cfg = FitConfig.from_dict(d)
    res = fit_msasha(stack, cfg)
    io.write_fit(out / "fit", res)
    io.write_spinmap(out / "spinmap", res.spinmap)
    _preview_spinmap(out, "fit", res.spinmap)
    conv = float(np.mean(res.converged))
    logger.info("fit converged in %.1f%% of voxels", 100 * conv)
    _write_manifest(out, "fit-msasha", _args_dict(args),
                    {"fit_config": cfg.to_dict(), "converged_fraction": conv})
    return 0


def _build_prior(z, out: Path, per_class: int, bandwidth, seed: int) -> Path:
    normalizer = Normalizer()
    bank = spinmap_bank(z, normalizer, per_class, stream(seed, "prior.bank"))
    io.write_bank(out / "bank", bank, meta={"per_class": per_class, "normalizer": normalizer.to_dict()})
    score_path = out / "score.json"
    io.write_json(score_path, {"kind": "kde", "bandwidth": bandwidth, "bank": "bank",
                               "n_bank": int(len(bank))})
    return score_path


def _bandwidth(value: str):
    if value == "scott":
        return value
    try:
        bw = float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bandwidth must be 'scott' or a number, got {value!r}") from exc
    if not bw > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return bw


def cmd_build_prior(args) -> int:
    out = Path(args.out)
    z = io.read_spinmap(_stem(args.spinmap, "spinmap"))
    _build_prior(z, out, args.per_class, args.bandwidth, args.seed)
    _write_manifest(out, "build-prior", _args_dict(args))
    return 0


def cmd_sample(args) -> int:
    out = Path(args.out)
    score = _load_score(args.score)
    if args.n < 1:
        raise ValidationError(f"--n must be >= 1, got {args.n}")
    rng = stream(args.seed, "sample")
    for i in range(args.n):
        zn = sample(score, (args.height, args.width), args.steps, rng)
        name = "sample" if args.n == 1 else f"sample_{i:03d}"
        z = to_spinmap(zn, Normalizer())
        io.write_spinmap(out / name, z, seed=args.seed)
        _preview_spinmap(out, name, z)
    _write_manifest(out, "sample", _args_dict(args))
    return 0


def _write_reverse(out: Path, res, x) -> None:
    io.write_spinmap(out / "zhat", res.spinmap, seed=res.seed)
    io.write_image(out / "reconstruction", res.reconstruction)
    _preview_spinmap(out, "zhat", res.spinmap)
    io.write_metrics_csv(out / "fidelity.csv",
                         [{"step": i, "t": t, "fidelity": f}
                          for i, (t, f) in enumerate(zip(res.meta["timesteps"], res.fidelity))])
    if res.translated is not None:
        io.write_image(out / "translated", res.translated)
        io.export_raster_preview(res.translated.data, out / "translated.pgm")


def cmd_reverse(args) -> int:
    out = Path(args.out)
    x = io.read_image(_stem(args.image, "image"))
    score = _load_score(args.score)
    cfg = _guidance(args)
    seed = child_seed(args.seed, "reverse")
    if args.t2s:
        source = params_from_dict(_load_json_arg(args.source, "--source"), degrees=True) if args.source else None
        res = reverse_image_t2s(x, score, cfg, seed, source)
    else:
        res = reverse_image(x, score, cfg, seed)
    _write_reverse(out, res, x)
    _write_manifest(out, "reverse", _args_dict(args), {"guidance": cfg.to_dict(), "chain_seed": seed})
    return 0


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    z = io.read_spinmap(_stem(args.spinmap, "spinmap"))
    recipe = (AugmentationRecipe.from_dict(_load_json_arg(args.recipe, "--recipe"))
              if args.recipe else molli_recipe(seed=args.seed))
    stack = make_augmentation_stack(z, recipe)
    io.write_stack(out, stack)
    _write_manifest(out, "synthesize", _args_dict(args), {"recipe": recipe.to_dict(), "count": len(stack)})
    return 0


def _evaluate_rows(a_stem: Path, b_stem: Path) -> list[dict]:
    _, side_a = io.read_raster(a_stem)
    _, side_b = io.read_raster(b_stem)
    if side_a.get("object") != side_b.get("object"):
        raise ValidationError(f"cannot compare a {side_a.get('object')} with a {side_b.get('object')}")
    rows = []
    if side_a.get("object") == "image":
        a, b = io.read_image(a_stem), io.read_image(b_stem)
        rows.append({"metric": "rmse", "channel": "signal", "value": metrics.rmse(a.data, b.data)})
        rows.append({"metric": "psnr", "channel": "signal", "value": metrics.psnr(a.data, b.data)})
        return rows
    a, b = io.read_spinmap(a_stem), io.read_spinmap(b_stem)
    for ch in ("pd", "t1", "t2"):
        rows.append({"metric": "rmse", "channel": ch, "value": metrics.rmse(getattr(a, ch), getattr(b, ch))})
        rows.append({"metric": "psnr", "channel": ch, "value": metrics.psnr(getattr(a, ch), getattr(b, ch))})
    labels = a.labels if a.labels is not None else b.labels
    if labels is not None:
        # relaxation times are undefined where pd = 0, so also score tissue voxels alone
        tissue = labels > 0
        for ch in ("pd", "t1", "t2"):
            ra, rb = getattr(a, ch)[tissue], getattr(b, ch)[tissue]
            rows.append({"metric": "rmse_tissue", "channel": ch, "value": metrics.rmse(ra, rb)})
            rows.append({"metric": "psnr_tissue", "channel": ch, "value": metrics.psnr(ra, rb)})
        for k, v in metrics.ordering_checks(b, labels).items():
            rows.append({"metric": k, "channel": "", "value": v})
    return rows


def cmd_evaluate(args) -> int:
    rows = _evaluate_rows(_stem(args.a), _stem(args.b))
    io.write_metrics_csv(args.out, rows, ["metric", "channel", "value"])
    return 0


def run_demo(seed: int, out, size: int = 128, steps: int = 200, xi: float = 400.0,
             per_class: int = DEFAULT_PER_CLASS, bandwidth=DEFAULT_BANDWIDTH) -> dict:
    """Full phantom workflow; returns the metrics written to ``metrics.csv``."""
    out = Path(out)
    spec = PhantomSpec(size, size, seed=seed)
    z = generate_phantom(spec)
    io.write_spinmap(out / "phantom", z, seed=seed, meta={"phantom": spec.to_dict()})
    _preview_spinmap(out, "phantom", z)

    bssfp = Bssfp(math.radians(45.0))
    x = forward_image(z, bssfp)
    io.write_image(out / "bssfp", x)
    io.export_raster_preview(x.data, out / "bssfp.pgm")

    score_path = _build_prior(z, out / "prior", per_class, bandwidth, seed)
    score = _load_score(score_path)
    cfg = GuidanceConfig(xi=xi, steps=steps, jacobian="exact")

    res = reverse_image(x, score, cfg, child_seed(seed, "demo.reverse"))
    _write_reverse(out / "reverse", res, x)
    zhat = res.spinmap

    # cross-sequence synthesis from the estimate
    molli = make_augmentation_stack(zhat, molli_recipe(seed=seed))
    io.write_stack(out / "molli", molli)
    gre_params = Gre(math.radians(15.0), 5.0, 1.5)
    gre = forward_image(zhat, gre_params)
    io.write_image(out / "gre", gre)
    io.export_raster_preview(gre.data, out / "gre.pgm")

    # target-to-source: invert a bright-blood MOLLI readout, render as bSSFP
    molli_obs = forward_image(z, Molli(math.radians(35.0), 3000.0))
    t2s = reverse_image_t2s(molli_obs, score, cfg, child_seed(seed, "demo.t2s"), source=bssfp)
    io.write_image(out / "t2s" / "molli_observed", molli_obs)
    _write_reverse(out / "t2s", t2s, molli_obs)

    labels = z.labels
    signs = [np.sign(contrast(im, labels)) for im in molli]
    ratio = lambda im: (np.median(im.data[labels == Tissue.blood])
                        / np.median(im.data[labels == Tissue.myocardium]))
    bssfp_hat = res.reconstruction
    m = {
        "reconstruction_rmse": metrics.rmse(x.data, res.reconstruction.data),
        "reconstruction_psnr": metrics.psnr(x.data, res.reconstruction.data),
        "t2_median_rel_error": metrics.median_relative_error(zhat.t2, z.t2, labels > 0),
        "t1_median_rel_error": metrics.median_relative_error(zhat.t1, z.t1, labels > 0),
    }
    m.update(metrics.ordering_checks(zhat, labels))
    m["molli_contrast_inversion"] = bool(any(s > 0 for s in signs) and any(s < 0 for s in signs))
    with np.errstate(divide="ignore", invalid="ignore"):
        m["gre_contrast_below_bssfp"] = bool(abs(ratio(gre) - 1.0) < abs(ratio(bssfp_hat) - 1.0))
    m["t2s_bssfp_blood_brighter"] = bool(contrast(t2s.translated, labels) > 0)
    io.write_metrics_csv(out / "metrics.csv", [{"metric": k, "value": v} for k, v in m.items()],
                         ["metric", "value"])
    return m


def cmd_demo(args) -> int:
    out = Path(args.out)
    m = run_demo(args.seed, out, args.size, args.steps, args.xi)
    for k, v in m.items():
        print(f"{k},{v}")
    _write_manifest(out, "demo", _args_dict(args))
    return 0


# parser

def _add_sequence_flags(p):
    p.add_argument("--seq", "--sequence", dest="sequence",
                   help="sequence JSON (inline or file); flip_angle in degrees")
    p.add_argument("--kind", choices=["bssfp", "molli", "gre", "msasha", "linear"])
    p.add_argument("--flip-angle", dest="flip_angle", type=float, help="degrees")
    p.add_argument("--t-inv", dest="t_inv", type=float, help="ms")
    p.add_argument("--tr", type=float, help="ms")
    p.add_argument("--te", type=float, help="ms")
    p.add_argument("--ts", type=float, help="ms (inf allowed)")
    p.add_argument("--td", type=float, help="ms")
    p.add_argument("--mode", choices=["physical", "paper_verbatim"],
                   help="mSASHA saturation-recovery exponent convention")


def _add_guidance_flags(p, xi_default=400.0):
    p.add_argument("--xi", type=float, default=xi_default)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--gradient", choices=["analytic", "finite_difference"], default="analytic")
    p.add_argument("--jacobian", choices=["constant_eps", "exact"], default="exact")
    p.add_argument("--reduction", choices=["sum", "mean", "relative"], default="relative")
    p.add_argument("--intensity", choices=["none", "max"], default="none")
    p.add_argument("--normalize-residual", action="store_true")
    p.add_argument("--no-clamp", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinrev", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spinrev {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv per-step debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a labelled cardiac phantom spin map")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-level", type=float, default=0.0)
    p.add_argument("--smoothness", type=float, default=0.0)
    p.add_argument("--spec", "--config", dest="config",
                   help="PhantomSpec JSON (inline or file); overrides the flags")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="forward-simulate an image (or an mSASHA stack)")
    p.add_argument("--spinmap", required=True)
    _add_sequence_flags(p)
    p.add_argument("--protocol", choices=["msasha"], help="simulate the default 8-image mSASHA stack")
    p.add_argument("--noise", "--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-msasha", help="voxel-wise (A, T1, T2) fit of an mSASHA stack")
    p.add_argument("--stack", required=True, help="directory of img_*.f32/json")
    p.add_argument("--config", help="FitConfig JSON (inline or file)")
    p.add_argument("--bounds", help='JSON like {"t1": [50, 3000], "t2": [5, 500]}; overrides --config')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("build-prior", help="sample bank + KDE score description from a spin map")
    p.add_argument("--spinmap", required=True)
    p.add_argument("--per-class", type=int, default=DEFAULT_PER_CLASS)
    p.add_argument("--bandwidth", type=_bandwidth, default=DEFAULT_BANDWIDTH)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_prior)

    p = sub.add_parser("sample", help="unconditional spin-map sample from a score model")
    p.add_argument("--score", required=True, help="score JSON")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--n", type=int, default=1, help="number of independent samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reverse", help="infer a spin map from one observed image")
    p.add_argument("--image", required=True)
    p.add_argument("--score", required=True, help="score JSON")
    _add_guidance_flags(p)
    p.add_argument("--t2s", action="store_true", help="target-to-source mode")
    p.add_argument("--source", help="source sequence JSON for --t2s rendering (degrees)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reverse)

    p = sub.add_parser("synthesize", help="render a spin map under a recipe of sequences")
    p.add_argument("--spinmap", required=True)
    p.add_argument("--recipe", help="AugmentationRecipe JSON; default: 11-point MOLLI sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="RMSE/PSNR (and orderings) between two rasters")
    p.add_argument("--a", required=True, help="reference")
    p.add_argument("--b", required=True, help="estimate")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="end-to-end phantom workflow")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--xi", type=float, default=400.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpinrevError as exc:
        print(f"spinrev {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"spinrev {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
