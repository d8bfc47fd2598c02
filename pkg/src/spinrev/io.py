"""Raw float32 rasters with JSON sidecars, PGM previews and metric CSVs.

Every object is stored as ``<name>.f32`` (little-endian float32, row-major,
one full plane per channel) plus ``<name>.json``. Values are persisted as
float32, so a write/read cycle is exact for float32-representable data and
re-writing what was read reproduces the files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import (
    IOFormatError,
    SidecarDimensionError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from .physics import UNITS, Image, SpinMap, params_from_dict, params_to_dict

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def dumps_json(obj) -> str:
    """Canonical JSON: sorted keys, fixed indent, no NaN/inf literals."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IOFormatError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise IOFormatError(f"malformed JSON in {path}: {exc}") from exc


def write_raster(path, planes: np.ndarray, channel_names, units=None, **extra) -> None:
    """Write a ``(C, H, W)`` stack; ``extra`` keys go into the sidecar."""
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise ValidationError(f"raster must be (C, H, W), got shape {planes.shape}")
    c, h, w = planes.shape
    names = list(channel_names)
    if len(names) != c:
        raise ValidationError(f"{c} channels but {len(names)} channel names")
    units = list(units) if units is not None else [""] * c
    if not np.all(np.isfinite(planes)):
        raise ValidationError("raster contains non-finite values")
    payload, sidecar = _paths(path)
    payload.parent.mkdir(parents=True, exist_ok=True)
    side = dict(extra)
    side.update(format_version=FORMAT_VERSION, width=int(w), height=int(h), channels=int(c),
                channel_names=names, units=units)
    payload.write_bytes(np.ascontiguousarray(planes, dtype=_DTYPE).tobytes())
    sidecar.write_text(dumps_json(side))


def read_raster(path) -> tuple[np.ndarray, dict]:
    """Return ``(planes, sidecar)``; ``planes`` is float64 of shape ``(C, H, W)``."""
    payload, sidecar = _paths(path)
    side = read_json(sidecar)
    version = side.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{sidecar}: format_version {version!r} is not supported (reader handles {FORMAT_VERSION})")
    try:
        w, h, c = int(side["width"]), int(side["height"]), int(side["channels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IOFormatError(f"{sidecar}: sidecar lacks integer width/height/channels") from exc
    if len(side.get("channel_names", [])) != c:
        raise SidecarDimensionError(
            f"{sidecar}: channels={c} but {len(side.get('channel_names', []))} channel names")
    try:
        raw = payload.read_bytes()
    except FileNotFoundError as exc:
        raise IOFormatError(f"missing payload {payload}") from exc
    expected = w * h * c * _DTYPE.itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{payload}: payload has {len(raw)} bytes, sidecar {w}x{h}x{c} needs {expected}")
    if len(raw) > expected:
        raise SidecarDimensionError(
            f"{payload}: sidecar says width*height*channels = {w}*{h}*{c} = {w * h * c} values "
            f"but the payload holds {len(raw) / _DTYPE.itemsize:g}")
    planes = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(c, h, w)
    return planes, side


def _labels_from(planes, side):
    names = side["channel_names"]
    if "labels" not in names:
        return None
    return np.rint(planes[names.index("labels")]).astype(np.int64)


def _expect(side, obj, path):
    if side.get("object") != obj:
        raise IOFormatError(f"{path}: holds a {side.get('object')!r}, expected {obj!r}")


# SpinMap

def write_spinmap(path, z: SpinMap, seed=None, meta=None) -> None:
    planes = [z.pd, z.t1, z.t2]
    names = ["pd", "t1", "t2"]
    units = list(UNITS)
    if z.labels is not None:
        planes.append(z.labels)
        names.append("labels")
        units.append("class")
    write_raster(path, np.stack(planes), names, units, object="spinmap", seed=seed, meta=meta or {})


def read_spinmap(path) -> SpinMap:
    planes, side = read_raster(path)
    _expect(side, "spinmap", path)
    names = side["channel_names"]
    get = lambda n: planes[names.index(n)]
    return SpinMap(get("pd"), get("t1"), get("t2"), _labels_from(planes, side))


# Image

def write_image(path, im: Image) -> None:
    planes = [im.data]
    names = ["signal"]
    units = ["a.u."]
    if im.labels is not None:
        planes.append(im.labels)
        names.append("labels")
        units.append("class")
    write_raster(path, np.stack(planes), names, units, object="image",
                 params=params_to_dict(im.params), noise_sigma=float(im.noise_sigma),
                 seed=im.seed, meta=im.meta or {})


def read_image(path) -> Image:
    planes, side = read_raster(path)
    _expect(side, "image", path)
    try:
        params = params_from_dict(side["params"])
    except KeyError as exc:
        raise IOFormatError(f"{path}: image sidecar lacks sequence params") from exc
    names = side["channel_names"]
    return Image(planes[names.index("signal")], params, float(side.get("noise_sigma", 0.0)),
                 _labels_from(planes, side), side.get("seed"), side.get("meta", {}))


def write_stack(directory, images, prefix: str = "img") -> list[str]:
    """Write images as ``<prefix>_000``, ``<prefix>_001``, ...; returns the stems."""
    directory = Path(directory)
    names = []
    for i, im in enumerate(images):
        name = f"{prefix}_{i:03d}"
        write_image(directory / name, im)
        names.append(name)
    return names


def read_stack(directory, prefix: str = "img") -> list[Image]:
    directory = Path(directory)
    stems = sorted(p.stem for p in directory.glob(f"{prefix}_*.json"))
    if not stems:
        raise IOFormatError(f"no {prefix}_*.json images in {directory}")
    return [read_image(directory / s) for s in stems]


# sample bank

def write_bank(path, bank: np.ndarray, meta=None) -> None:
    """A normalised ``(n, 3)`` bank, stored as a ``1 x n`` raster with 3 channels."""
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[1] != 3:
        raise ValidationError(f"sample bank must be (n, 3), got {bank.shape}")
    write_raster(path, bank.T[:, None, :], ["pd", "t1", "t2"], ["norm"] * 3, object="bank",
                 meta=meta or {})


def read_bank(path) -> tuple[np.ndarray, dict]:
    planes, side = read_raster(path)
    _expect(side, "bank", path)
    return planes[:, 0, :].T.copy(), side.get("meta", {})


# fit result

def write_fit(path, res) -> None:
    z = res.spinmap
    starts = res.start_residuals
    planes = [z.pd, z.t1, z.t2, res.residual, res.iterations.astype(float), res.converged.astype(float)]
    names = ["pd", "t1", "t2", "residual", "iterations", "converged"]
    units = list(UNITS) + ["a.u.^2", "count", "bool"]
    if starts is not None:
        for k in range(starts.shape[-1]):
            planes.append(starts[..., k])
            names.append(f"start_residual_{k}")
            units.append("a.u.^2")
    if z.labels is not None:
        planes.append(z.labels)
        names.append("labels")
        units.append("class")
    write_raster(path, np.stack(planes), names, units, object="fit")


def read_fit(path):
    from .fitting import FitResult

    planes, side = read_raster(path)
    _expect(side, "fit", path)
    names = side["channel_names"]
    get = lambda n: planes[names.index(n)]
    k = sorted(n for n in names if n.startswith("start_residual_"))
    starts = (np.stack([get(f"start_residual_{i}") for i in range(len(k))], axis=-1) if k else None)
    return FitResult(
        SpinMap(get("pd"), get("t1"), get("t2"), _labels_from(planes, side)),
        get("residual"),
        np.rint(get("iterations")).astype(np.int64),
        get("converged") > 0.5,
        starts,
    )


# previews and CSV

def preview_bytes(data) -> np.ndarray:
    """Min-max map onto 0..255; a constant raster maps to 128."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError(f"preview needs a 2D raster, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("preview input contains non-finite values")
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.full(data.shape, 128, dtype=np.uint8)
    return np.rint((data - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_raster_preview(data, path) -> Path:
    """Write an 8-bit binary PGM (P5). Nothing is written if ``data`` is not finite."""
    pix = preview_bytes(data)
    path = Path(path)
    if path.suffix != ".pgm":
        path = path.with_name(path.name + ".pgm")
    h, w = pix.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise IOFormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise IOFormatError(f"{path}: only 8-bit PGM is supported")
    body = parts[4]
    if len(body) != w * h:
        raise TruncatedPayloadError(f"{path}: {len(body)} pixel bytes, header says {w}x{h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if v == math.inf else "-inf" if v == -math.inf else repr(v)
    return str(v)


def write_metrics_csv(path, rows, columns=None) -> None:
    """CSV with a header row; floats are written with ``repr`` so values are exact."""
    rows = list(rows)
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c, "")) for c in columns])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digests(directory) -> dict:
    """``{relative path: sha256}`` for every file under ``directory``."""
    directory = Path(directory)
    out = {}
    for root, _, files in os.walk(directory):
        for f in sorted(files):
            p = Path(root) / f
            out[str(p.relative_to(directory))] = file_digest(p)
    return dict(sorted(out.items()))
