import json
import math

import numpy as np
import pytest

from spinrev import io
from spinrev.errors import (
    IOFormatError,
    SidecarDimensionError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from spinrev.fitting import fit_msasha, simulate_stack
from spinrev.phantom import PhantomSpec, generate_phantom
from spinrev.physics import Gre, Image, Molli, Msasha, SpinMap, forward_image


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _random_spinmap(seed=0, shape=(7, 5)):
    rng = np.random.default_rng(seed)
    return SpinMap(_f32(rng.uniform(0, 1, shape)), _f32(rng.uniform(100, 2000, shape)),
                   _f32(rng.uniform(20, 90, shape)), rng.integers(0, 4, shape))


def _bits(a):
    return np.asarray(a, dtype=np.float64).tobytes()


def test_spinmap_round_trip_bit_identical(tmp_path):
    z = _random_spinmap()
    io.write_spinmap(tmp_path / "z", z, seed=3)
    b = io.read_spinmap(tmp_path / "z")
    for ch in ("pd", "t1", "t2"):
        assert _bits(getattr(b, ch)) == _bits(getattr(z, ch))
    assert np.array_equal(b.labels, z.labels)
    io.write_spinmap(tmp_path / "z2", b, seed=3)
    assert (tmp_path / "z.f32").read_bytes() == (tmp_path / "z2.f32").read_bytes()
    assert (tmp_path / "z.json").read_bytes() == (tmp_path / "z2.json").read_bytes()


def test_payload_layout(tmp_path):
    z = _random_spinmap(shape=(2, 3))
    io.write_spinmap(tmp_path / "z", z)
    raw = np.frombuffer((tmp_path / "z.f32").read_bytes(), dtype="<f4")
    assert raw.size == 2 * 3 * 4
    assert np.array_equal(raw[:6].reshape(2, 3), z.pd.astype(np.float32))
    side = json.loads((tmp_path / "z.json").read_text())
    assert side["width"] == 3 and side["height"] == 2 and side["channel_names"] == ["pd", "t1", "t2", "labels"]
    assert side["units"][:3] == ["a.u.", "ms", "ms"] and side["format_version"] == 1


@pytest.mark.parametrize("p", [Gre(0.3, 5.0, 1.5), Molli(0.6, 300.0), Msasha(math.inf, 30.0, 25.0)])
def test_image_round_trip(tmp_path, p):
    z = generate_phantom(PhantomSpec(16, 16, seed=2))
    im = forward_image(z, p, 0.01, seed=4)
    im.data = _f32(im.data)
    im.meta = {"note": "x", "k": [1, 2]}
    io.write_image(tmp_path / "im", im)
    b = io.read_image(tmp_path / "im")
    assert _bits(b.data) == _bits(im.data)
    assert b.params == p and b.noise_sigma == 0.01 and b.seed == 4 and b.meta == im.meta
    assert np.array_equal(b.labels, z.labels)


def test_bank_round_trip(tmp_path):
    bank = _f32(np.random.default_rng(1).uniform(-1, 1, (37, 3)))
    io.write_bank(tmp_path / "bank", bank, meta={"per_class": 9})
    b, meta = io.read_bank(tmp_path / "bank")
    assert _bits(b) == _bits(bank) and meta == {"per_class": 9}
    with pytest.raises(ValidationError):
        io.write_bank(tmp_path / "bad", np.zeros((3, 2)))


def test_fit_round_trip(tmp_path):
    z = generate_phantom(PhantomSpec(16, 16, seed=1, noise_level=0.05))
    res = fit_msasha(simulate_stack(z))
    for name in ("pd", "t1", "t2"):
        setattr(res.spinmap, name, _f32(getattr(res.spinmap, name)))
    res.residual = _f32(res.residual)
    res.start_residuals = _f32(res.start_residuals)
    io.write_fit(tmp_path / "fit", res)
    b = io.read_fit(tmp_path / "fit")
    assert _bits(b.spinmap.t1) == _bits(res.spinmap.t1)
    assert _bits(b.residual) == _bits(res.residual)
    assert np.array_equal(b.iterations, res.iterations) and np.array_equal(b.converged, res.converged)
    assert _bits(b.start_residuals) == _bits(res.start_residuals)


def test_wrong_object_kind(tmp_path):
    io.write_spinmap(tmp_path / "z", _random_spinmap())
    with pytest.raises(IOFormatError, match="spinmap"):
        io.read_image(tmp_path / "z")


def _edit_sidecar(path, **changes):
    side = json.loads(path.read_text())
    side.update(changes)
    path.write_text(json.dumps(side))


def test_dimension_mismatch_names_both_values(tmp_path):
    io.write_spinmap(tmp_path / "z", _random_spinmap(shape=(4, 4)))
    _edit_sidecar(tmp_path / "z.json", width=3)
    with pytest.raises(SidecarDimensionError) as info:
        io.read_spinmap(tmp_path / "z")
    msg = str(info.value)
    assert "48" in msg and "64" in msg


def test_truncated_payload(tmp_path):
    io.write_spinmap(tmp_path / "z", _random_spinmap())
    raw = (tmp_path / "z.f32").read_bytes()
    (tmp_path / "z.f32").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        io.read_spinmap(tmp_path / "z")


def test_unsupported_version(tmp_path):
    io.write_spinmap(tmp_path / "z", _random_spinmap())
    _edit_sidecar(tmp_path / "z.json", format_version=0)
    with pytest.raises(UnsupportedVersionError, match="format_version 0"):
        io.read_spinmap(tmp_path / "z")


def test_channel_name_count(tmp_path):
    io.write_spinmap(tmp_path / "z", _random_spinmap())
    _edit_sidecar(tmp_path / "z.json", channel_names=["pd"])
    with pytest.raises(SidecarDimensionError):
        io.read_spinmap(tmp_path / "z")


def test_missing_and_malformed(tmp_path):
    with pytest.raises(IOFormatError, match="missing"):
        io.read_spinmap(tmp_path / "nope")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(IOFormatError, match="malformed"):
        io.read_json(tmp_path / "bad.json")
    io.write_spinmap(tmp_path / "z", _random_spinmap())
    (tmp_path / "z.f32").unlink()
    with pytest.raises(IOFormatError, match="payload"):
        io.read_spinmap(tmp_path / "z")


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ValidationError):
        io.write_raster(tmp_path / "r", np.array([[[np.inf]]]), ["a"])
    with pytest.raises(ValidationError):
        io.write_raster(tmp_path / "r", np.zeros((2, 2, 2)), ["a"])


def test_json_is_canonical():
    assert io.dumps_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    with pytest.raises(ValueError):
        io.dumps_json({"a": float("nan")})


# previews

def test_preview_linear_map(tmp_path):
    path = io.export_raster_preview(np.array([[0.0, 1.0], [2.0, 3.0]]), tmp_path / "p")
    assert path.suffix == ".pgm"
    assert io.read_pgm(path).tolist() == [[0, 85], [170, 255]]
    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")


def test_preview_constant_is_mid_grey(tmp_path):
    assert np.all(io.read_pgm(io.export_raster_preview(np.full((3, 4), 7.0), tmp_path / "c.pgm")) == 128)


def test_preview_nan_writes_nothing(tmp_path):
    with pytest.raises(ValidationError):
        io.export_raster_preview(np.array([[0.0, np.nan]]), tmp_path / "n.pgm")
    assert not (tmp_path / "n.pgm").exists()


def test_read_pgm_errors(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(IOFormatError):
        io.read_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(TruncatedPayloadError):
        io.read_pgm(tmp_path / "b.pgm")


# csv and digests

def test_metrics_csv(tmp_path):
    rows = [{"metric": "rmse", "value": 0.1 + 0.2}, {"metric": "ok", "value": True},
            {"metric": "psnr", "value": math.inf}]
    io.write_metrics_csv(tmp_path / "m.csv", rows)
    back = io.read_metrics_csv(tmp_path / "m.csv")
    assert float(back[0]["value"]) == 0.1 + 0.2
    assert back[1]["value"] == "true" and back[2]["value"] == "inf"
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,value"


def test_tree_digests(tmp_path):
    io.write_spinmap(tmp_path / "a" / "z", _random_spinmap())
    d = io.tree_digests(tmp_path)
    assert sorted(d) == ["a/z.f32", "a/z.json"]
    assert d["a/z.f32"] == io.file_digest(tmp_path / "a" / "z.f32")
