import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from downscaling.checkpoint import load_diffusion, load_regressor, save_diffusion, save_regressor
from downscaling.io import (
    ConfigError, FormatError, RunConfig, canonical_json, csv_bytes, decode_container, emit_report,
    encode_container, file_sha256, read_container, report_json, write_container,
)
from downscaling.regression import DataError


def _blob(arrays=None, header=None):
    return encode_container(arrays or {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}, header)


def test_container_layout():
    buf = _blob(header={"k": 1})
    magic, version, hlen = struct.unpack_from("<4sHI", buf)
    assert magic == b"RSDF" and version == 1
    h = json.loads(buf[10:10 + hlen])
    assert h["arrays"] == [{"name": "a", "offset": 0, "shape": [2, 3]},
                           {"name": "b", "offset": 24, "shape": [2]}]
    assert len(buf) == 10 + hlen + 32
    assert np.frombuffer(buf[10 + hlen:], "<f4")[:6].tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.dictionaries(st.text("abc", min_size=1, max_size=3), st.integers(-5, 5), max_size=3))
def test_container_roundtrip(a, header):
    arrays, h = decode_container(encode_container({"x": a, "y": a[..., :1]}, header))
    assert np.array_equal(arrays["x"], a) and arrays["y"].shape == a[..., :1].shape
    assert h == header


def test_header_is_canonical():
    assert encode_container({}, {"b": 1, "a": [1, 2]}) == encode_container({}, {"a": [1, 2], "b": 1})
    assert canonical_json({"b": 1, "a": 2}) == b'{"a":2,"b":1}'


def test_encode_rejects_nonfinite_and_reserved_key():
    with pytest.raises(ValueError):
        encode_container({"a": np.array([np.inf])})
    with pytest.raises(ValueError):
        encode_container({}, {"arrays": []})


@pytest.mark.parametrize("mutate,message", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:6], "truncated container"),
    (lambda b: b[:-4], "truncated payload"),
    (lambda b: b + b"\0\0\0\0", "trailing"),
    (lambda b: b[:6] + struct.pack("<I", 10 ** 6) + b[10:], "runs past end"),
])
def test_decode_errors_name_the_problem(mutate, message):
    with pytest.raises(FormatError, match=message):
        decode_container(mutate(_blob()))


def _with_directory(entries):
    hb = canonical_json({"arrays": entries})
    return struct.pack("<4sHI", b"RSDF", 1, len(hb)) + hb + b"\0" * 16


def test_decode_detects_gap_and_overlap():
    with pytest.raises(FormatError, match="gap"):
        decode_container(_with_directory([{"name": "a", "offset": 4, "shape": [3]}]))
    with pytest.raises(FormatError, match="overlap"):
        decode_container(_with_directory([{"name": "a", "offset": 0, "shape": [2]},
                                          {"name": "b", "offset": 4, "shape": [2]}]))
    with pytest.raises(FormatError, match="malformed"):
        decode_container(_with_directory([{"name": "a"}]))


def test_write_is_atomic_and_hashed(tmp_path):
    p = tmp_path / "x.rsdf"
    digest = write_container(p, {"a": np.ones(3)}, {"n": 1})
    assert digest == file_sha256(p)
    assert not (tmp_path / "x.rsdf.tmp").exists()
    arrays, h = read_container(p)
    assert h == {"n": 1} and arrays["a"].dtype == np.float32


def test_config_roundtrip_and_overrides():
    cfg = RunConfig.from_text("[data]\nscenario = vortex\nsize = 64\n\n[sampling]\ns_churn = 0.5\n")
    assert cfg.data.scenario == "vortex" and cfg.data.size == 64 and cfg.sampling.s_churn == 0.5
    assert cfg.diffusion.n_samples == 400_000
    again = RunConfig.from_text(cfg.to_text())
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[data]\nsizes = 3\n", "[data]\nsize = big\n",
                                  "no section\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_reports(tmp_path):
    rows = [{"k": 1, "v": 0.1}, {"k": 2, "v": float("nan")}]
    assert csv_bytes(rows) == b"k,v\n1,0.1\n2,nan\n"
    assert b'"v": null' in report_json({"rows": rows, "x": np.float32(2.5)})
    paths = emit_report({"rows": rows, "scalar": 3}, tmp_path / "r", "rep")
    assert [p.name for p in paths] == ["rep.json", "rep_rows.csv"]
    assert json.loads(paths[0].read_text())["scalar"] == 3


def test_checkpoint_roundtrip(tiny_models, tmp_path):
    train, test, reg, diff = tiny_models
    rp, dp = tmp_path / "reg.rsdf", tmp_path / "diff.rsdf"
    save_regressor(rp, reg)
    reg2 = load_regressor(rp)
    np.testing.assert_allclose(reg2.predict(test.coarse), reg.predict(test.coarse), rtol=1e-6)
    assert reg2.train_seeds_ == reg.train_seeds_ and reg2.get_params()["seed"] == reg.seed
    save_diffusion(dp, diff, reg_path=rp)
    diff2 = load_diffusion(dp, reg2, reg_path=rp)
    from downscaling.diffusion import NoiseSchedule

    sch = NoiseSchedule(n_steps=3, sigma_max=10.0)
    np.testing.assert_allclose(diff2.sample(test.coarse[:1], 2, 0, sch), diff.sample(test.coarse[:1], 2, 0, sch),
                               rtol=1e-5, atol=1e-6)
    with pytest.raises(FormatError):
        load_regressor(dp)
    with pytest.raises(FormatError):
        load_diffusion(rp, reg2)
    other = tmp_path / "other.rsdf"
    save_regressor(other, reg, extra={"note": "different bytes"})
    with pytest.raises(DataError):
        load_diffusion(dp, reg2, reg_path=other)
