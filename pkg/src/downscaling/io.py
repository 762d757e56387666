"""Binary grid containers, run configuration, checkpoints and report files.

Container layout (all integers little-endian)::

    b"RSDF" | u16 version | u32 header length | header JSON | payload

The header is canonical JSON (sorted keys, compact separators). Its
``arrays`` entry lists ``{"name", "offset", "shape"}`` for every named array;
offsets are in bytes from the start of the payload, and the arrays must tile
the payload with no gaps or overlaps. Payload values are float32, row-major.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io as _io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"RSDF"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_container(arrays: dict, header: dict | None = None) -> bytes:
    header = dict(header or {})
    if "arrays" in header:
        raise ValueError("'arrays' is reserved in container headers")
    directory, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"array {name!r} contains NaN or Inf")
        b = np.ascontiguousarray(a, dtype=DTYPE).tobytes()
        directory.append({"name": str(name), "offset": offset, "shape": [int(s) for s in a.shape]})
        chunks.append(b)
        offset += len(b)
    header["arrays"] = directory
    hb = canonical_json(header)
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(chunks)


def decode_container(buf: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(buf) < _PREFIX.size:
        raise FormatError(f"truncated container: {len(buf)} bytes, prefix needs {_PREFIX.size}")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise FormatError(f"header length {hlen} at offset 6 runs past end of file ({len(buf)} bytes)")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header at offset {_PREFIX.size} is not valid JSON: {e}") from None
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise FormatError("header lacks an 'arrays' directory")
    payload = memoryview(buf)[start:]
    arrays, expect = OrderedDict(), 0
    for entry in header["arrays"]:
        try:
            name, off, shape = entry["name"], int(entry["offset"]), tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed directory entry {entry!r}") from None
        n = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if off != expect:
            kind = "overlap" if off < expect else "gap"
            raise FormatError(f"array {name!r}: {kind} at payload offset {off}, expected {expect}")
        if off + n > len(payload):
            raise FormatError(f"array {name!r}: truncated payload, needs bytes {off}..{off + n} "
                              f"of {len(payload)}")
        arrays[name] = np.frombuffer(payload[off:off + n], dtype=DTYPE).reshape(shape).copy()
        expect = off + n
    if expect != len(payload):
        raise FormatError(f"{len(payload) - expect} trailing payload bytes after offset {expect}")
    del header["arrays"]
    return arrays, header


def write_container(path, arrays: dict, header: dict | None = None) -> str:
    """Write atomically; returns the SHA-256 of the bytes written."""
    data = encode_container(arrays, header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_container(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# run configuration --------------------------------------------------------

@dataclass
class DataSection:
    scenario: str = "grf"
    size: int = 128
    factor: int = 8
    amplitude: float = 0.3
    slope_large: float = 4.0
    slope_small: float = 5 / 3
    topo_seed: int = 0
    bias_blur: float = 0.0
    bias_damping: float = 0.0
    vortex_rmax: float = 12.0
    vortex_vmax: float = 3.0
    vortex_decay: float = 0.6
    front_width: float = 3.0
    front_jump: float = 3.0
    front_convergence: float = 1.5
    background: float = 0.3
    convergence_gain: float = 4.0
    n_scenes: int = 500
    seed: int = 0


@dataclass
class TrainSection:
    depth: int = 4
    base_width: int = 32
    channel_mult: str = "1,2,2,2"
    noise_width: int = 64
    lr: float = 2e-4
    batch_size: int = 16
    n_samples: int = 200_000
    lr_warmup: int = 0
    ema_halflife: float = 500_000.0
    ema_rampup: float = 0.05
    dropout: float = 0.0
    seed: int = 0


@dataclass
class SamplingSection:
    n_steps: int = 18
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    s_churn: float = 2.5
    s_noise: float = 1.0
    members: int = 32
    seed: int = 0


@dataclass
class EvalSection:
    n_boot: int = 1000
    pdf_bins: int = 60
    seed: int = 0


SECTIONS = {"data": DataSection, "regression": TrainSection, "diffusion": TrainSection,
            "sampling": SamplingSection, "eval": EvalSection}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class RunConfig:
    data: DataSection
    regression: TrainSection
    diffusion: TrainSection
    sampling: SamplingSection
    eval: EvalSection

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(DataSection(), TrainSection(), TrainSection(n_samples=400_000, seed=1),
                   SamplingSection(), EvalSection())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e).splitlines()[0]) from None
        cfg = cls.default()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            obj = getattr(cfg, sec)
            names = {f.name for f in fields(obj)}
            for key, raw in cp.items(sec):
                if key not in names:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                setattr(obj, key, _coerce(raw, getattr(obj, key), f"{sec}.{key}"))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = []
        for sec in SECTIONS:
            out.append(f"[{sec}]")
            for k, v in asdict(getattr(self, sec)).items():
                out.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
            out.append("")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {sec: asdict(getattr(self, sec)) for sec in SECTIONS}


# reports ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.9g" % v
    return str(v)


def csv_bytes(rows: list[dict], columns: list[str] | None = None) -> bytes:
    if not rows:
        return b""
    columns = columns or list(rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue().encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def report_json(report: dict) -> bytes:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2, allow_nan=False).encode() + b"\n"


def emit_report(report: dict, directory, name: str = "report") -> list[Path]:
    """Write ``<name>.json`` and, for every list-of-rows entry, ``<name>_<key>.csv``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {d}: {e}") from None
    paths = [d / f"{name}.json"]
    paths[0].write_bytes(report_json(report))
    for key, val in report.items():
        if isinstance(val, list) and val and isinstance(val[0], dict):
            p = d / f"{name}_{key}.csv"
            p.write_bytes(csv_bytes(_jsonable(val)))
            paths.append(p)
    return paths
