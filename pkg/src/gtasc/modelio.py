"""Model artifacts: BN folding, binary16 export, the ASCM container and size accounting.

ASCM layout (all little-endian)::

    "ASCM" | u16 version | u8 precision bits (32|16) | u32 n | n bytes UTF-8 JSON metadata
    u32 record count, then per record:
    u16 name length | name | u8 rank | rank x u32 dims | values (4 or 2 bytes each)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import FrontendConfig, NormStats
from .nn import ASCNet, BN_EPS, ModelSpec, StateError

MAGIC = b"ASCM"
VERSION = 1
PRECISIONS = {"binary32": (32, np.dtype("<f4")), "binary16": (16, np.dtype("<f2"))}
FP16_MAX = float(np.finfo(np.float16).max)

CHALLENGE_BUDGET_KB = 128.0
REPORTED_SIZE_KB = 95.96


class FormatError(ValueError):
    pass


@dataclass
class ModelArtifact:
    spec: ModelSpec
    precision: str
    params: dict[str, np.ndarray]
    classes: list[str] = field(default_factory=list)
    norm_stats: NormStats | None = None
    frontend: FrontendConfig | None = None

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        dt = PRECISIONS[self.precision][1]
        self.params = {k: np.asarray(v, dtype=dt) for k, v in self.params.items()}

    @property
    def folded(self) -> bool:
        return not self.spec.batchnorm

    def metadata(self) -> dict:
        ns = self.norm_stats
        return {
            "spec": self.spec.to_dict(),
            "classes": list(self.classes),
            "norm_stats": None if ns is None else {
                "mean": ns.mean.tolist(), "std": ns.std.tolist(), "count": ns.count},
            "frontend": None if self.frontend is None else self.frontend.to_dict(),
        }

    def __eq__(self, other):
        if not isinstance(other, ModelArtifact):
            return NotImplemented
        if self.precision != other.precision or self.metadata() != other.metadata():
            return False
        if list(self.params) != list(other.params):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.params.values(), other.params.values()))


def from_model(model: ASCNet, classes=(), norm_stats=None, frontend=None,
               precision="binary32") -> ModelArtifact:
    return ModelArtifact(model.spec, precision, model.state_dict(), list(classes), norm_stats, frontend)


def to_model(art: ModelArtifact, dtype=np.float32) -> ASCNet:
    model = ASCNet(art.spec, seed=0, dtype=dtype)
    model.load_state_dict({k: v.astype(dtype) for k, v in art.params.items()})
    return model


# -- batch-norm folding ----------------------------------------------------------

def fold_state(state: dict[str, np.ndarray], spec: ModelSpec, eps=BN_EPS):
    """Fold every conv -> BN pair into the conv; returns (state, spec without BN)."""
    if not spec.batchnorm:
        return dict(state), spec
    out = {}
    bn_keys = set()
    for b in range(1, spec.n_blocks + 1):
        for conv, bn in (("conv1", "bn1"), ("conv2", "bn2")):
            p = f"block{b}."
            names = [p + f"{bn}.{k}" for k in ("gamma", "beta", "running_mean", "running_var")]
            if any(n not in state for n in names):
                raise StateError(f"{p}{bn}: running statistics are not initialized")
            gamma, beta, mu, var = (np.asarray(state[n], dtype=np.float64) for n in names)
            scale = gamma / np.sqrt(var + eps)
            k = np.asarray(state[p + f"{conv}.kernel"], dtype=np.float64)
            bias = np.asarray(state[p + f"{conv}.bias"], dtype=np.float64)
            dt = np.asarray(state[p + f"{conv}.kernel"]).dtype
            out[p + f"{conv}.kernel"] = (k * scale).astype(dt)
            out[p + f"{conv}.bias"] = ((bias - mu) * scale + beta).astype(dt)
            bn_keys.update(names)
    for k, v in state.items():
        if k not in out and k not in bn_keys:
            out[k] = np.array(v)
    return out, replace(spec, batchnorm=False)


def fold_batchnorm(model: ASCNet) -> ASCNet:
    state, spec = fold_state(model.state_dict(), model.spec)
    folded = ASCNet(spec, seed=0, dtype=model.dtype)
    folded.load_state_dict(state)
    return folded


def fold_artifact(art: ModelArtifact) -> ModelArtifact:
    state, spec = fold_state({k: v.astype(np.float64) for k, v in art.params.items()}, art.spec)
    return replace(art, spec=spec, params=state)


# -- binary16 -------------------------------------------------------------------

def to_binary16(values) -> np.ndarray:
    """Round-to-nearest-even binary16; out-of-range values clamp to +-65504."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(v, -FP16_MAX, FP16_MAX).astype("<f2")


def quantize_binary16(art: ModelArtifact) -> ModelArtifact:
    return replace(art, precision="binary16",
                   params={k: to_binary16(v) for k, v in art.params.items()})


# -- serialization ----------------------------------------------------------------

def encode(art: ModelArtifact) -> bytes:
    bits, dt = PRECISIONS[art.precision]
    meta = json.dumps(art.metadata(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HB", VERSION, bits), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(art.params))]
    for name, v in art.params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}I", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf, source):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, source="<bytes>") -> ModelArtifact:
    r = _Reader(buf, source)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic at offset 0")
    version, bits = r.unpack("<HB", "header")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    precision = {32: "binary32", 16: "binary16"}.get(bits)
    if precision is None:
        raise FormatError(f"{source}: unknown precision {bits} at offset 6")
    dt = PRECISIONS[precision][1]
    (mlen,) = r.unpack("<I", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode())
        spec = ModelSpec.from_dict(meta["spec"])
        ns = meta["norm_stats"]
        stats = None if ns is None else NormStats(np.array(ns["mean"]), np.array(ns["std"]), ns["count"])
        frontend = None if meta["frontend"] is None else FrontendConfig.from_dict(meta["frontend"])
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: bad metadata block at offset {at}: {exc}") from None
    (count,) = r.unpack("<I", "record count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "record name length")
        name = r.take(nlen, "record name").decode()
        (rank,) = r.unpack("<B", "record rank")
        shape = r.unpack(f"<{rank}I", "record dims")
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take(n * dt.itemsize, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return ModelArtifact(spec, precision, params, meta["classes"], stats, frontend)


def save(art: ModelArtifact, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(art))
    tmp.replace(path)


def load(path) -> ModelArtifact:
    return decode(Path(path).read_bytes(), str(path))


# -- size accounting ------------------------------------------------------------

@dataclass(frozen=True)
class SizeReport:
    param_count: int
    nonzero_param_count: int
    payload_bytes: int
    total_bytes: int
    precision: str

    @property
    def payload_kb(self) -> float:
        return self.payload_bytes / 1000.0

    @property
    def payload_kib(self) -> float:
        return self.payload_bytes / 1024.0

    def lines(self) -> list[str]:
        return [
            f"precision {self.precision}",
            f"params {self.param_count}",
            f"nonzero_params {self.nonzero_param_count}",
            f"payload_bytes {self.payload_bytes}",
            f"total_bytes {self.total_bytes}",
            f"payload_kb {self.payload_kb:.2f}",
            f"payload_kib {self.payload_kib:.2f}",
            f"budget_kb {CHALLENGE_BUDGET_KB:.2f}",
            f"within_budget {'yes' if self.payload_kb < CHALLENGE_BUDGET_KB else 'no'}",
            f"reference_kb {REPORTED_SIZE_KB:.2f}",
            f"delta_vs_reference_pct {100.0 * (self.payload_kb / REPORTED_SIZE_KB - 1.0):+.2f}",
        ]


def size_report(art: ModelArtifact) -> SizeReport:
    """Parameter payload only; the container header is counted in ``total_bytes``."""
    itemsize = PRECISIONS[art.precision][1].itemsize
    count = sum(v.size for v in art.params.values())
    nonzero = sum(int(np.count_nonzero(v)) for v in art.params.values())
    return SizeReport(count, nonzero, count * itemsize, len(encode(art)), art.precision)


def export(art: ModelArtifact, precision="binary16", fold_bn=True) -> ModelArtifact:
    if fold_bn:
        art = fold_artifact(art)
    if precision == "binary16":
        art = quantize_binary16(art)
    elif precision != art.precision:
        art = replace(art, precision=precision)
    return art

