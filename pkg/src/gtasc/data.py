"""DCASE-style metadata, PCM WAV I/O, feature caching and a synthetic stand-in corpus."""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .dsp import AudioClip, FrontendConfig

SCENE_CLASSES = (
    "airport", "bus", "metro", "metro_station", "park",
    "public_square", "shopping_mall", "street_pedestrian", "street_traffic", "tram",
)
TAU_DEVICES = ("a", "b", "c", "s1", "s2", "s3", "s4", "s5", "s6")
SYNTH_DEVICES = ("d0", "d1", "d2")
KNOWN_DEVICES = TAU_DEVICES + SYNTH_DEVICES
SPLITS = ("train", "val", "test")

MANIFEST = "manifest.tsv"
SPLIT_INDEX = "index.tsv"
FRONTEND_FILE = "frontend.json"


class MetadataError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


class SampleRateError(WavFormatError):
    pass


@dataclass(frozen=True)
class DatasetEntry:
    path: str
    scene_label: str
    city: str
    device_id: str
    split: str = "train"

    @property
    def stem(self) -> str:
        return PurePosixPath(self.path).stem


@dataclass
class DatasetIndex:
    entries: list[DatasetEntry] = field(default_factory=list)
    classes: tuple[str, ...] = SCENE_CLASSES
    devices: tuple[str, ...] = KNOWN_DEVICES

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise MetadataError(f"duplicate path {e.path}")
            seen.add(e.path)
            if e.scene_label not in self.classes:
                raise MetadataError(f"{e.path}: unknown scene label {e.scene_label!r}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> "DatasetIndex":
        return DatasetIndex([e for e in self.entries if e.split == name], self.classes, self.devices)

    def label_ids(self) -> np.ndarray:
        lut = {c: i for i, c in enumerate(self.classes)}
        return np.array([lut[e.scene_label] for e in self.entries], dtype=np.int64)

    def __add__(self, other: "DatasetIndex") -> "DatasetIndex":
        return DatasetIndex(self.entries + other.entries, self.classes, self.devices)


# -- metadata ----------------------------------------------------------------

def parse_filename(path: str) -> tuple[str, str, str]:
    """(scene, city, device) from ``scene-city-location-segment-device.wav``."""
    stem = PurePosixPath(path).stem
    parts = stem.split("-")
    if len(parts) != 5:
        raise MetadataError(f"{path}: expected scene-city-location-segment-device naming")
    return parts[0], parts[1], parts[4]


def parse_metadata(tsv_text: str, split: str = "train") -> DatasetIndex:
    """Parse ``filename<TAB>scene_label`` rows; the header row is optional."""
    if split not in SPLITS:
        raise MetadataError(f"unknown split {split!r}")
    entries = []
    for lineno, raw in enumerate(tsv_text.splitlines(), start=1):
        line = raw.rstrip()
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise MetadataError(f"line {lineno}: expected 2 tab-separated fields, got {len(cols)}")
        path, label = cols[0].strip(), cols[1].strip()
        if lineno == 1 and (path, label) == ("filename", "scene_label"):
            continue
        try:
            _, city, device = parse_filename(path)
        except MetadataError as exc:
            raise MetadataError(f"line {lineno}: {exc}") from None
        if device not in KNOWN_DEVICES:
            raise MetadataError(f"line {lineno}: unknown device token {device!r}")
        if label not in SCENE_CLASSES:
            raise MetadataError(f"line {lineno}: unknown scene label {label!r}")
        entries.append(DatasetEntry(path, label, city, device, split))
    try:
        return DatasetIndex(entries)
    except MetadataError as exc:
        raise MetadataError(f"metadata: {exc}") from None


def serialize_metadata(index: DatasetIndex) -> str:
    lines = ["filename\tscene_label"]
    lines += [f"{e.path}\t{e.scene_label}" for e in index]
    return "\n".join(lines) + "\n"


def load_metadata(path, split="train") -> DatasetIndex:
    return parse_metadata(Path(path).read_text(), split)


# -- WAV ---------------------------------------------------------------------

_PCM = 1
_EXTENSIBLE = 0xFFFE


def decode_wav(buf: bytes, source: str = "<bytes>", expected_rate: int | None = 44100) -> AudioClip:
    """Mono 16/24-bit integer PCM RIFF/WAVE -> samples in [-1, 1)."""
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavFormatError(f"{source}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid, size = buf[pos:pos + 4], struct.unpack_from("<I", buf, pos + 4)[0]
        body = buf[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{source}: chunk {cid!r} truncated at offset {pos}")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavFormatError(f"{source}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{source}: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if tag != _PCM:
        raise WavFormatError(f"{source}: format tag {tag:#x} is not integer PCM")
    if channels != 1:
        raise WavFormatError(f"{source}: {channels} channels, only mono is supported")
    if bits not in (16, 24):
        raise WavFormatError(f"{source}: {bits}-bit samples unsupported (16 or 24 only)")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateError(f"{source}: sample rate {rate} Hz, expected {expected_rate} Hz")
    width = bits // 8
    n = len(data) // width
    raw = np.frombuffer(data, dtype=np.uint8, count=n * width)
    if bits == 16:
        ints = raw.view("<i2").astype(np.int32)
    else:
        b = raw.reshape(n, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints & 0x800000, ints - (1 << 24), ints)
    return AudioClip(ints / float(1 << (bits - 1)), rate)


def read_wav(path, expected_rate: int | None = 44100) -> AudioClip:
    return decode_wav(Path(path).read_bytes(), str(path), expected_rate)


def encode_wav(samples, sample_rate=44100, bits=24) -> bytes:
    if bits not in (16, 24):
        raise ValueError("bits must be 16 or 24")
    full = (1 << (bits - 1))
    x = np.clip(np.round(np.asarray(samples, dtype=np.float64) * full), -full, full - 1).astype(np.int32)
    if bits == 16:
        payload = x.astype("<i2").tobytes()
    else:
        u = x.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
        payload = np.ascontiguousarray(u).tobytes()
    width = bits // 8
    fmt = struct.pack("<HHIIHH", _PCM, 1, sample_rate, sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples, sample_rate=44100, bits=24) -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, bits))


# -- synthetic corpus ----------------------------------------------------------

# one-pole low-pass coefficient per simulated device
DEVICE_TILT = {"d0": 0.0, "d1": 0.5, "d2": 0.8}
SYNTH_CITIES = ("alpha", "bravo", "charlie")


def synth_clip(class_id, device, rng, duration_s=10.0, sample_rate=44100):
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = 200.0 * (class_id + 1)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    # the fundamental dominates (6 dB above the fifth) so each class has an unambiguous peak band
    tone = np.sin(2 * np.pi * f0 * t + phases[0]) + 0.5 * np.sin(2 * np.pi * 1.5 * f0 * t + phases[1])
    noise = rng.standard_normal(n) * np.sqrt(np.mean(tone ** 2)) * 0.1  # -20 dB
    x = tone + noise
    a = DEVICE_TILT[device]
    if a:
        x = lfilter([1.0 - a], [1.0, -a], x)
    amp = rng.uniform(0.3, 0.8)
    return amp * x / np.max(np.abs(x))


def synth_dataset(out_dir, seed=42, clips_per_class=30, duration_s=10.0,
                  val_fraction=0.2) -> DatasetIndex:
    """Write a deterministic 10-class corpus of 24-bit WAVs plus DCASE-style metadata.

    Files are named ``scene-city-location-segment-device.wav``. The 80/20
    train/val assignment is stratified by (class, device).
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k, scene in enumerate(SCENE_CLASSES):
        by_device: dict[str, list[DatasetEntry]] = {d: [] for d in SYNTH_DEVICES}
        for j in range(clips_per_class):
            device = SYNTH_DEVICES[j % len(SYNTH_DEVICES)]
            city = SYNTH_CITIES[(j // len(SYNTH_DEVICES)) % len(SYNTH_CITIES)]
            name = f"audio/{scene}-{city}-{k}-{j}-{device}.wav"
            write_wav(out / name, synth_clip(k, device, rng, duration_s))
            by_device[device].append(DatasetEntry(name, scene, city, device, "train"))
        for group in by_device.values():
            n_val = _val_count(len(group), val_fraction)
            for i, e in enumerate(group):
                entries.append(replace(e, split="val") if i >= len(group) - n_val else e)
    index = DatasetIndex(entries)
    (out / "meta.tsv").write_text(serialize_metadata(index))
    (out / "train.tsv").write_text(serialize_metadata(index.split("train")))
    (out / "val.tsv").write_text(serialize_metadata(index.split("val")))
    return index


def _val_count(group_size, val_fraction):
    """Rounded share of a group held out; any group of two or more keeps at least one."""
    n = int(round(group_size * val_fraction))
    return max(n, 1) if val_fraction > 0 and group_size > 1 else n


def stratified_split(index: DatasetIndex, val_fraction=0.2, seed=0) -> DatasetIndex:
    """Reassign splits 80/20 within every (class, device) group."""
    rng = np.random.default_rng(seed)
    groups: dict[tuple, list[int]] = {}
    for i, e in enumerate(index):
        groups.setdefault((e.scene_label, e.device_id), []).append(i)
    split = ["train"] * len(index)
    for key in sorted(groups):
        ids = groups[key]
        n_val = _val_count(len(ids), val_fraction)
        for i in rng.permutation(ids)[:n_val]:
            split[i] = "val"
    return DatasetIndex([replace(e, split=s) for e, s in zip(index, split)], index.classes, index.devices)


# -- feature cache -------------------------------------------------------------

def config_fingerprint(cfg: FrontendConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def content_hash(cfg: FrontendConfig, audio: bytes) -> str:
    h = hashlib.sha256(config_fingerprint(cfg).encode())
    h.update(audio)
    return h.hexdigest()


@dataclass
class CacheReport:
    manifest: dict[str, tuple[str, str]]
    computed: int = 0
    hits: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total(self):
        return self.computed + self.hits + len(self.failures)


def read_manifest(cache_dir) -> dict[str, tuple[str, str]]:
    path = Path(cache_dir) / MANIFEST
    if not path.exists():
        return {}
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise MetadataError(f"{path}: line {lineno}: expected 3 fields")
        out[cols[0]] = (cols[1], cols[2])
    return out


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_manifest(cache_dir, manifest: dict[str, tuple[str, str]]):
    lines = [f"{p}\t{f}\t{h}\n" for p, (f, h) in sorted(manifest.items())]
    _write_atomic(Path(cache_dir) / MANIFEST, "".join(lines))


def read_cache_index(cache_dir) -> DatasetIndex:
    """Entries (with split) recorded by previous extract runs."""
    path = Path(cache_dir) / SPLIT_INDEX
    if not path.exists():
        return DatasetIndex([])
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields_ = line.split("\t")
        if len(fields_) != 3 or fields_[2] not in SPLITS:
            raise MetadataError(f"{path}: line {lineno}: expected path<TAB>label<TAB>split")
        p, label, split = fields_
        _, city, device = parse_filename(p)
        entries.append(DatasetEntry(p, label, city, device, split))
    try:
        return DatasetIndex(entries)
    except MetadataError as exc:
        raise MetadataError(f"{path}: {exc}") from None


def write_cache_index(cache_dir, index: DatasetIndex):
    lines = [f"{e.path}\t{e.scene_label}\t{e.split}\n" for e in sorted(index, key=lambda e: e.path)]
    _write_atomic(Path(cache_dir) / SPLIT_INDEX, "".join(lines))


def read_frontend(cache_dir) -> FrontendConfig | None:
    path = Path(cache_dir) / FRONTEND_FILE
    return FrontendConfig.from_dict(json.loads(path.read_text())) if path.exists() else None


def _extract_one(job):
    path, audio_path, cache_file, cfg = job
    try:
        audio = Path(audio_path).read_bytes()
        digest = content_hash(cfg, audio)
        clip = decode_wav(audio, str(audio_path), cfg.sample_rate)
        dsp.save_features(dsp.gammatonegram(clip, cfg), cache_file)
        return path, digest, None
    except (OSError, ValueError) as exc:
        return path, None, str(exc)


def cache_features(index: DatasetIndex, audio_root, cache_dir, cfg: FrontendConfig = FrontendConfig(),
                   jobs: int = 1, progress=None) -> CacheReport:
    """Compute a ``.gtf`` file per clip, skipping entries whose (config, audio) hash is unchanged."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    audio_root = Path(audio_root)
    old = read_manifest(cache_dir)
    prev_cfg = read_frontend(cache_dir)
    if prev_cfg is not None and prev_cfg != cfg:
        old = {}
    report = CacheReport(manifest=dict(old) if prev_cfg == cfg else {})
    stems = {}
    todo = []
    for e in index:
        cache_file = e.stem + ".gtf"
        if stems.setdefault(cache_file, e.path) != e.path:
            raise MetadataError(f"{e.path}: cache name collides with {stems[cache_file]}")
        audio_path = audio_root / e.path
        prior = old.get(e.path)
        if prior is not None and (cache_dir / prior[0]).exists():
            try:
                digest = content_hash(cfg, audio_path.read_bytes())
            except OSError as exc:
                report.failures.append((e.path, str(exc)))
                report.manifest.pop(e.path, None)
                continue
            if digest == prior[1]:
                report.hits += 1
                continue
        todo.append((e.path, audio_path, cache_dir / cache_file, cfg))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, todo))
    else:
        results = [_extract_one(j) for j in todo]
    for (path, _, cache_file, _), (_, digest, err) in zip(todo, results):
        if err is not None:
            report.failures.append((path, err))
            report.manifest.pop(path, None)
        else:
            report.computed += 1
            report.manifest[path] = (cache_file.name, digest)
        if progress:
            progress(path, err)

    write_manifest(cache_dir, report.manifest)
    _write_atomic(cache_dir / FRONTEND_FILE, json.dumps(cfg.to_dict(), sort_keys=True))
    known = {e.path: e for e in read_cache_index(cache_dir)} if prev_cfg == cfg else {}
    known.update({e.path: e for e in index if e.path in report.manifest})
    write_cache_index(cache_dir, DatasetIndex([e for p, e in known.items() if p in report.manifest]))
    return report


def load_cached(cache_dir, entries) -> list[dsp.FeatureMatrix]:
    manifest = read_manifest(cache_dir)
    out = []
    for e in entries:
        if e.path not in manifest:
            raise MetadataError(f"{e.path}: not in feature cache {cache_dir}")
        out.append(dsp.load_features(Path(cache_dir) / manifest[e.path][0]))
    return out


def write_predictions(path, rows) -> None:
    lines = ["filename,scene_label"] + [f"{f},{label}" for f, label in rows]
    Path(path).write_text("\n".join(lines) + "\n")
