"""On-disk formats: GRZ1 per-sample files, ``manifest.json`` and GRZM ensemble checkpoints.

All binary fields are little-endian and every file ends with a CRC32 of the bytes
before it.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ChannelStats, FieldPolygon, SampleTimeSeries
from .model import PARAM_ORDER, EnsembleParams, ModelConfig, ModelParams

SAMPLE_MAGIC = b"GRZ1"
CHECKPOINT_MAGIC = b"GRZM"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_SAMPLE_HEADER = struct.Struct("<4sHIIII")
_CKPT_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    """A file is not in the expected format (bad magic, version, length or checksum)."""


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _check_crc(data: bytes, path) -> bytes:
    if len(data) < 4:
        raise FormatError(f"{path}: truncated file ({len(data)} bytes)")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if _crc(body) != stored:
        raise FormatError(f"{path}: checksum mismatch (stored {stored:08x}, computed {_crc(body):08x})")
    return body


def encode_sample(sample: SampleTimeSeries) -> bytes:
    t, h, w, c = sample.reflectance.shape
    if sample.polygon_mask.shape != (h, w) or sample.cloud_mask.shape != (t, h, w) or sample.days.shape != (t,):
        raise ValueError(f"sample {sample.site_id!r} has inconsistent array shapes")
    parts = [
        _SAMPLE_HEADER.pack(SAMPLE_MAGIC, FORMAT_VERSION, t, h, w, c),
        np.ascontiguousarray(sample.reflectance, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.polygon_mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(sample.days, dtype="<u2").tobytes(),
        np.ascontiguousarray(sample.cloud_mask, dtype=np.uint8).tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", _crc(body))


@dataclass
class SampleArrays:
    reflectance: np.ndarray
    polygon_mask: np.ndarray
    days: np.ndarray
    cloud_mask: np.ndarray


def decode_sample(data: bytes, path="<bytes>") -> SampleArrays:
    if len(data) < _SAMPLE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, h, w, c = _SAMPLE_HEADER.unpack_from(data)
    if magic != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SAMPLE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    sizes = (t * h * w * c * 4, h * w, t * 2, t * h * w)
    expected = _SAMPLE_HEADER.size + sum(sizes) + 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for T={t} H={h} W={w} C={c}, found {len(data)}")
    body = _check_crc(data, path)
    off = _SAMPLE_HEADER.size
    chunks = []
    for n in sizes:
        chunks.append(body[off:off + n])
        off += n
    refl = np.frombuffer(chunks[0], dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    mask = np.frombuffer(chunks[1], dtype=np.uint8).reshape(h, w)
    days = np.frombuffer(chunks[2], dtype="<u2").astype(np.int64)
    clouds = np.frombuffer(chunks[3], dtype=np.uint8).reshape(t, h, w)
    if mask.max(initial=0) > 1 or clouds.max(initial=0) > 1:
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    return SampleArrays(refl, mask.astype(bool), days, clouds.astype(bool))


def save_sample(sample: SampleTimeSeries, path) -> int:
    """Write one GRZ1 file; returns its CRC32."""
    data = encode_sample(sample)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def load_sample_arrays(path) -> SampleArrays:
    return decode_sample(Path(path).read_bytes(), path)


@dataclass
class ManifestEntry:
    site_id: str
    label: int
    year: int
    path: str
    frames: int
    polygon: list
    cluster: int | None = None
    location: list | None = None

    def to_json(self) -> dict:
        return {"site_id": self.site_id, "label": self.label, "year": self.year, "path": self.path,
                "frames": self.frames, "polygon": self.polygon, "cluster": self.cluster,
                "location": self.location}


@dataclass
class DatasetManifest:
    samples: list[ManifestEntry]
    generator_config: dict | None = None
    seed: int | None = None
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.site_id for e in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest site ids are not unique")

    def to_json(self) -> dict:
        return {"version": self.version, "generator_config": self.generator_config, "seed": self.seed,
                "samples": [e.to_json() for e in self.samples]}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if d.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {d.get('version')!r}")
        entries = [ManifestEntry(e["site_id"], int(e["label"]), int(e["year"]), e["path"], int(e["frames"]),
                                 e["polygon"], e.get("cluster"), e.get("location")) for e in d["samples"]]
        return cls(entries, d.get("generator_config"), d.get("seed"))


def save_dataset(samples, out_dir, generator_config: dict | None = None, seed: int | None = None) -> DatasetManifest:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"samples/{s.site_id}.grz"
        save_sample(s, out / rel)
        entries.append(ManifestEntry(
            s.site_id, int(s.label), int(s.year), rel, s.n_frames,
            [list(v) for v in s.polygon.vertices], s.cluster,
            list(s.location) if s.location is not None else None))
    manifest = DatasetManifest(entries, generator_config, seed)
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST_NAME)
    return manifest


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(d)


def load_entry(data_dir, entry: ManifestEntry) -> SampleTimeSeries:
    arrays = load_sample_arrays(Path(data_dir) / entry.path)
    if arrays.days.shape[0] != entry.frames:
        raise FormatError(f"{entry.path}: header has T={arrays.days.shape[0]}, manifest says {entry.frames}")
    loc = tuple(entry.location) if entry.location is not None else None
    poly = FieldPolygon(tuple(tuple(v) for v in entry.polygon), entry.site_id, loc)
    return SampleTimeSeries(entry.site_id, entry.label, entry.year, poly, arrays.polygon_mask,
                            arrays.reflectance, arrays.cloud_mask, arrays.days, entry.cluster, loc)


def load_dataset(data_dir) -> tuple[DatasetManifest, list[SampleTimeSeries]]:
    """Raw samples as written; run :func:`grazing.dataset.preprocess` before training."""
    manifest = read_manifest(data_dir)
    return manifest, [load_entry(data_dir, e) for e in manifest.samples]


def _tensor_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(ensemble: EnsembleParams, path) -> None:
    header = {"model": ensemble.config.to_json(), "members": len(ensemble.members),
              "param_order": list(PARAM_ORDER),
              "stats": ensemble.stats.to_json() if ensemble.stats is not None else None,
              "meta": ensemble.meta}
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(blob)), blob]
    for m in ensemble.members:
        m.check(ensemble.config)
        parts.append(struct.pack("<Q", m.seed))
        parts.extend(_tensor_bytes(m.tensors[name]) for name in PARAM_ORDER)
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", _crc(body)))
    os.replace(tmp, path)


def load_checkpoint(path) -> EnsembleParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size + 4:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, n = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body = _check_crc(data, path)
    off = _CKPT_HEADER.size
    try:
        header = json.loads(body[off:off + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable config block") from exc
    off += n
    if header.get("param_order") != list(PARAM_ORDER):
        raise FormatError(f"{path}: parameter order {header.get('param_order')} is not supported")
    config = ModelConfig.from_json(header["model"])
    shapes = config.param_shapes()
    members = []
    for _ in range(header["members"]):
        if off + 8 > len(body):
            raise FormatError(f"{path}: truncated member block")
        (seed,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors = {}
        for name in PARAM_ORDER:
            size = int(np.prod(shapes[name])) * 8
            if off + size > len(body):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=off).reshape(shapes[name]).copy()
            off += size
        members.append(ModelParams(tensors, seed))
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} unexpected trailing bytes")
    stats = ChannelStats.from_json(header["stats"]) if header.get("stats") else None
    return EnsembleParams(config, members, stats, header.get("meta") or {})


__all__ = [
    "DatasetManifest", "FormatError", "ManifestEntry", "decode_sample", "encode_sample", "load_checkpoint",
    "load_dataset", "load_entry", "read_manifest", "save_checkpoint", "save_dataset", "save_sample",
]
