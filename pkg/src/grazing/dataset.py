"""Field time series: data model, preprocessing rules, normalization and splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LinearRing, Polygon

CHIP_SIZE = 45
BAND_NAMES = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12")
N_BANDS = len(BAND_NAMES)
FIRST_DAY, LAST_DAY = 91, 304  # April 1 .. October 31 (non-leap day numbering)
GRAZING, NO_ACTIVITY = 1, 0
LABEL_NAMES = {GRAZING: "grazing", NO_ACTIVITY: "no_activity"}
MIN_POLYGON_PIXELS = 9
CLOUD_THRESHOLD = 0.01
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FieldPolygon:
    """Field boundary in pixel coordinates of the chip; pixel ``(r, c)`` has center ``(c + .5, r + .5)``."""

    vertices: tuple[tuple[float, float], ...]
    site_id: str = ""
    location: tuple[float, float] | None = None

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError(f"polygon {self.site_id!r} needs at least 3 vertices, got {len(verts)}")
        if Polygon(verts).area <= 0.0:
            raise ValueError(f"polygon {self.site_id!r} is degenerate (zero area)")
        if not LinearRing(verts).is_simple:
            raise ValueError(f"polygon {self.site_id!r} is self-intersecting")

    def transformed(self, sx: float = 1.0, tx: float = 0.0, sy: float = 1.0, ty: float = 0.0) -> "FieldPolygon":
        if sx == 0.0 or sy == 0.0:
            raise ValueError("axis scale factors must be nonzero")
        # a nonsingular axis-aligned affine map keeps the polygon simple, so skip revalidation
        out = object.__new__(FieldPolygon)
        object.__setattr__(out, "vertices", tuple((sx * x + tx, sy * y + ty) for x, y in self.vertices))
        object.__setattr__(out, "site_id", self.site_id)
        object.__setattr__(out, "location", self.location)
        return out


@dataclass(frozen=True)
class ImageFrame:
    day_of_year: int
    reflectance: np.ndarray
    cloud_mask: np.ndarray


@dataclass
class SampleTimeSeries:
    """One labelled field: stacked frames plus the rasterized polygon.

    ``reflectance`` is ``(T, H, W, C)`` float32, ``cloud_mask`` is ``(T, H, W)`` bool,
    ``days`` is ``(T,)``. ``polygon_mask`` is authoritative for everything downstream;
    after a random crop the vertices no longer describe it.
    """

    site_id: str
    label: int
    year: int
    polygon: FieldPolygon
    polygon_mask: np.ndarray
    reflectance: np.ndarray
    cloud_mask: np.ndarray
    days: np.ndarray
    cluster: int | None = None
    location: tuple[float, float] | None = None

    @property
    def n_frames(self) -> int:
        return int(self.days.shape[0])

    @property
    def frames(self) -> list[ImageFrame]:
        return [ImageFrame(int(d), r, c) for d, r, c in zip(self.days, self.reflectance, self.cloud_mask)]

    @property
    def is_valid(self) -> bool:
        return self.n_frames >= 1 and int(self.polygon_mask.sum()) >= MIN_POLYGON_PIXELS

    def select_frames(self, keep) -> "SampleTimeSeries":
        keep = np.asarray(keep)
        return replace(self, reflectance=self.reflectance[keep], cloud_mask=self.cloud_mask[keep], days=self.days[keep])


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "ChannelStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def rasterize_polygon(polygon: FieldPolygon, height: int = CHIP_SIZE, width: int = CHIP_SIZE) -> np.ndarray:
    """Even-odd rule on pixel centers."""
    if Polygon(polygon.vertices).area <= 0.0:
        raise ValueError("cannot rasterize a zero-area polygon")
    py = (np.arange(height) + 0.5)[:, None]
    px = (np.arange(width) + 0.5)[None, :]
    inside = np.zeros((height, width), dtype=bool)
    verts = polygon.vertices
    for k in range(len(verts)):
        x1, y1 = verts[k]
        x2, y2 = verts[k - 1]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def cloudy_fraction(sample: SampleTimeSeries) -> np.ndarray:
    """Per-frame fraction of in-polygon pixels flagged cloudy."""
    mask = sample.polygon_mask
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"sample {sample.site_id!r} has an empty polygon mask")
    return (sample.cloud_mask & mask).sum(axis=(1, 2)) / n


def filter_cloudy_frames(sample: SampleTimeSeries, threshold: float = CLOUD_THRESHOLD) -> SampleTimeSeries:
    """Drop frames whose in-polygon cloud fraction is at least ``threshold``.

    The result may have zero frames; check :attr:`SampleTimeSeries.is_valid`.
    """
    return sample.select_frames(cloudy_fraction(sample) < threshold)


def reject_tiny_polygon(mask: np.ndarray) -> bool:
    """True when the rasterized polygon covers fewer than 3x3 pixels."""
    return int(np.count_nonzero(mask)) < MIN_POLYGON_PIXELS


def preprocess(sample: SampleTimeSeries, threshold: float = CLOUD_THRESHOLD) -> SampleTimeSeries | None:
    """Rasterize, cloud-filter, tiny-reject. Returns None for samples that must be dropped."""
    mask = rasterize_polygon(sample.polygon, *sample.polygon_mask.shape)
    if not np.array_equal(mask, sample.polygon_mask):
        sample = replace(sample, polygon_mask=mask)
    if not sample.polygon_mask.any():
        return None
    sample = filter_cloudy_frames(sample, threshold)
    if reject_tiny_polygon(sample.polygon_mask) or sample.n_frames == 0:
        return None
    return sample


def compute_channel_stats(samples: Iterable[SampleTimeSeries]) -> ChannelStats:
    """Population mean/std per band over in-polygon pixels of every frame.

    Per-sample partial sums are combined with ``math.fsum`` so the result does not
    depend on sample order.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("compute_channel_stats needs at least one sample")
    n_bands = samples[0].reflectance.shape[-1]
    counts, sums = [], [[] for _ in range(n_bands)]
    for s in samples:
        px = s.reflectance[:, s.polygon_mask, :].astype(np.float64).reshape(-1, n_bands)
        counts.append(px.shape[0])
        for c, v in enumerate(px.sum(axis=0)):
            sums[c].append(v)
    total = math.fsum(counts)
    if total == 0:
        raise ValueError("no in-polygon pixels to compute statistics from")
    mean = np.array([math.fsum(col) / total for col in sums])
    sq = [[] for _ in range(n_bands)]
    for s in samples:
        px = s.reflectance[:, s.polygon_mask, :].astype(np.float64).reshape(-1, n_bands)
        for c, v in enumerate(((px - mean) ** 2).sum(axis=0)):
            sq[c].append(v)
    std = np.sqrt(np.array([math.fsum(col) / total for col in sq]))
    return ChannelStats(mean, np.maximum(std, STD_FLOOR))


def normalize(reflectance: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (reflectance.astype(np.float64) - stats.mean) / stats.std


def normalize_and_mask(sample: SampleTimeSeries, stats: ChannelStats) -> np.ndarray:
    """``(T, H, W, C)`` float64: standardized inside the polygon, exactly 0 outside."""
    out = normalize(sample.reflectance, stats)
    out[:, ~sample.polygon_mask, :] = 0.0
    return out


def split_train_val(sites: Sequence, fraction: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Random site split that never separates sites sharing a cluster id.

    ``sites`` holds objects with ``site_id`` and ``cluster`` attributes (samples or
    manifest entries). The train side gets ``floor(fraction * n)`` sites when the
    cluster sizes allow it.
    """
    sites = list(sites)
    if len(sites) < 2:
        raise ValueError("need at least two sites to split")
    groups: dict = {}
    for s in sites:
        key = s.cluster if s.cluster is not None else ("site", s.site_id)
        groups.setdefault(key, []).append(s.site_id)
    keys = sorted(groups, key=repr)
    order = np.random.default_rng(seed).permutation(len(keys))
    target = int(math.floor(fraction * len(sites)))
    train: list[str] = []
    val: list[str] = []
    for k in order:
        members = groups[keys[k]]
        if len(train) + len(members) <= target:
            train.extend(members)
        else:
            val.extend(members)
    return sorted(train), sorted(val)


def index_by_site(samples: Iterable[SampleTimeSeries]) -> dict[str, SampleTimeSeries]:
    out = {}
    for s in samples:
        if s.site_id in out:
            raise ValueError(f"duplicate site id {s.site_id!r}")
        out[s.site_id] = s
    return out


def ndvi(reflectance: np.ndarray) -> np.ndarray:
    nir = reflectance[..., BAND_NAMES.index("B08")].astype(np.float64)
    red = reflectance[..., BAND_NAMES.index("B04")].astype(np.float64)
    return (nir - red) / np.maximum(nir + red, 1e-9)


__all__ = [
    "BAND_NAMES", "CHIP_SIZE", "ChannelStats", "FieldPolygon", "GRAZING", "ImageFrame", "NO_ACTIVITY",
    "SampleTimeSeries", "compute_channel_stats", "filter_cloudy_frames", "index_by_site", "ndvi",
    "normalize", "normalize_and_mask", "preprocess", "rasterize_polygon", "reject_tiny_polygon",
    "split_train_val",
]
