"""Synthetic polygon-labelled Sentinel-2-like time series.

Each site gets a double-logistic phenology curve for a latent vegetation index.
Grazed sites carry one or more grazing events: the index drops abruptly, stays
down while animals are on the field, then recovers linearly over several weeks.
The index is mapped affinely to 13 bands, white noise is added and random cloud
blobs are painted into some frames. Every site draws from its own random stream
keyed by ``(seed, site index)``, so output does not depend on generation order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import (
    BAND_NAMES, CHIP_SIZE, FIRST_DAY, GRAZING, LAST_DAY, MIN_POLYGON_PIXELS, NO_ACTIVITY,
    FieldPolygon, SampleTimeSeries, rasterize_polygon,
)

# reflectance = offset + slope * index, per band
BAND_OFFSET = np.array([0.12, 0.10, 0.10, 0.20, 0.15, 0.15, 0.15, 0.12, 0.12, 0.05, 0.005, 0.30, 0.25])
BAND_SLOPE = np.array([-0.06, -0.06, 0.02, -0.18, 0.05, 0.25, 0.35, 0.40, 0.40, 0.10, 0.0, -0.10, -0.15])
CLOUD_REFLECTANCE = np.array([0.75, 0.75, 0.75, 0.75, 0.72, 0.70, 0.70, 0.68, 0.68, 0.40, 0.30, 0.50, 0.40])

_STREAM_LABELS = 0
_STREAM_SITE = 1


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 407
    balance: float = 253 / 407  # fraction labelled grazing
    cadence_days: int = 5
    cadence_jitter: int = 2
    cloud_prob: float = 0.65
    noise: float = 0.02
    difficulty: float = 0.5
    chip_size: int = CHIP_SIZE
    years: tuple[int, ...] = (2022, 2024)
    max_cluster: int = 3

    def validate(self) -> "SynthConfig":
        problems = []
        if self.n_samples < 1:
            problems.append("n_samples must be >= 1")
        if not 0.0 <= self.balance <= 1.0:
            problems.append("balance must be in [0, 1]")
        if self.cadence_days < 1 or not 0 <= self.cadence_jitter < self.cadence_days:
            problems.append("need cadence_days >= 1 and 0 <= cadence_jitter < cadence_days")
        if not 0.0 <= self.cloud_prob <= 1.0:
            problems.append("cloud_prob must be in [0, 1]")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if not 0.0 <= self.difficulty <= 1.0:
            problems.append("difficulty must be in [0, 1]")
        if self.chip_size < 15:
            problems.append("chip_size must be >= 15")
        if not self.years or self.max_cluster < 1:
            problems.append("need at least one year and max_cluster >= 1")
        if problems:
            raise ValueError("invalid synthetic config: " + "; ".join(problems))
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["years"] = tuple(d.get("years", (2022, 2024)))
        return cls(**d)


@dataclass(frozen=True)
class Phenology:
    base: float
    peak: float
    green_up: float
    senescence: float
    rise: float
    fall: float
    # optional smooth stress dip that affects both classes
    dip_depth: float = 0.0
    dip_center: float = 200.0
    dip_width: float = 15.0

    def index(self, days) -> np.ndarray:
        d = np.asarray(days, dtype=np.float64)
        up = 1.0 / (1.0 + np.exp(-(d - self.green_up) / self.rise))
        down = 1.0 / (1.0 + np.exp(-(d - self.senescence) / self.fall))
        v = self.base + (self.peak - self.base) * (up - down)
        if self.dip_depth:
            v = v - self.dip_depth * np.exp(-0.5 * ((d - self.dip_center) / self.dip_width) ** 2)
        return v


@dataclass(frozen=True)
class GrazingEvent:
    day: float
    depth: float  # fractional drop of the index at onset
    hold: float  # days the index stays at its floor
    recovery: float  # days of linear recovery afterwards


def vegetation_curve(days, phenology: Phenology, events=()) -> np.ndarray:
    """Latent vegetation index on ``days`` with grazing events applied."""
    d = np.asarray(days, dtype=np.float64)
    base = phenology.index(d)
    out = base.copy()
    for ev in events:
        floor = float(phenology.index(ev.day)) * (1.0 - ev.depth)
        t = d - ev.day
        frac = np.clip((t - ev.hold) / ev.recovery, 0.0, 1.0)
        grazed = floor + (base - floor) * frac
        out = np.where(t >= 0, np.minimum(out, grazed), out)
    return np.maximum(out, 0.02)


def acquisition_days(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    days = []
    d = FIRST_DAY + int(rng.integers(0, cfg.cadence_days))
    while d <= LAST_DAY:
        days.append(d)
        d += cfg.cadence_days + int(rng.integers(-cfg.cadence_jitter, cfg.cadence_jitter + 1))
    return np.array(days, dtype=np.int64)


def random_phenology(rng: np.random.Generator, difficulty: float) -> Phenology:
    dip = difficulty > 0 and rng.random() < 0.5
    return Phenology(
        base=rng.uniform(0.28, 0.36),
        peak=rng.uniform(0.70, 0.85),
        green_up=rng.uniform(110, 140),
        senescence=rng.uniform(245, 285),
        rise=rng.uniform(6, 12),
        fall=rng.uniform(8, 15),
        dip_depth=0.3 * difficulty * rng.uniform(0.5, 1.0) if dip else 0.0,
        dip_center=rng.uniform(150, 260),
        dip_width=rng.uniform(10, 25),
    )


def random_events(rng: np.random.Generator, phenology: Phenology, difficulty: float) -> list[GrazingEvent]:
    n = 1 + int(rng.poisson(2.0))
    lo = max(120.0, phenology.green_up + 10)
    hi = min(280.0, phenology.senescence - 10)
    depth_center = 0.85 + (0.15 - 0.85) * difficulty
    return [
        GrazingEvent(
            day=rng.uniform(lo, hi),
            depth=float(np.clip(depth_center + rng.uniform(-0.05, 0.05), 0.05, 0.95)),
            hold=rng.uniform(7, 14),
            recovery=rng.uniform(21, 42),
        )
        for _ in range(n)
    ]


def random_polygon(rng: np.random.Generator, size: int, site_id: str) -> tuple[FieldPolygon, np.ndarray]:
    """Star-shaped (hence simple) polygon near the chip center with >= 9 pixels."""
    c = size / 2.0
    max_r = min(11.0, c - 4.0)
    for _ in range(100):
        k = int(rng.integers(4, 9))
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, k))
        if np.min(np.diff(np.r_[angles, angles[0] + 2 * np.pi])) < 0.2:
            continue
        r = rng.uniform(3.5, max_r) * rng.uniform(0.7, 1.0, k)
        cx, cy = c + rng.uniform(-3, 3), c + rng.uniform(-3, 3)
        verts = tuple((round(cx + ri * np.cos(a), 3), round(cy + ri * np.sin(a), 3)) for ri, a in zip(r, angles))
        try:
            poly = FieldPolygon(verts, site_id)
        except ValueError:
            continue
        mask = rasterize_polygon(poly, size, size)
        if mask.sum() >= MIN_POLYGON_PIXELS:
            return poly, mask
    raise RuntimeError(f"could not draw a polygon for {site_id}")


def _cloud_masks(rng: np.random.Generator, n_frames: int, size: int, prob: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    masks = np.zeros((n_frames, size, size), dtype=bool)
    for t in range(n_frames):
        if rng.random() >= prob:
            continue
        if rng.random() < 0.5:
            masks[t] = True  # overcast
            continue
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, size, 2)
            ry, rx = rng.uniform(4, 16, 2)
            masks[t] |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return masks


def generate_site(cfg: SynthConfig, seed: int, index: int, label: int, cluster: int,
                  location: tuple[float, float]) -> SampleTimeSeries:
    rng = np.random.default_rng([seed, _STREAM_SITE, index])
    size = cfg.chip_size
    site_id = f"site{index:04d}"
    polygon, mask = random_polygon(rng, size, site_id)
    days = acquisition_days(cfg, rng)
    pheno = random_phenology(rng, cfg.difficulty)
    events = random_events(rng, pheno, cfg.difficulty) if label == GRAZING else []
    field_index = vegetation_curve(days, pheno, events)

    # two background zones split by a random line, each with its own land cover
    zones = [random_phenology(rng, cfg.difficulty) for _ in range(2)]
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    side = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) > rng.uniform(-10, 10)
    index = np.empty((days.size, size, size))
    index[:, side] = zones[0].index(days)[:, None]
    index[:, ~side] = zones[1].index(days)[:, None]
    index[:, mask] = field_index[:, None]

    refl = BAND_OFFSET + BAND_SLOPE * index[..., None]
    if cfg.noise > 0:
        refl = refl + cfg.noise * rng.standard_normal(refl.shape)
    clouds = _cloud_masks(rng, days.size, size, cfg.cloud_prob)
    if clouds.any():
        alpha = rng.uniform(0.6, 1.0, days.size)[:, None, None, None]
        cloudy = (1 - alpha) * refl + alpha * CLOUD_REFLECTANCE
        refl = np.where(clouds[..., None], cloudy, refl)
    refl = np.clip(refl, 0.0, 1.5).astype(np.float32)
    year = cfg.years[int(rng.integers(0, len(cfg.years)))]
    polygon = FieldPolygon(polygon.vertices, site_id, location)
    return SampleTimeSeries(site_id, label, year, polygon, mask, refl, clouds, days, cluster, location)


def assign_labels(cfg: SynthConfig, seed: int) -> np.ndarray:
    n_grazing = int(round(cfg.balance * cfg.n_samples))
    labels = np.full(cfg.n_samples, NO_ACTIVITY, dtype=np.int64)
    labels[:n_grazing] = GRAZING
    return np.random.default_rng([seed, _STREAM_LABELS]).permutation(labels)


def assign_clusters(cfg: SynthConfig, seed: int) -> tuple[list[int], list[tuple[float, float]]]:
    """Groups of 1..max_cluster neighbouring sites with (lat, lon) in southern/central Sweden."""
    rng = np.random.default_rng([seed, _STREAM_LABELS, 1])
    clusters, locations = [], []
    cid = 0
    while len(clusters) < cfg.n_samples:
        lat, lon = rng.uniform(55.5, 63.0), rng.uniform(12.0, 19.0)
        for _ in range(int(rng.integers(1, cfg.max_cluster + 1))):
            if len(clusters) == cfg.n_samples:
                break
            clusters.append(cid)
            locations.append((round(lat + rng.normal(0, 0.01), 6), round(lon + rng.normal(0, 0.01), 6)))
        cid += 1
    return clusters, locations


def synth_generate(cfg: SynthConfig, seed: int) -> list[SampleTimeSeries]:
    """Generate ``cfg.n_samples`` raw (unfiltered) samples, deterministic in ``seed``."""
    cfg.validate()
    labels = assign_labels(cfg, seed)
    clusters, locations = assign_clusters(cfg, seed)
    return [generate_site(cfg, seed, i, int(labels[i]), clusters[i], locations[i]) for i in range(cfg.n_samples)]


__all__ = [
    "BAND_NAMES", "GrazingEvent", "Phenology", "SynthConfig", "acquisition_days", "generate_site",
    "random_events", "random_phenology", "synth_generate", "vegetation_curve",
]
