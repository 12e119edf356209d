from __future__ import annotations

import numpy as np
import pytest

from grazing.dataset import FieldPolygon, SampleTimeSeries, preprocess, rasterize_polygon
from grazing.synth import SynthConfig, synth_generate

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {name}: {detail}")


@pytest.fixture(scope="session")
def small_raw():
    return synth_generate(SynthConfig(n_samples=24), seed=11)


@pytest.fixture(scope="session")
def small_samples(small_raw):
    return [p for p in (preprocess(s) for s in small_raw) if p is not None]


def make_sample(frames=5, size=45, label=1, seed=0, site_id="s0", polygon=None, cluster=None):
    rng = np.random.default_rng(seed)
    polygon = polygon or FieldPolygon([(8.0, 8.0), (36.0, 10.0), (34.0, 37.0), (9.0, 33.0)])
    mask = rasterize_polygon(polygon, size, size)
    refl = rng.uniform(0.0, 0.6, size=(frames, size, size, 13)).astype(np.float32)
    return SampleTimeSeries(
        site_id=site_id, label=label, year=2022, polygon=polygon, polygon_mask=mask,
        reflectance=refl, cloud_mask=np.zeros((frames, size, size), dtype=bool),
        days=np.arange(frames, dtype=np.int64) * 5 + 100, cluster=cluster)
