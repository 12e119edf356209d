"""Inspection planning: how many non-grazed sites a season of visits uncovers.

Two visit policies are compared. ``random`` draws sites uniformly from the whole
population. ``targeted`` first visits sites the classifier flags as non-grazed and,
once those are exhausted, falls back to uniform draws from the unflagged rest.
Closed forms give expectations over the flag set; :func:`monte_carlo` simulates it.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

POLICIES = ("random", "targeted")
_CHUNK = 10_000


@dataclass(frozen=True)
class InspectionScenario:
    n_sites: int = 10_000
    nongrazed_fraction: float = 0.05
    precision_no: float = 0.86
    recall_no: float = 0.69

    def __post_init__(self):
        n, q, pi, rho = self.n_sites, self.nongrazed_fraction, self.precision_no, self.recall_no
        problems = []
        if int(n) != n or n < 1:
            problems.append("n_sites must be a positive integer")
        if not 0.0 < q < 1.0:
            problems.append("nongrazed_fraction must be in (0, 1)")
        if not 0.0 < pi <= 1.0:
            problems.append("precision_no must be in (0, 1]")
        if not 0.0 <= rho <= 1.0:
            problems.append("recall_no must be in [0, 1]")
        if not problems:
            if q * n < 1:
                problems.append("fewer than one expected non-grazed site")
            if q * n * rho / pi > n * (1 + 1e-12):
                problems.append("expected flagged count exceeds the number of sites")
            elif q * rho * (1 / pi - 1) > (1 - q) * (1 + 1e-12):
                problems.append("implied false flags outnumber the grazed sites")
        if problems:
            raise ValueError("invalid scenario: " + "; ".join(problems))

    @property
    def n_nongrazed(self) -> float:
        return self.nongrazed_fraction * self.n_sites

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "InspectionScenario":
        return cls(int(d["n_sites"]), float(d["nongrazed_fraction"]), float(d["precision_no"]), float(d["recall_no"]))

    @classmethod
    def load(cls, path) -> "InspectionScenario":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def expected_flagged(s: InspectionScenario) -> float:
    """Expected size of the flagged set: true positives divided by precision."""
    return s.n_nongrazed * s.recall_no / s.precision_no


def _check_visits(s: InspectionScenario, visits: float) -> None:
    if not 0 <= visits <= s.n_sites:
        raise ValueError(f"visit count {visits} outside [0, {s.n_sites}]")


def expected_found(s: InspectionScenario, policy: str, visits: float) -> float:
    _check_visits(s, visits)
    if policy == "random":
        return visits * s.nongrazed_fraction
    if policy != "targeted":
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    flagged = expected_flagged(s)
    found = min(visits, flagged) * s.precision_no
    extra = visits - flagged
    if extra > 0:
        # missed non-grazed sites spread uniformly over the unflagged remainder
        found += extra * (s.n_nongrazed - s.n_nongrazed * s.recall_no) / (s.n_sites - flagged)
    return found


def advantage_ratio(s: InspectionScenario, p: float) -> float:
    """Targeted over random discoveries when a fraction ``p`` of all sites is visited."""
    if not 0.0 < p <= 1.0:
        raise ValueError("visitation fraction must be in (0, 1]")
    v = p * s.n_sites
    return expected_found(s, "targeted", v) / expected_found(s, "random", v)


@dataclass
class PolicyCurve:
    scenario: InspectionScenario
    grid: np.ndarray
    random_found: np.ndarray
    targeted_found: np.ndarray

    @property
    def random_pct(self) -> np.ndarray:
        return 100.0 * self.random_found / self.scenario.n_nongrazed

    @property
    def targeted_pct(self) -> np.ndarray:
        return 100.0 * self.targeted_found / self.scenario.n_nongrazed

    @property
    def ratio(self) -> np.ndarray:
        return self.targeted_found / self.random_found

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "random_pct", "targeted_pct", "ratio"])
        for row in zip(self.grid, self.random_pct, self.targeted_pct, self.ratio):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def default_grid(step: float = 0.001) -> np.ndarray:
    if not 0 < step <= 1:
        raise ValueError(f"grid step must lie in (0, 1], got {step}")
    n = int(round(1.0 / step))
    return np.arange(1, n + 1) / n


def emit_curve(s: InspectionScenario, grid=None) -> PolicyCurve:
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-D sequence")
    if np.any(grid <= 0) or np.any(grid > 1):
        raise ValueError("grid values must lie in (0, 1]")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    v = grid * s.n_sites
    return PolicyCurve(s, grid,
                       np.array([expected_found(s, "random", x) for x in v]),
                       np.array([expected_found(s, "targeted", x) for x in v]))


@dataclass(frozen=True)
class MonteCarloResult:
    policy: str
    visits: int
    trials: int
    mean: float
    stderr: float


def false_flag_probability(s: InspectionScenario) -> float:
    """Chance a grazed site is flagged, chosen so flagged-set precision matches on average."""
    grazed = (1.0 - s.nongrazed_fraction) * s.n_sites
    return s.n_nongrazed * s.recall_no * (1.0 / s.precision_no - 1.0) / grazed


def _simulate(s: InspectionScenario, policy: str, visits: int, rng: np.random.Generator, trials: int,
              flags: str) -> np.ndarray:
    n = s.n_sites
    k = int(round(s.n_nongrazed))
    if policy == "random":
        return rng.hypergeometric(k, n - k, visits, size=trials).astype(np.float64) if visits else np.zeros(trials)
    if flags == "bernoulli":
        tp = rng.binomial(k, s.recall_no, size=trials)
        fp = rng.binomial(n - k, false_flag_probability(s), size=trials)
    else:
        tp = np.full(trials, int(round(k * s.recall_no)))
        fp = np.full(trials, int(round(expected_flagged(s) - k * s.recall_no)))
    flagged = tp + fp
    first = np.minimum(visits, flagged)
    found = rng.hypergeometric(tp, fp, first)
    rest = visits - first
    found += rng.hypergeometric(k - tp, n - k - fp, rest)
    return found.astype(np.float64)


def monte_carlo(s: InspectionScenario, visits: int, trials: int = 100_000, seed: int = 0,
                policy: str = "targeted", flags: str = "bernoulli") -> MonteCarloResult:
    """Simulated mean and standard error of non-grazed sites found.

    ``flags="bernoulli"`` flags each non-grazed site with probability ``recall_no``
    and each grazed site with :func:`false_flag_probability`. ``flags="fixed"`` uses
    the rounded expected counts in every trial. Trials run in chunks whose random
    streams are keyed by ``(seed, chunk index)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if flags not in ("bernoulli", "fixed"):
        raise ValueError(f"unknown flag model {flags!r}")
    if int(visits) != visits:
        raise ValueError("visits must be an integer")
    visits = int(visits)
    _check_visits(s, visits)
    fp_prob = false_flag_probability(s)
    if not 0.0 <= fp_prob <= 1.0:
        raise ValueError(f"inconsistent scenario: implied false-flag probability {fp_prob:.4g} outside [0, 1]")
    parts = []
    for c, start in enumerate(range(0, trials, _CHUNK)):
        rng = np.random.default_rng([seed, c])
        parts.append(_simulate(s, policy, visits, rng, min(_CHUNK, trials - start), flags))
    found = np.concatenate(parts)
    stderr = float(found.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MonteCarloResult(policy, visits, trials, float(found.mean()), stderr)


def summary(s: InspectionScenario, visits=(100, 401), small_p: float = 0.01) -> dict:
    out = {
        "scenario": s.to_json(),
        "expected_flagged": expected_flagged(s),
        "knee_fraction": expected_flagged(s) / s.n_sites,
        "small_p": small_p,
        "small_p_ratio": advantage_ratio(s, small_p),
        "found": [],
    }
    for v in visits:
        t = expected_found(s, "targeted", v)
        out["found"].append({
            "visits": v, "targeted": t, "random": expected_found(s, "random", v),
            "targeted_pct_of_nongrazed": 100.0 * t / s.n_nongrazed,
        })
    return out


__all__ = [
    "InspectionScenario", "MonteCarloResult", "POLICIES", "PolicyCurve", "advantage_ratio", "default_grid",
    "emit_curve", "expected_flagged", "expected_found", "false_flag_probability", "monte_carlo", "summary",
]
