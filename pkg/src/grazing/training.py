"""Augmentation, single-member and ensemble training, and the cross-validation harness.

Every random draw comes from a stream keyed by (member seed, epoch, sample index),
so a member's result does not depend on how members are scheduled across threads.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .dataset import (
    GRAZING, MIN_POLYGON_PIXELS, ChannelStats, SampleTimeSeries, compute_channel_stats,
    split_train_val,
)
from .evaluation import ConfusionMatrix, MetricsReport, aggregate, confusion, metrics
from .model import (
    EnsembleParams, ModelConfig, ModelParams, backward, forward, init_params, majority, member_votes,
    prepare_input,
)

_SHUFFLE, _AUGMENT = 0, 1


@dataclass(frozen=True)
class TemporalDropout:
    series_prob: float = 0.5
    step_prob: float = 0.35
    min_keep: int = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 10
    learning_rate: float = 3e-4
    flip_prob: float = 0.5
    crop_enabled: bool = True
    crop_min: int = 36
    temporal_dropout: TemporalDropout = TemporalDropout()
    augment: bool = True
    member_count: int = 10
    base_seed: int = 0

    def __post_init__(self):
        td = self.temporal_dropout
        if isinstance(td, dict):
            object.__setattr__(self, "temporal_dropout", td := TemporalDropout(**td))
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        for name, p in (("flip_prob", self.flip_prob), ("series_prob", td.series_prob), ("step_prob", td.step_prob)):
            if not 0.0 <= p <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if td.min_keep < 1:
            problems.append("min_keep must be >= 1")
        if self.crop_min < 1:
            problems.append("crop_min must be >= 1")
        if self.member_count < 1:
            problems.append("member_count must be >= 1")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLog:
    seed: int
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _flip_polygon(sample: SampleTimeSeries, horizontal: bool, vertical: bool):
    h, w = sample.polygon_mask.shape
    return sample.polygon.transformed(-1.0 if horizontal else 1.0, float(w) if horizontal else 0.0,
                                      -1.0 if vertical else 1.0, float(h) if vertical else 0.0)


def flip(sample: SampleTimeSeries, horizontal: bool, vertical: bool) -> SampleTimeSeries:
    """Mirror image, clouds and polygon together (horizontal = left-right)."""
    if not (horizontal or vertical):
        return sample
    sl = (slice(None, None, -1) if vertical else slice(None), slice(None, None, -1) if horizontal else slice(None))
    # image arrays stay views; the later crop or input preparation copies what it needs
    return replace(
        sample,
        reflectance=sample.reflectance[(slice(None),) + sl],
        cloud_mask=sample.cloud_mask[(slice(None),) + sl],
        polygon_mask=np.ascontiguousarray(sample.polygon_mask[sl]),
        polygon=_flip_polygon(sample, horizontal, vertical),
    )


def augment_flip(sample: SampleTimeSeries, rng: np.random.Generator, prob: float = 0.5) -> SampleTimeSeries:
    horizontal, vertical = rng.random(2) < prob
    return flip(sample, bool(horizontal), bool(vertical))


def crop(sample: SampleTimeSeries, top: int, left: int, side: int) -> SampleTimeSeries:
    """Cut a ``side`` x ``side`` window and zero-pad it back to full size at the top-left."""
    h, w = sample.polygon_mask.shape
    if side >= h and side >= w and top == 0 and left == 0:
        return sample
    win = (slice(top, top + side), slice(left, left + side))
    refl = np.zeros_like(sample.reflectance)
    clouds = np.zeros_like(sample.cloud_mask)
    mask = np.zeros_like(sample.polygon_mask)
    part = sample.polygon_mask[win]
    mask[:part.shape[0], :part.shape[1]] = part
    refl[:, :part.shape[0], :part.shape[1]] = sample.reflectance[(slice(None),) + win]
    clouds[:, :part.shape[0], :part.shape[1]] = sample.cloud_mask[(slice(None),) + win]
    return replace(sample, reflectance=refl, cloud_mask=clouds, polygon_mask=mask,
                   polygon=sample.polygon.transformed(tx=-float(left), ty=-float(top)))


def draw_crop(mask: np.ndarray, rng: np.random.Generator, min_side: int = 36,
              tries: int = 10) -> tuple[int, int, int] | None:
    """``(top, left, side)`` of a random square window keeping enough polygon pixels, or None."""
    size = mask.shape[0]
    lo = min(min_side, size)
    for _ in range(tries):
        side = int(rng.integers(lo, size + 1))
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        if np.count_nonzero(mask[top:top + side, left:left + side]) >= MIN_POLYGON_PIXELS:
            return top, left, side
    return None


def augment_crop(sample: SampleTimeSeries, rng: np.random.Generator, min_side: int = 36,
                 tries: int = 10) -> SampleTimeSeries:
    """Random square crop, retried while the polygon would shrink below the minimum size."""
    window = draw_crop(sample.polygon_mask, rng, min_side, tries)
    return sample if window is None else crop(sample, *window)


def temporal_dropout_keep(n_frames: int, rng: np.random.Generator, cfg: TemporalDropout = TemporalDropout()) -> np.ndarray:
    """Boolean keep-mask for ``n_frames`` time-ordered frames."""
    if rng.random() >= cfg.series_prob:
        return np.ones(n_frames, dtype=bool)
    keep = rng.random(n_frames) >= cfg.step_prob
    missing = min(cfg.min_keep, n_frames) - int(keep.sum())
    if missing > 0:
        # restore the latest removed frames
        restore = np.flatnonzero(~keep)[::-1][:missing]
        keep[restore] = True
    return keep


def temporal_dropout(sample: SampleTimeSeries, rng: np.random.Generator,
                     cfg: TemporalDropout = TemporalDropout()) -> SampleTimeSeries:
    keep = temporal_dropout_keep(sample.n_frames, rng, cfg)
    return sample if keep.all() else sample.select_frames(keep)


def augment(sample: SampleTimeSeries, rng: np.random.Generator, cfg: TrainConfig) -> SampleTimeSeries:
    """Flip, crop, then temporal dropout; draws are taken in that order.

    Frames are dropped before the crop copies pixels, which gives the same result
    as cropping first since the two act on different axes.
    """
    sample = augment_flip(sample, rng, cfg.flip_prob)
    window = draw_crop(sample.polygon_mask, rng, cfg.crop_min) if cfg.crop_enabled else None
    sample = temporal_dropout(sample, rng, cfg.temporal_dropout)
    return sample if window is None else crop(sample, *window)


def sample_loss_and_grads(x: np.ndarray, label: int, params: ModelParams, config: ModelConfig):
    """Loss on the final-step probability and its parameter gradients."""
    logits, cache = forward(x, params, config)
    loss, dlogit = nx.bce_loss(logits[-1], float(label))
    dlogits = np.zeros_like(logits)
    dlogits[-1] = dlogit
    return loss, logits[-1], backward(dlogits, cache)


def train_member(samples: list[SampleTimeSeries], model_config: ModelConfig, train_config: TrainConfig,
                 seed: int, stats: ChannelStats | None = None, progress=None) -> tuple[ModelParams, TrainLog]:
    """Train one model from ``init_params(model_config, seed)``.

    ``samples`` must already be preprocessed. Batches are processed one sample at a
    time and gradients averaged, so series of different lengths mix freely.
    """
    if not samples:
        raise ValueError("train_member needs at least one training sample")
    stats = stats if stats is not None else compute_channel_stats(samples)
    params = init_params(model_config, seed)
    tensors = params.tensors
    state = nx.AdamState.for_params(tensors, lr=train_config.learning_rate)
    log = TrainLog(seed)
    cached = None if train_config.augment else [prepare_input(s, stats, model_config) for s in samples]
    n = len(samples)
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch, _SHUFFLE]).permutation(n)
        losses, correct = [], 0
        for start in range(0, n, train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            total = None
            for idx in batch:
                s = samples[idx]
                if cached is not None:
                    x = cached[idx]
                else:
                    rng = np.random.default_rng([seed, epoch, _AUGMENT, int(idx)])
                    x = prepare_input(augment(s, rng, train_config), stats, model_config)
                loss, logit, grads = sample_loss_and_grads(x, s.label, ModelParams(tensors, seed), model_config)
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} for sample {s.site_id!r} (member seed {seed}, epoch {epoch + 1})")
                losses.append(loss)
                correct += int((logit >= 0.0) == (s.label == GRAZING))
                if total is None:
                    total = {k: g.copy() for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        total[k] += g
            scale = 1.0 / len(batch)
            tensors, state = nx.adam_step(tensors, {k: g * scale for k, g in total.items()}, state)
        log.loss.append(math.fsum(losses) / n)
        log.accuracy.append(correct / n)
        log.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(seed, epoch + 1, log.loss[-1], log.accuracy[-1])
    log.final = {"loss": log.loss[-1], "accuracy": log.accuracy[-1], "adam_steps": state.t}
    return ModelParams(tensors, seed), log


def train_ensemble(samples: list[SampleTimeSeries], model_config: ModelConfig, train_config: TrainConfig,
                   stats: ChannelStats | None = None, threads: int = 1,
                   progress=None) -> tuple[EnsembleParams, list[TrainLog]]:
    """Members use seeds ``base_seed + i``; results are identical for any thread count."""
    stats = stats if stats is not None else compute_channel_stats(samples)
    seeds = [train_config.base_seed + i for i in range(train_config.member_count)]

    def run(seed):
        return train_member(samples, model_config, train_config, seed, stats, progress)

    # one BLAS thread per worker keeps reductions in a fixed order
    with threadpool_limits(limits=1):
        if threads > 1 and len(seeds) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, seeds))
        else:
            results = [run(s) for s in seeds]
    members = [p for p, _ in results]
    ensemble = EnsembleParams(model_config, members, stats,
                              {"train_config": train_config.to_json(), "n_train": len(samples)})
    return ensemble, [log for _, log in results]


@dataclass
class Evaluation:
    site_ids: list[str]
    labels: list[int]
    member_predictions: np.ndarray  # (members, samples)
    predictions: list[int]

    @property
    def report(self) -> MetricsReport:
        return metrics(self.confusion)

    @property
    def confusion(self) -> ConfusionMatrix:
        return confusion(self.predictions, self.labels)

    def member_reports(self) -> list[MetricsReport]:
        return [metrics(confusion(row, self.labels)) for row in self.member_predictions]


def evaluate_ensemble(ensemble: EnsembleParams, samples: list[SampleTimeSeries],
                      stats: ChannelStats | None = None) -> Evaluation:
    """Ensemble and per-member predictions on preprocessed samples."""
    stats = stats if stats is not None else ensemble.stats
    if stats is None:
        raise ValueError("no normalization statistics: pass stats or use a checkpoint that stores them")
    if not samples:
        raise ValueError("nothing to evaluate")
    member_preds = np.zeros((len(ensemble.members), len(samples)), dtype=np.int64)
    with threadpool_limits(limits=1):
        for j, s in enumerate(samples):
            x = prepare_input(s, stats, ensemble.config)
            member_preds[:, j] = member_votes(x, ensemble)
    preds = [majority(member_preds[:, j]) for j in range(len(samples))]
    return Evaluation([s.site_id for s in samples], [s.label for s in samples], member_preds, preds)


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    val_ids: list[str]
    report: MetricsReport
    member_f1: list[float]


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    mean: MetricsReport
    median: MetricsReport

    def rows(self) -> list[tuple[str, MetricsReport]]:
        rows = [(f"Split #{f.fold + 1}", f.report) for f in self.folds]
        return rows + [("Mean", self.mean), ("Median", self.median)]


def fold_split(samples, fold: int, seed: int, fraction: float = 0.8):
    return split_train_val(samples, fraction, seed=[seed, fold])


def cross_validate(samples: list[SampleTimeSeries], model_config: ModelConfig, train_config: TrainConfig,
                   n_folds: int = 5, seed: int = 0, fraction: float = 0.8, threads: int = 1,
                   progress=None) -> CrossValResult:
    """Independent random train/validation splits, each with its own statistics and ensemble."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    by_id = {s.site_id: s for s in samples}
    splits = [fold_split(samples, k, seed, fraction) for k in range(n_folds)]
    # checked up front so a bad fold does not surface after hours of training
    for k, (_, val_ids) in enumerate(splits):
        if len({by_id[i].label for i in val_ids}) < 2:
            raise ValueError(f"fold {k + 1}: validation split holds a single class; "
                             "use more samples or another split seed")
    folds = []
    for k, (train_ids, val_ids) in enumerate(splits):
        train = [by_id[i] for i in train_ids]
        val = [by_id[i] for i in val_ids]
        stats = compute_channel_stats(train)
        ensemble, _ = train_ensemble(train, model_config, train_config, stats, threads, progress)
        ev = evaluate_ensemble(ensemble, val, stats)
        folds.append(FoldResult(k, train_ids, val_ids, ev.report, [r.f1 for r in ev.member_reports()]))
    mean, median = aggregate(f.report for f in folds)
    return CrossValResult(folds, mean, median)


__all__ = [
    "CrossValResult", "Evaluation", "TemporalDropout", "TrainConfig", "TrainLog", "augment", "augment_crop",
    "augment_flip", "crop", "cross_validate", "draw_crop", "evaluate_ensemble", "flip", "fold_split", "temporal_dropout",
    "temporal_dropout_keep", "train_ensemble", "train_member",
]
