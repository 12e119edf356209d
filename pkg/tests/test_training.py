import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_sample
from grazing.dataset import FieldPolygon, MIN_POLYGON_PIXELS
from grazing.oracles import shrunk_config, toy_samples
from grazing.training import (
    TemporalDropout, TrainConfig, augment, augment_crop, augment_flip, crop, cross_validate, evaluate_ensemble, flip,
    temporal_dropout, temporal_dropout_keep, train_ensemble, train_member,
)

TOY = shrunk_config()


def _same(a, b):
    return (np.array_equal(a.reflectance, b.reflectance) and np.array_equal(a.polygon_mask, b.polygon_mask)
            and np.array_equal(a.cloud_mask, b.cloud_mask) and np.array_equal(a.days, b.days))


def _equal_params(a, b):
    return all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(flip_prob=1.5), dict(member_count=0),
                                 dict(temporal_dropout=TemporalDropout(min_keep=0)), dict(learning_rate=0.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_config_json_round_trip():
    cfg = TrainConfig(epochs=7, temporal_dropout=TemporalDropout(step_prob=0.2))
    assert TrainConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------- flips


def test_double_flip_is_identity():
    s = make_sample(frames=3)
    s.cloud_mask[1, 2:6, 30:40] = True
    twice = flip(flip(s, True, True), True, True)
    assert _same(s, twice)
    assert np.allclose(twice.polygon.vertices, s.polygon.vertices, rtol=0, atol=1e-12)


def test_flip_moves_mask_with_image():
    s = make_sample(frames=2)
    f = flip(s, True, False)
    assert f.polygon_mask.sum() == s.polygon_mask.sum()
    assert np.array_equal(f.reflectance[:, :, ::-1], s.reflectance)
    assert np.array_equal(f.polygon_mask[:, ::-1], s.polygon_mask)


def test_no_flip_branch_is_identity():
    s = make_sample()
    assert augment_flip(s, np.random.default_rng(0), prob=0.0) is s


# ---------------------------------------------------------------- crops


def test_full_size_crop_is_identity():
    s = make_sample()
    assert crop(s, 0, 0, 45) is s
    for seed in range(5):
        assert augment_crop(s, np.random.default_rng(seed), min_side=45) is s


def test_crop_shape_and_padding():
    s = make_sample(frames=2)
    c = crop(s, 4, 6, 36)
    assert c.reflectance.shape == s.reflectance.shape
    assert np.array_equal(c.reflectance[:, :36, :36], s.reflectance[:, 4:40, 6:42])
    assert not c.reflectance[:, 36:].any() and not c.reflectance[:, :, 36:].any()
    assert np.array_equal(c.polygon_mask[:36, :36], s.polygon_mask[4:40, 6:42])


def test_crop_retries_keep_polygon_large_enough():
    # a small polygon in a corner: many crops would cut it away
    corner = FieldPolygon([(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)])
    s = make_sample(frames=2, polygon=corner)
    assert s.polygon_mask.sum() == 16
    for seed in range(50):
        out = augment_crop(s, np.random.default_rng(seed))
        assert out.polygon_mask.sum() >= MIN_POLYGON_PIXELS
        assert out.reflectance.shape == s.reflectance.shape


def test_crop_gives_up_after_failed_tries():
    tiny = FieldPolygon([(44.0, 44.0), (45.0, 44.0), (45.0, 45.0), (44.0, 45.0)])
    s = make_sample(frames=1, polygon=tiny)
    assert augment_crop(s, np.random.default_rng(1)) is s


# ---------------------------------------------------------- temporal dropout


def test_no_dropout_branch_is_identity():
    s = make_sample(frames=10)
    cfg = TemporalDropout(series_prob=0.0)
    assert temporal_dropout(s, np.random.default_rng(0), cfg) is s


def test_short_series_always_survives():
    rng = np.random.default_rng(0)
    assert all(temporal_dropout_keep(3, rng).all() for _ in range(2000))


def test_floor_restores_latest_frames():
    cfg = TemporalDropout(series_prob=1.0, step_prob=1.0, min_keep=4)
    keep = temporal_dropout_keep(10, np.random.default_rng(0), cfg)
    assert list(np.flatnonzero(keep)) == [6, 7, 8, 9]


def test_dropout_preserves_frame_order():
    s = make_sample(frames=20)
    cfg = TemporalDropout(series_prob=1.0)
    out = temporal_dropout(s, np.random.default_rng(5), cfg)
    assert np.all(np.diff(out.days) > 0)
    assert set(out.days) <= set(s.days)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_augmentation_keeps_label_mask_and_frames(seed, frames):
    s = make_sample(frames=frames, label=seed % 2)
    out = augment(s, np.random.default_rng(seed), TrainConfig())
    assert out.label == s.label
    assert out.n_frames >= min(4, frames)
    assert out.polygon_mask.sum() >= MIN_POLYGON_PIXELS
    assert out.reflectance.shape[1:] == s.reflectance.shape[1:]


# ---------------------------------------------------------------- training


def _toy_data(seed=1, n=6, frames=4):
    samples, stats = toy_samples(seed, n=n, frames=frames)
    return samples, stats


def test_separable_pair_is_learned():
    samples, stats = toy_samples(0, n=2, frames=3)
    _, log = train_member(samples, TOY, TrainConfig(epochs=300, augment=False), seed=0, stats=stats)
    assert len(log.loss) == 300 and all(math.isfinite(v) for v in log.loss)
    assert log.loss[-1] < 0.01
    assert max(log.loss[-50:]) < 0.1
    assert log.accuracy[-1] == 1.0


def test_first_epoch_loss_near_ln2():
    samples, stats = toy_samples(1, n=20, frames=4)
    for seed in range(3):
        _, log = train_member(samples, TOY, TrainConfig(epochs=1, augment=False), seed=seed, stats=stats)
        assert abs(log.loss[0] - math.log(2)) < 0.05


def test_training_is_deterministic():
    samples, stats = _toy_data()
    cfg = TrainConfig(epochs=3, batch_size=4)
    a, la = train_member(samples, TOY, cfg, seed=3, stats=stats)
    b, lb = train_member(samples, TOY, cfg, seed=3, stats=stats)
    assert _equal_params(a, b) and la.loss == lb.loss


def test_adam_step_count():
    samples, stats = _toy_data(n=7)
    _, log = train_member(samples, TOY, TrainConfig(epochs=2, batch_size=3, augment=False), seed=0, stats=stats)
    assert log.final["adam_steps"] == 2 * 3


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_member([], TOY, TrainConfig(epochs=1), seed=0)


def test_ensemble_members_use_consecutive_seeds():
    samples, stats = _toy_data()
    cfg = TrainConfig(epochs=1, member_count=3, base_seed=5)
    ens, logs = train_ensemble(samples, TOY, cfg, stats)
    assert ens.seeds == [5, 6, 7] and [g.seed for g in logs] == [5, 6, 7]
    assert not _equal_params(ens.members[0], ens.members[1])
    single, _ = train_member(samples, TOY, cfg, seed=6, stats=stats)
    assert _equal_params(single, ens.members[1])


def test_parallel_members_match_sequential():
    samples, stats = _toy_data()
    cfg = TrainConfig(epochs=2, member_count=3)
    seq, _ = train_ensemble(samples, TOY, cfg, stats, threads=1)
    par, _ = train_ensemble(samples, TOY, cfg, stats, threads=3)
    assert all(_equal_params(a, b) for a, b in zip(seq.members, par.members))


@pytest.mark.filterwarnings("ignore:precision of a never-predicted class")
def test_evaluate_ensemble_shapes():
    samples, stats = _toy_data(n=6)
    ens, _ = train_ensemble(samples, TOY, TrainConfig(epochs=1, member_count=3), stats)
    ev = evaluate_ensemble(ens, samples)
    assert ev.member_predictions.shape == (3, 6)
    assert ev.confusion.total == 6
    assert len(ev.member_reports()) == 3


@pytest.mark.filterwarnings("ignore:precision of a never-predicted class")
def test_cross_validate_rows():
    samples, _ = toy_samples(2, n=40, frames=3)
    res = cross_validate(samples, TOY, TrainConfig(epochs=1, member_count=2), n_folds=5, seed=4)
    rows = res.rows()
    assert [name for name, _ in rows] == [f"Split #{k}" for k in range(1, 6)] + ["Mean", "Median"]
    for fold in res.folds:
        assert not set(fold.train_ids) & set(fold.val_ids)
        assert (len(fold.train_ids), len(fold.val_ids)) == (32, 8)
    assert res.median.acc == statistics.median(f.report.acc for f in res.folds)
    assert res.mean.f1 == pytest.approx(statistics.fmean(f.report.f1 for f in res.folds), abs=1e-15)


def test_cross_validate_rejects_single_class_fold_before_training():
    samples, _ = toy_samples(2, n=6, frames=3)
    for s in samples:
        s.label = 1
    with pytest.raises(ValueError, match="fold 1: validation split holds a single class"):
        cross_validate(samples, TOY, TrainConfig(epochs=10_000), n_folds=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_augment_matches_flip_crop_dropout_composition(seed, frames):
    # augment drops frames before cropping; the result must equal the plain composition
    s = make_sample(frames=frames, seed=seed % 7)
    s.cloud_mask[:, 3:9, 20:30] = True
    cfg = TrainConfig()
    rng = np.random.default_rng(seed)
    expected = temporal_dropout(augment_crop(augment_flip(s, rng, cfg.flip_prob), rng, cfg.crop_min), rng,
                                cfg.temporal_dropout)
    got = augment(s, np.random.default_rng(seed), cfg)
    assert _same(got, expected)
    assert got.polygon.vertices == expected.polygon.vertices
