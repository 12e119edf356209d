"""Finite-difference gradient checks for every layer and for the composed model.

Each check builds a random scalar objective ``sum(R * layer(inputs))`` (or a loss)
for one seed and returns the worst relative error between the analytic gradient
and central differences. Inputs to piecewise-linear layers are drawn away from
their kinks so the difference quotient is meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataset import ChannelStats, FieldPolygon, SampleTimeSeries, rasterize_polygon
from .model import PARAM_ORDER, ModelConfig, ModelParams, backward, forward, init_params, prepare_input

TOLERANCE = 1e-4
H = 1e-3


def _check_all(fn, args: list[np.ndarray], grads_fn) -> float:
    """Check the gradient of ``fn(*args)`` w.r.t. every argument."""
    worst = 0.0
    grads = grads_fn(*args)
    for i, g in enumerate(grads):
        def value(z, i=i):
            a = list(args)
            a[i] = z
            return fn(*a)

        worst = max(worst, nx.grad_check(lambda z, g=g: (value(z), g), args[i], H, value_fn=value))
    return worst


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    x, w, b = rng.normal(size=(5, 5, 2)), rng.normal(size=(7, 7, 2, 3)), rng.normal(size=3)
    r = rng.normal(size=(5, 5, 3))

    def grads(x, w, b):
        _, cache = nx.conv2d(x, w, b)
        return nx.conv2d_backward(r, cache)

    return _check_all(lambda x, w, b: float(np.sum(r * nx.conv2d(x, w, b)[0])), [x, w, b], grads)


def _away_from_zero(rng, shape, gap=0.1):
    v = rng.normal(size=shape)
    return np.where(v >= 0, v + gap, v - gap)


def check_relu(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    x = _away_from_zero(rng, (4, 6))
    r = rng.normal(size=x.shape)
    return _check_all(lambda x: float(np.sum(r * nx.relu(x)[0])), [x],
                      lambda x: [nx.relu_backward(r, nx.relu(x)[1])])


def _spaced(rng, shape, gap=0.05):
    """Distinct values at least ``gap`` apart, so no window has a near tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(-0.5, 0.5)).reshape(shape)


def check_maxpool2d(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    x = _spaced(rng, (5, 7, 2))  # partial windows on both edges
    r = rng.normal(size=(2, 3, 2))
    return _check_all(lambda x: float(np.sum(r * nx.maxpool2d(x, 3, 3)[0])), [x],
                      lambda x: [nx.maxpool2d_backward(r, nx.maxpool2d(x, 3, 3)[1])])


def check_conv_relu_pool(seed: int) -> float:
    """Fused spatial block w.r.t. kernels and bias on a zero-padded sparse input."""
    rng = np.random.default_rng([seed, 4])
    x = np.zeros((2, 9, 9, 2))
    x[:, 2:5, 3:6, :] = rng.normal(size=(2, 3, 3, 2))
    w, b = 0.3 * rng.normal(size=(7, 7, 2, 3)), np.array([0.5, -0.5, 0.2])
    # a normalized projection keeps FFT rounding noise under the relative-error floor
    # on kernel taps that only ever see padding (exact zero gradient)
    r = rng.normal(size=(2, 3, 3, 3)) / 54

    def f(w, b):
        return float(np.sum(r * nx.conv_relu_pool(x, w, b)[0]))

    def grads(w, b):
        return nx.conv_relu_pool_backward(r, nx.conv_relu_pool(x, w, b)[1])

    return _check_with_kinks(f, [w, b], grads, lambda w, b: _spatial_pattern(x, w, b))


def check_linear(seed: int) -> float:
    rng = np.random.default_rng([seed, 5])
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    return _check_all(lambda x, w, b: float(np.sum(r * nx.linear(x, w, b)[0])), [x, w, b],
                      lambda x, w, b: nx.linear_backward(r, nx.linear(x, w, b)[1]))


def check_sigmoid(seed: int) -> float:
    rng = np.random.default_rng([seed, 6])
    x = rng.normal(scale=3.0, size=7)
    r = rng.normal(size=7)
    return _check_all(lambda x: float(np.sum(r * nx.sigmoid(x))), [x],
                      lambda x: [nx.sigmoid_backward(r, nx.sigmoid(x))])


def check_lstm_cell(seed: int) -> float:
    rng = np.random.default_rng([seed, 7])
    n, d = 5, 3
    args = [rng.normal(size=n), rng.normal(size=d), rng.normal(size=d),
            0.3 * rng.normal(size=(n, 4 * d)), 0.3 * rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)]
    r1, r2 = rng.normal(size=d), rng.normal(size=d)

    def f(*a):
        h, c, _ = nx.lstm_cell(*a)
        return float(r1 @ h + r2 @ c)

    def grads(*a):
        return nx.lstm_cell_backward(r1, r2, nx.lstm_cell(*a)[2])

    return _check_all(f, args, grads)


def check_lstm(seed: int) -> float:
    """Three-step sequence, backpropagation through time."""
    rng = np.random.default_rng([seed, 8])
    n, d = 4, 3
    args = [rng.normal(size=(3, n)), 0.3 * rng.normal(size=(n, 4 * d)), 0.3 * rng.normal(size=(d, 4 * d)),
            rng.normal(size=4 * d)]
    r = rng.normal(size=(3, d))
    return _check_all(lambda *a: float(np.sum(r * nx.lstm(*a)[0])), args,
                      lambda *a: nx.lstm_backward(r, nx.lstm(*a)[1]))


def check_bilstm(seed: int) -> float:
    rng = np.random.default_rng([seed, 9])
    n, d, T = 4, 3, 3
    xs = rng.normal(size=(T, n))
    ps = [0.3 * rng.normal(size=(n, 4 * d)), 0.3 * rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d),
          0.3 * rng.normal(size=(n, 4 * d)), 0.3 * rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)]
    r = rng.normal(size=(T, 2 * d))

    def run(xs, *p):
        return nx.bilstm(xs, dict(zip(("wx", "wh", "b"), p[:3])), dict(zip(("wx", "wh", "b"), p[3:])))

    def grads(xs, *p):
        dx, gf, gb = nx.bilstm_backward(r, run(xs, *p)[1])
        return [dx, gf["wx"], gf["wh"], gf["b"], gb["wx"], gb["wh"], gb["b"]]

    return _check_all(lambda *a: float(np.sum(r * run(*a)[0])), [xs] + ps, grads)


def check_bce(seed: int) -> float:
    rng = np.random.default_rng([seed, 10])
    worst = 0.0
    for y in (0.0, 1.0):
        z = rng.normal(scale=3.0, size=1)
        worst = max(worst, nx.grad_check(lambda v: (float(nx.bce_loss(v[0], y)[0]), [nx.bce_loss(v[0], y)[1]]), z, H))
    return worst


# ------------------------------------------------------------------ full model


def _spatial_pattern(x, w, b, window=3, stride=3):
    """ReLU signs and pooling winners: the piece of the piecewise-smooth map ``x`` is on."""
    a, _ = nx.conv2d(x, w, b)
    r, _ = nx.relu(a)
    _, (_, _, _, _, arg) = nx.maxpool2d(r, window, stride)
    return np.concatenate([(a > 0).ravel(), arg.ravel()])


def _check_with_kinks(f, args, grads_fn, pattern_fn, coords=None) -> float:
    """Like :func:`_check_all`, skipping coordinates whose stencil crosses a kink.

    A perturbation of ``H`` can flip a ReLU or change a pooling winner; the central
    difference then straddles two smooth pieces and says nothing about the gradient.
    """
    worst = 0.0
    grads = grads_fn(*args)
    base = pattern_fn(*args)
    for i, g in enumerate(grads):
        g = np.asarray(g).reshape(-1)
        flat_arg = np.array(args[i], dtype=np.float64)
        flat = flat_arg.reshape(-1)
        idx = range(flat.size) if coords is None else coords[i]
        for k in idx:
            orig = flat[k]
            vals = []
            crossed = False
            for step in (H, -H):
                flat[k] = orig + step
                a = list(args)
                a[i] = flat_arg
                if not np.array_equal(pattern_fn(*a), base):
                    crossed = True
                    break
                vals.append(f(*a))
            flat[k] = orig
            if crossed:
                continue
            numeric = (vals[0] - vals[1]) / (2 * H)
            worst = max(worst, float(nx.relative_error(g[k], numeric)))
    return worst


def shrunk_config() -> ModelConfig:
    return ModelConfig(input_channels=4, band_subset=(0, 1, 2, 3), chip_size=9)


def toy_samples(seed: int, n: int = 2, frames: int = 3, size: int = 9, channels: int = 4):
    rng = np.random.default_rng([seed, 11])
    out = []
    for k in range(n):
        poly = FieldPolygon(((1.5, 1.2), (7.8, 2.1), (7.2, 7.9), (2.0, 7.1)), f"toy{k}")
        mask = rasterize_polygon(poly, size, size)
        refl = rng.uniform(0.0, 1.0, size=(frames, size, size, channels)).astype(np.float32)
        out.append(SampleTimeSeries(f"toy{k}", k % 2, 2023, poly, mask, refl,
                                    np.zeros((frames, size, size), bool), np.arange(frames) * 5 + 120))
    # unit-scale inputs keep the composed map mildly curved, so the O(h^2) central
    # difference error stays far below the tolerance even on small gradient entries
    stats = ChannelStats(np.full(channels, 0.5), np.full(channels, 1.0))
    return out, stats


def model_value(tensors: dict, xs, labels, config: ModelConfig) -> float:
    params = ModelParams(tensors)
    return sum(float(nx.bce_loss(forward(x, params, config)[0][-1], float(y))[0]) for x, y in zip(xs, labels)) / len(xs)


def model_loss(tensors: dict, xs, labels, config: ModelConfig, fused: bool = True):
    """Mean final-step BCE over the samples and its parameter gradients."""
    total, grads = 0.0, {k: np.zeros_like(v) for k, v in tensors.items()}
    params = ModelParams(tensors)
    for x, y in zip(xs, labels):
        logits, cache = forward(x, params, config, fused=fused)
        loss, dz = nx.bce_loss(logits[-1], float(y))
        dl = np.zeros_like(logits)
        dl[-1] = dz / len(xs)
        total += float(loss) / len(xs)
        for k, g in backward(dl, cache).items():
            grads[k] += g
    return total, grads


def check_full_model(seed: int, per_group: int = 40, fused: bool = True) -> tuple[float, int]:
    """Worst relative error over sampled coordinates of every parameter group.

    Returns ``(error, skipped)`` where ``skipped`` counts coordinates whose stencil
    crossed a ReLU or pooling kink.
    """
    config = shrunk_config()
    samples, stats = toy_samples(seed)
    xs = [prepare_input(s, stats, config) for s in samples]
    labels = [s.label for s in samples]
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 12])
    # nonzero biases so constant (masked) windows carry gradient too
    params.tensors["conv_b"] = rng.normal(scale=0.5, size=params.tensors["conv_b"].shape)
    t0 = params.tensors
    names = list(PARAM_ORDER)
    _, analytic = model_loss(t0, xs, labels, config, fused)
    base = [_spatial_pattern(x, t0["conv_w"], t0["conv_b"]) for x in xs]
    worst, skipped = 0.0, 0
    for name in names:
        size = t0[name].size
        idx = np.arange(size) if size <= per_group else rng.choice(size, per_group, replace=False)
        flat_g = analytic[name].reshape(-1)
        for k in idx:
            vals, crossed = [], False
            for step in (H, -H):
                t = dict(t0)
                t[name] = t0[name].copy()
                t[name].reshape(-1)[k] += step
                if name in ("conv_w", "conv_b") and any(
                        not np.array_equal(_spatial_pattern(x, t["conv_w"], t["conv_b"]), p)
                        for x, p in zip(xs, base)):
                    crossed = True
                    break
                vals.append(model_value(t, xs, labels, config))
            if crossed:
                skipped += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * H)
            worst = max(worst, float(nx.relative_error(flat_g[k], numeric)))
    return worst, skipped


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "maxpool2d": check_maxpool2d,
    "conv_relu_pool": check_conv_relu_pool,
    "linear": check_linear,
    "sigmoid": check_sigmoid,
    "lstm_cell": check_lstm_cell,
    "lstm": check_lstm,
    "bilstm": check_bilstm,
    "bce_loss": check_bce,
}


@dataclass
class OracleResult:
    name: str
    max_error: float
    seeds: int
    skipped: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(seeds: int = 20, per_group: int = 40) -> list[OracleResult]:
    results = []
    for name, check in LAYER_CHECKS.items():
        t = time.perf_counter()
        err = max(check(s) for s in range(seeds))
        results.append(OracleResult(name, err, seeds, seconds=time.perf_counter() - t))
    t = time.perf_counter()
    errs, skipped = zip(*(check_full_model(s, per_group) for s in range(seeds)))
    results.append(OracleResult("full_model", max(errs), seeds, sum(skipped), time.perf_counter() - t))
    return results


__all__ = ["LAYER_CHECKS", "OracleResult", "TOLERANCE", "check_full_model", "run_suite", "shrunk_config",
           "toy_samples"]
