"""Conv -> biLSTM -> sigmoid grazing classifier, prediction rules and ablations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .dataset import BAND_NAMES, CHIP_SIZE, GRAZING, NO_ACTIVITY, ChannelStats, SampleTimeSeries, normalize

INPUT_MODES = ("masked", "no_poly", "poly_extra_channel")
CLASSIFIER_MODES = ("last_four", "only_last")
ALL_BANDS = tuple(range(len(BAND_NAMES)))
# B02-B04 visible, B05-B07 red edge; B01 is grouped with the visible bands so the
# channel counts match the published ablations (9 and 6)
_VISIBLE = tuple(BAND_NAMES.index(b) for b in ("B01", "B02", "B03", "B04"))
_RED_EDGE = tuple(BAND_NAMES.index(b) for b in ("B05", "B06", "B07"))
_RGB_RED_EDGE = tuple(BAND_NAMES.index(b) for b in ("B02", "B03", "B04", "B05", "B06", "B07"))

PARAM_ORDER = (
    "conv_w", "conv_b",
    "fwd_wx", "fwd_wh", "fwd_b",
    "bwd_wx", "bwd_wh", "bwd_b",
    "head_w", "head_b",
)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 13
    conv_filters: int = 8
    conv_kernel: int = 7
    pool_window: int = 3
    pool_stride: int = 3
    lstm_hidden: int = 16
    vote_window: int = 4
    classifier_mode: str = "last_four"
    input_mode: str = "masked"
    band_subset: tuple[int, ...] = ALL_BANDS
    chip_size: int = CHIP_SIZE
    ablation: str = "main"

    def __post_init__(self):
        object.__setattr__(self, "band_subset", tuple(int(b) for b in self.band_subset))
        extra = 1 if self.input_mode == "poly_extra_channel" else 0
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ValueError(f"unknown classifier_mode {self.classifier_mode!r}")
        if self.vote_window < 1:
            raise ValueError("vote_window must be >= 1")
        if len(self.band_subset) != self.input_channels - extra:
            raise ValueError(
                f"band_subset has {len(self.band_subset)} bands but input_channels={self.input_channels}"
                f" with input_mode={self.input_mode!r}")

    @property
    def feature_size(self) -> int:
        side = nx.pool_output_size(self.chip_size, self.pool_window, self.pool_stride)
        return side * side * self.conv_filters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, c, f, d = self.conv_kernel, self.input_channels, self.conv_filters, self.lstm_hidden
        n = self.feature_size
        return {
            "conv_w": (k, k, c, f), "conv_b": (f,),
            "fwd_wx": (n, 4 * d), "fwd_wh": (d, 4 * d), "fwd_b": (4 * d,),
            "bwd_wx": (n, 4 * d), "bwd_wh": (d, 4 * d), "bwd_b": (4 * d,),
            "head_w": (2 * d, 1), "head_b": (1,),
        }

    def to_json(self) -> dict:
        d = asdict(self)
        d["band_subset"] = list(self.band_subset)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def configure_ablation(name: str, chip_size: int = CHIP_SIZE) -> ModelConfig:
    base = ModelConfig(chip_size=chip_size)
    if name == "main":
        return base
    if name == "only_last":
        return replace(base, classifier_mode="only_last", ablation=name)
    if name == "no_poly":
        return replace(base, input_mode="no_poly", ablation=name)
    if name == "poly_input":
        return replace(base, input_mode="poly_extra_channel", input_channels=14, ablation=name)
    if name == "no_rgb":
        keep = tuple(b for b in ALL_BANDS if b not in _VISIBLE)
        return replace(base, band_subset=keep, input_channels=len(keep), ablation=name)
    if name == "no_rgb_no_veg":
        keep = tuple(b for b in ALL_BANDS if b not in _VISIBLE + _RED_EDGE)
        return replace(base, band_subset=keep, input_channels=len(keep), ablation=name)
    if name == "only_rgb_veg":
        return replace(base, band_subset=_RGB_RED_EDGE, input_channels=len(_RGB_RED_EDGE), ablation=name)
    raise ValueError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")


ABLATIONS = ("main", "only_last", "no_poly", "poly_input", "no_rgb", "no_rgb_no_veg", "only_rgb_veg")


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def check(self, config: ModelConfig) -> "ModelParams":
        for name, shape in config.param_shapes().items():
            if name not in self.tensors:
                raise ValueError(f"missing parameter {name!r}")
            if self.tensors[name].shape != shape:
                raise ValueError(f"parameter {name!r} has shape {self.tensors[name].shape}, config expects {shape}")
        return self


@dataclass
class EnsembleParams:
    config: ModelConfig
    members: list[ModelParams]
    stats: ChannelStats | None = None
    meta: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.members]


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases except +1 on the LSTM forget gates."""
    rng = np.random.default_rng([seed, 0x1417])
    k, c, f, d = config.conv_kernel, config.input_channels, config.conv_filters, config.lstm_hidden
    n = config.feature_size
    t: dict[str, np.ndarray] = {
        "conv_w": _glorot(rng, (k, k, c, f), k * k * c, k * k * f),
        "conv_b": np.zeros(f),
    }
    for direction in ("fwd", "bwd"):
        t[f"{direction}_wx"] = _glorot(rng, (n, 4 * d), n, 4 * d)
        t[f"{direction}_wh"] = _glorot(rng, (d, 4 * d), d, 4 * d)
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0
        t[f"{direction}_b"] = b
    t["head_w"] = _glorot(rng, (2 * d, 1), 2 * d, 1)
    t["head_b"] = np.zeros(1)
    return ModelParams(t, seed)


def prepare_input(sample: SampleTimeSeries, stats: ChannelStats, config: ModelConfig) -> np.ndarray:
    """Normalized ``(T, H, W, input_channels)`` array for the configured input mode."""
    if config.input_mode == "masked":
        m = sample.polygon_mask
        x = np.zeros(sample.reflectance.shape)
        x[:, m, :] = (sample.reflectance[:, m, :].astype(np.float64) - stats.mean) / stats.std
    else:
        x = normalize(sample.reflectance, stats)
    x = x[..., list(config.band_subset)] if config.band_subset != ALL_BANDS else x
    if config.input_mode == "poly_extra_channel":
        poly = np.broadcast_to(sample.polygon_mask.astype(np.float64)[None, :, :, None], x.shape[:3] + (1,))
        x = np.concatenate([x, poly], axis=-1)
    return x


def forward(x: np.ndarray, params: ModelParams, config: ModelConfig, fused: bool = True):
    """Per-step logits for a prepared ``(T, H, W, C)`` series. Returns ``(logits, cache)``.

    ``fused=False`` runs conv, ReLU and pooling as separate dense layers; it gives the
    same logits and is needed when input gradients are wanted.
    """
    if x.ndim != 4 or x.shape[0] < 1:
        raise ValueError(f"expected a (T, H, W, C) series with T >= 1, got shape {x.shape}")
    if x.shape[-1] != config.input_channels:
        raise ValueError(f"series has {x.shape[-1]} channels, model expects {config.input_channels}")
    p = params.tensors
    if fused:
        pooled, spatial = nx.conv_relu_pool(x, p["conv_w"], p["conv_b"], config.pool_window, config.pool_stride)
    else:
        a, c_conv = nx.conv2d(x, p["conv_w"], p["conv_b"])
        r, c_relu = nx.relu(a)
        pooled, c_pool = nx.maxpool2d(r, config.pool_window, config.pool_stride)
        spatial = (c_conv, c_relu, c_pool)
    feats = pooled.reshape(x.shape[0], -1)
    hs, c_lstm = nx.bilstm(feats,
                           {"wx": p["fwd_wx"], "wh": p["fwd_wh"], "b": p["fwd_b"]},
                           {"wx": p["bwd_wx"], "wh": p["bwd_wh"], "b": p["bwd_b"]})
    logits, c_head = nx.linear(hs, p["head_w"], p["head_b"])
    return logits[:, 0], (spatial, pooled.shape, c_lstm, c_head)


def backward(dlogits: np.ndarray, cache, input_grad: bool = False):
    """Parameter gradients (and optionally the input gradient) from per-step logit gradients."""
    spatial, pooled_shape, c_lstm, c_head = cache
    dhs, dhead_w, dhead_b = nx.linear_backward(dlogits[:, None], c_head)
    dfeats, gf, gb = nx.bilstm_backward(dhs, c_lstm)
    dpooled = dfeats.reshape(pooled_shape)
    if isinstance(spatial, tuple):
        c_conv, c_relu, c_pool = spatial
        da = nx.relu_backward(nx.maxpool2d_backward(dpooled, c_pool), c_relu)
        dx, dconv_w, dconv_b = nx.conv2d_backward(da, c_conv, input_grad=input_grad)
    elif input_grad:
        raise ValueError("input gradients need forward(..., fused=False)")
    else:
        dconv_w, dconv_b = nx.conv_relu_pool_backward(dpooled, spatial)
    grads = {
        "conv_w": dconv_w, "conv_b": dconv_b,
        "fwd_wx": gf["wx"], "fwd_wh": gf["wh"], "fwd_b": gf["b"],
        "bwd_wx": gb["wx"], "bwd_wh": gb["wh"], "bwd_b": gb["b"],
        "head_w": dhead_w, "head_b": dhead_b,
    }
    return (grads, dx) if input_grad else grads


def step_probabilities(x: np.ndarray, params: ModelParams, config: ModelConfig) -> np.ndarray:
    logits, _ = forward(x, params, config)
    return nx.sigmoid(logits)


def decide(probs: np.ndarray, config: ModelConfig) -> int:
    """Single-model decision from per-step probabilities.

    ``last_four`` takes the median of the last ``vote_window`` probabilities (fewer
    when the series is shorter); ties at 0.5 go to grazing.
    """
    if config.classifier_mode == "only_last":
        return GRAZING if probs[-1] >= 0.5 else NO_ACTIVITY
    k = min(config.vote_window, probs.shape[0])
    return GRAZING if float(np.median(probs[-k:])) >= 0.5 else NO_ACTIVITY


def predict_single(x: np.ndarray, params: ModelParams, config: ModelConfig) -> int:
    return decide(step_probabilities(x, params, config), config)


def majority(votes) -> int:
    """Grazing unless a strict majority votes no activity."""
    votes = list(votes)
    if not votes:
        raise ValueError("no votes to aggregate")
    n_grazing = sum(1 for v in votes if v == GRAZING)
    return GRAZING if 2 * n_grazing >= len(votes) else NO_ACTIVITY


@dataclass(frozen=True)
class _Stacked:
    conv_w: np.ndarray  # (k, k, C, M*F)
    conv_b: np.ndarray
    wx: np.ndarray  # (M, ho, wo, F, 8d): forward and backward projections side by side
    b: np.ndarray  # (M, 8d)
    base: np.ndarray  # (M, F) pooled value of a window that sees no input
    base_xw: np.ndarray  # (M, 8d) projection of the all-base feature map, bias included
    fwd_wh: np.ndarray
    bwd_wh: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    kernel_fft: dict = field(default_factory=dict)  # conv kernel transforms by FFT shape


def _stack(ensemble: EnsembleParams) -> _Stacked:
    key = tuple(id(m.tensors) for m in ensemble.members)
    cached = ensemble.__dict__.get("_stacked")
    if cached is not None and cached[0] == key:
        return cached[1]
    ts = [m.tensors for m in ensemble.members]
    side = nx.pool_output_size(ensemble.config.chip_size, ensemble.config.pool_window, ensemble.config.pool_stride)

    def stack(name):
        return np.stack([t[name] for t in ts])

    f = ensemble.config.conv_filters
    wx = np.concatenate([stack("fwd_wx"), stack("bwd_wx")], axis=-1).reshape(len(ts), side, side, f, -1)
    b = np.concatenate([stack("fwd_b"), stack("bwd_b")], axis=-1)
    conv_b = np.concatenate([t["conv_b"] for t in ts])
    base = np.maximum(conv_b, 0.0).reshape(len(ts), f)
    st = _Stacked(
        conv_w=np.concatenate([t["conv_w"] for t in ts], axis=-1), conv_b=conv_b, wx=wx, b=b,
        base=base, base_xw=np.einsum("mf,mijfk->mk", base, wx) + b,
        fwd_wh=stack("fwd_wh"), bwd_wh=stack("bwd_wh"), head_w=stack("head_w"), head_b=stack("head_b"))
    ensemble.__dict__["_stacked"] = (key, st)
    return st


def ensemble_probabilities(x: np.ndarray, ensemble: EnsembleParams) -> np.ndarray:
    """Per-member, per-step probabilities ``(M, T)`` from one shared forward pass.

    All members' filters run as a single wide convolution and their LSTMs share one
    time loop. Pooled features away from the polygon are the constant ``relu(b)``,
    so their input projection is computed once and only the active cells vary
    with time. Values match :func:`step_probabilities` per member up to rounding.
    """
    config = ensemble.config
    if x.ndim != 4 or x.shape[0] < 1:
        raise ValueError(f"expected a (T, H, W, C) series with T >= 1, got shape {x.shape}")
    if x.shape[-1] != config.input_channels:
        raise ValueError(f"series has {x.shape[-1]} channels, model expects {config.input_channels}")
    if x.shape[1:3] != (config.chip_size, config.chip_size):
        raise ValueError(f"series chips are {x.shape[1:3]}, model expects side {config.chip_size}")
    st = _stack(ensemble)
    m, f, T, d = len(ensemble.members), config.conv_filters, x.shape[0], config.lstm_hidden
    pooled, cells = nx.conv_pool_inference(x, st.conv_w, st.conv_b, config.pool_window, config.pool_stride,
                                           st.kernel_fft)
    xw = np.repeat(st.base_xw[:, None, :], T, axis=1)
    if cells is not None:
        i0, i1, j0, j1 = cells
        cells = pooled[:, i0:i1, j0:j1, :].reshape(T, i1 - i0, j1 - j0, m, f) - st.base
        delta = np.ascontiguousarray(cells.transpose(3, 0, 1, 2, 4)).reshape(m, T, -1)
        wreg = st.wx[:, i0:i1, j0:j1].reshape(m, -1, 8 * d)
        xw += np.matmul(delta, wreg)
    hf = nx.lstm_recurrence(xw[..., :4 * d], st.fwd_wh)
    hb = nx.lstm_recurrence(np.ascontiguousarray(xw[:, ::-1, 4 * d:]), st.bwd_wh)
    hs = np.concatenate([hf, hb[:, ::-1]], axis=-1)
    logits = np.matmul(hs, st.head_w)[..., 0] + st.head_b
    return nx.sigmoid(logits)


def member_votes(x: np.ndarray, ensemble: EnsembleParams) -> list[int]:
    return [decide(p, ensemble.config) for p in ensemble_probabilities(x, ensemble)]


def predict_ensemble(x: np.ndarray, ensemble: EnsembleParams) -> int:
    return majority(member_votes(x, ensemble))


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_json(), sort_keys=True)


__all__ = [
    "ABLATIONS", "EnsembleParams", "ModelConfig", "ModelParams", "PARAM_ORDER", "backward",
    "configure_ablation", "decide", "ensemble_probabilities", "forward", "init_params", "majority", "member_votes",
    "predict_ensemble", "predict_single", "prepare_input", "step_probabilities",
]
