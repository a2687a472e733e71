"""Learnable components: frame backbone, BiLSTM encoders, key-expression
detector and the dual-stream hierarchical classifier.

All batched tensors are laid out ``[B, time, channels]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from . import resampler


@dataclass(frozen=True)
class ModelConfig:
    frame_dim: int = 8
    hidden_dim: int = 16
    classes: int = 4
    frames_in: int = 16
    n1: int = 4
    n2: int = 4
    detect_frames: int = 16
    fusion: str = "concat"
    summary_dim: int = 8

    def __post_init__(self):
        dims = (self.frame_dim, self.hidden_dim, self.classes, self.frames_in, self.n1, self.n2,
                self.detect_frames, self.summary_dim)
        if min(dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1, got {self}")
        if self.n1 * self.n2 != self.frames_in:
            raise ValueError(f"clip factorisation {self.n1}*{self.n2} != frames_in={self.frames_in}")
        if self.fusion not in ("concat", "sum"):
            raise ValueError(f"fusion must be 'concat' or 'sum', got {self.fusion!r}")

    @property
    def fused_dim(self) -> int:
        return (4 if self.fusion == "concat" else 2) * self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# stream name -> ((first encoder, input dim factor), (second encoder, input dim factor))
STREAMS = {
    "me": (("move", 1), ("emo", 2)),
    "em": (("emo", 1), ("move", 2)),
}


class Params:
    """Ordered name -> trainable :class:`DiffArray` registry."""

    def __init__(self, arrays: dict[str, dc.DiffArray] | None = None):
        self._arrays: dict[str, dc.DiffArray] = dict(arrays or {})

    def __getitem__(self, name: str) -> dc.DiffArray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self._arrays[name] = value if isinstance(value, dc.DiffArray) else dc.DiffArray(
            value, requires_grad=True, name=name)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self._arrays.items()}

    def copy(self) -> "Params":
        return Params({k: dc.DiffArray(v.value.copy(), requires_grad=True, name=k)
                       for k, v in self._arrays.items()})

    def prefixed(self, prefix: str) -> dict[str, dc.DiffArray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._arrays.items() if k.startswith(p)}


# --------------------------------------------------------------------------
# initialisation

def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(p: Params, rng, name: str, n_in: int, n_out: int) -> None:
    p[f"{name}.w"] = _uniform(rng, n_in, (n_in, n_out))
    p[f"{name}.b"] = _uniform(rng, n_in, (n_out,))


def _encoder(p: Params, rng, name: str, n_in: int, hidden: int) -> None:
    for direction in ("fwd", "bwd"):
        key = f"{name}.{direction}"
        p[f"{key}.wx"] = _uniform(rng, n_in, (n_in, 4 * hidden))
        p[f"{key}.wh"] = _uniform(rng, hidden, (hidden, 4 * hidden))
        b = _uniform(rng, n_in, (4 * hidden,))
        b[hidden:2 * hidden] = 1.0  # forget gate
        p[f"{key}.b"] = b


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng([seed, 7])
    h = cfg.hidden_dim
    p = Params()
    _linear(p, rng, "backbone.l1", cfg.frame_dim, h)
    _linear(p, rng, "backbone.l2", h, h)
    _linear(p, rng, "detect.loc", h, 2)
    _linear(p, rng, "detect.summary", h, cfg.summary_dim)
    _linear(p, rng, "detect.aux", h, cfg.classes)
    for stream, ((first, k1), (second, k2)) in STREAMS.items():
        _encoder(p, rng, f"{stream}.{first}", k1 * h, h)
        _encoder(p, rng, f"{stream}.{second}", k2 * h, h)
    _linear(p, rng, "head", cfg.fused_dim + cfg.summary_dim, cfg.classes)
    return p


# --------------------------------------------------------------------------
# building blocks

def linear(x: dc.DiffArray, w: dc.DiffArray, b: dc.DiffArray) -> dc.DiffArray:
    return dc.affine(x, w, b)


def backbone_encode(frames, params: Params) -> dc.DiffArray:
    """Two-layer perceptron applied to every frame independently: ``[..., D] -> [..., H]``."""
    frames = dc.constant(frames)
    w1 = params["backbone.l1.w"]
    if frames.shape[-1] != w1.shape[0]:
        raise dc.ShapeError(f"backbone expects frame dim {w1.shape[0]}, got {frames.shape}")
    hidden = dc.unary("relu", linear(frames, w1, params["backbone.l1.b"]))
    return linear(hidden, params["backbone.l2.w"], params["backbone.l2.b"])


def delta_scale(T: int, frames_in: int) -> float:
    return T / (2.0 * frames_in)


def detect(features: dc.DiffArray, params: Params, T: int, frames_in: int):
    """Location, stride, gated summary and auxiliary logits from pre-sampled features.

    ``features`` is ``[B, n_u, H]`` (or ``[n_u, H]``); returns ``mu[B]``,
    ``delta[B]``, ``summary[B, S]``, ``aux[B, K]``.
    """
    features = dc.constant(features)
    single = features.ndim == 2
    if single:
        features = dc.reshape(features, (1,) + features.shape)
    if features.shape[1] == 0:
        raise ValueError("detect needs at least one pre-sampled frame")
    pooled = dc.mean(features, axis=1)
    loc = linear(pooled, params["detect.loc.w"], params["detect.loc.b"])
    mu = dc.unary("sigmoid", dc.index(loc, (slice(None), 0)))
    delta = dc.scale(dc.unary("softplus", dc.index(loc, (slice(None), 1))), delta_scale(T, frames_in))
    summary = dc.unary("sigmoid", linear(pooled, params["detect.summary.w"], params["detect.summary.b"]))
    aux = linear(pooled, params["detect.aux.w"], params["detect.aux.b"])
    if single:
        return (dc.reshape(mu, ()), dc.reshape(delta, ()), dc.reshape(summary, summary.shape[1:]),
                dc.reshape(aux, aux.shape[1:]))
    return mu, delta, summary, aux


def _run_direction(wh: dc.DiffArray, steps, b: int) -> dc.DiffArray:
    hidden = wh.shape[0]
    c = dc.DiffArray(np.zeros((b, hidden)))
    h = None
    for z in steps:
        if h is not None:
            z = dc.addmm(z, h, wh)
        h, c = dc.lstm_cell(z, c)
    return h


def sequence_encode(x, enc: dict[str, dc.DiffArray]) -> dc.DiffArray:
    """Bidirectional LSTM; returns final forward and backward states concatenated.

    ``x`` is ``[B, L, H_in]`` (or ``[L, H_in]``); output ``[B, 2H]``.
    ``enc`` maps ``fwd.wx``, ``fwd.wh``, ``fwd.b`` and the ``bwd.*`` analogues.
    """
    x = dc.constant(x)
    single = x.ndim == 2
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"sequence_encode needs a non-empty [B, L, H] sequence, got {x.shape}")
    finals = []
    for direction in ("fwd", "bwd"):
        steps = dc.unstack(linear(x, enc[f"{direction}.wx"], enc[f"{direction}.b"]), axis=1)
        if direction == "bwd":
            steps = steps[::-1]
        finals.append(_run_direction(enc[f"{direction}.wh"], steps, x.shape[0]))
    out = dc.concat(finals, axis=-1)
    return dc.reshape(out, out.shape[1:]) if single else out


def _encode_grouped(x: dc.DiffArray, enc) -> dc.DiffArray:
    """Encode each ``[..., L, C]`` group of a ``[B, G, L, C]`` array -> ``[B, G, 2H]``."""
    b, g, length, c = x.shape
    out = sequence_encode(dc.reshape(x, (b * g, length, c)), enc)
    return dc.reshape(out, (b, g, out.shape[-1]))


def stream_me(features: dc.DiffArray, params: Params, cfg: ModelConfig, clip_outputs: list | None = None):
    """Movement within contiguous clips, then emotion across the clip sequence."""
    clips = dc.rearrange_group(features, cfg.n1, cfg.n2)  # B, n1, n2, H
    per_clip = _encode_grouped(clips, params.prefixed("me.move"))  # B, n1, 2H
    if clip_outputs is not None:
        clip_outputs.append(per_clip)
    return sequence_encode(per_clip, params.prefixed("me.emo"))


def stream_em(features: dc.DiffArray, params: Params, cfg: ModelConfig):
    """Emotion across strided frames, then movement across the group sequence."""
    groups = dc.rearrange_stride(features, cfg.n1, cfg.n2)  # B, n2, n1, H
    per_group = _encode_grouped(groups, params.prefixed("em.emo"))  # B, n2, 2H
    return sequence_encode(per_group, params.prefixed("em.move"))


def dual_stream_forward(features, summary, params: Params, cfg: ModelConfig,
                        streams: str = "both") -> dc.DiffArray:
    """Class logits ``[B, K]`` from re-sampled features ``[B, n, H]`` and summary ``[B, S]``.

    ``streams`` restricts fusion to ``"me"`` or ``"em"`` (the other stream
    contributes zeros), used by single-stream checks.
    """
    features, summary = dc.constant(features), dc.constant(summary)
    single = features.ndim == 2
    if single:
        features = dc.reshape(features, (1,) + features.shape)
        summary = dc.reshape(summary, (1,) + summary.shape)
    if features.shape[1] != cfg.n1 * cfg.n2:
        raise dc.ShapeError(f"expected {cfg.n1 * cfg.n2} frames, got {features.shape}")
    if summary.shape[-1] != cfg.summary_dim:
        raise dc.ShapeError(f"expected summary dim {cfg.summary_dim}, got {summary.shape}")
    b = features.shape[0]
    zeros = dc.DiffArray(np.zeros((b, 2 * cfg.hidden_dim)))
    f_me = stream_me(features, params, cfg) if streams in ("both", "me") else zeros
    f_em = stream_em(features, params, cfg) if streams in ("both", "em") else zeros
    fused = dc.concat([f_me, f_em], axis=-1) if cfg.fusion == "concat" else dc.add(f_me, f_em)
    logits = linear(dc.concat([fused, summary], axis=-1), params["head.w"], params["head.b"])
    return dc.reshape(logits, logits.shape[1:]) if single else logits


# --------------------------------------------------------------------------
# full recogniser

@dataclass
class Outputs:
    logits: dc.DiffArray
    aux_logits: dc.DiffArray
    mu: dc.DiffArray
    delta: dc.DiffArray
    summary: dc.DiffArray


def forward(frames: np.ndarray, params: Params, cfg: ModelConfig, soft: bool = False) -> Outputs:
    """Detect -> re-sample -> dual stream on a batch of sequences ``[B, T, D]``.

    ``soft`` selects the differentiable kernel re-sampler (training); otherwise
    frames are picked by hard rounded indices.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != cfg.frame_dim:
        raise dc.ShapeError(f"expected [B, T, {cfg.frame_dim}] frames, got {frames.shape}")
    b, T, _ = frames.shape
    pre_idx = np.asarray(resampler.uniform_indices(T, cfg.detect_frames, allow_repeat=True))
    if soft:
        feats = backbone_encode(frames, params)
        pre = dc.gather(feats, np.broadcast_to(pre_idx, (b, len(pre_idx))))
        mu, delta, summary, aux = detect(pre, params, T, cfg.frames_in)
        picked = resampler.soft_resample(feats, mu, delta, cfg.frames_in)
    else:
        pre = backbone_encode(frames[:, pre_idx], params)
        mu, delta, summary, aux = detect(pre, params, T, cfg.frames_in)
        idx = resampler.key_indices_batch(mu.value, delta.value, cfg.frames_in, T)
        picked = backbone_encode(frames[np.arange(b)[:, None], idx], params)
    logits = dual_stream_forward(picked, summary, params, cfg)
    return Outputs(logits, aux, mu, delta, summary)
