"""Synthetic video-like sequences with ground-truth clean/noisy/hard tags.

Frame ``t`` of a class-``c`` sequence is::

    e_c * env(t) + A * sin(2*pi*(t mod p)/p + theta_c) * g_c + noise

``e_c`` and ``g_c`` are rows of a fixed orthonormal basis (``g_c`` falls back
to ``e_c`` when ``D < 2K``), ``env`` ramps from 0.5 to 1.0 over the sequence
and ``theta_c = pi*c/K``. The slow term carries the class in every clip; the
period-4 motif carries it again on its own direction.

Hard samples splice 2-3 segments of different classes and take the label of
the longest one. Label noise flips clean training labels uniformly to a
wrong class.
"""
from __future__ import annotations

import enum
import functools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"RDF1"
VERSION = 1
MOTIF_PERIOD = 4
MOTIF_AMPLITUDE = 0.5
ENV_START, ENV_END = 0.5, 1.0
BASIS_SEED = 20240917


class Kind(enum.IntEnum):
    CLEAN = 0
    INJECTED_NOISY = 1
    INJECTED_HARD = 2

    @property
    def label(self) -> str:
        return {0: "Clean", 1: "InjectedNoisy", 2: "InjectedHard"}[int(self)]

    @classmethod
    def parse(cls, text: str) -> "Kind":
        return {"Clean": cls.CLEAN, "InjectedNoisy": cls.INJECTED_NOISY,
                "InjectedHard": cls.INJECTED_HARD}[text]


@dataclass
class VideoSample:
    id: int
    frames: np.ndarray  # T x D
    label: int
    kind: Kind = Kind.CLEAN
    split: str = "train"
    true_label: int | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class GenConfig:
    classes: int = 4
    train: int = 2000
    test: int = 1000
    frames: int = 64
    dim: int = 8
    noise_rate: float = 0.10
    hard_rate: float = 0.20
    frame_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < self.classes:
            raise ValueError(f"dim={self.dim} cannot hold {self.classes} orthogonal class directions")
        if min(self.train, self.test, self.frames) < 1:
            raise ValueError("train, test and frame counts must be >= 1")
        if not (0 <= self.noise_rate < 1 and 0 <= self.hard_rate <= 1
                and self.noise_rate + self.hard_rate <= 1):
            raise ValueError(f"bad rates noise={self.noise_rate}, hard={self.hard_rate}")
        if self.frame_noise < 0:
            raise ValueError("frame_noise must be >= 0")


class DatasetFormatError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


# --------------------------------------------------------------------------
# generation

@functools.lru_cache(maxsize=None)
def class_basis(dim: int) -> np.ndarray:
    """Fixed orthonormal basis of R^dim (rows)."""
    a = np.random.default_rng(BASIS_SEED).standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    basis = (q * np.sign(np.diag(r))).T
    basis.setflags(write=False)
    return basis


def envelope(T: int) -> np.ndarray:
    if T == 1:
        return np.array([ENV_END])
    return ENV_START + (ENV_END - ENV_START) * np.arange(T) / (T - 1)


def class_template(c: int, T: int, cfg: GenConfig) -> np.ndarray:
    """Noise-free ``T x D`` dynamics of class ``c``."""
    basis = class_basis(cfg.dim)
    k = cfg.classes
    e = basis[c]
    g = basis[k + c] if cfg.dim >= 2 * k else e
    t = np.arange(T)
    phase = 2 * np.pi * (t % MOTIF_PERIOD) / MOTIF_PERIOD + np.pi * c / k
    return envelope(T)[:, None] * e[None, :] + MOTIF_AMPLITUDE * np.sin(phase)[:, None] * g[None, :]


def sample_rng(seed: int, split: str, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODE[split], sample_id])


_SPLIT_CODE = {"train": 1, "test": 2}


def generate_class_sample(c: int, cfg: GenConfig, rng: np.random.Generator,
                          sample_id: int = 0, split: str = "train") -> VideoSample:
    if not 0 <= c < cfg.classes:
        raise ValueError(f"class {c} out of range for {cfg.classes} classes")
    frames = class_template(c, cfg.frames, cfg)
    frames = frames + cfg.frame_noise * rng.standard_normal(frames.shape)
    return VideoSample(sample_id, frames, c, Kind.CLEAN, split, c)


def segment_label(classes: Sequence[int], lengths: Sequence[int]) -> int:
    """Class of the longest segment; equal lengths go to the lowest class index."""
    best = max(lengths)
    return min(c for c, n in zip(classes, lengths) if n == best)


def compose_segments(classes: Sequence[int], lengths: Sequence[int], cfg: GenConfig,
                     rng: np.random.Generator, sample_id: int = 0, split: str = "train") -> VideoSample:
    if len(classes) != len(lengths) or sum(lengths) != cfg.frames or min(lengths) < 1:
        raise ValueError(f"segments {list(lengths)} do not tile {cfg.frames} frames")
    frames = np.empty((cfg.frames, cfg.dim))
    start = 0
    for c, n in zip(classes, lengths):
        frames[start:start + n] = class_template(c, cfg.frames, cfg)[start:start + n]
        start += n
    frames = frames + cfg.frame_noise * rng.standard_normal(frames.shape)
    label = segment_label(classes, lengths)
    return VideoSample(sample_id, frames, label, Kind.INJECTED_HARD, split, label)


def make_hard_sample(cfg: GenConfig, rng: np.random.Generator, sample_id: int = 0,
                     split: str = "train") -> VideoSample:
    """Splice 2-3 segments of distinct classes, each at least ``T / (2 * segments)`` frames."""
    if cfg.classes < 2:
        raise ValueError("hard samples need at least two classes")
    n_seg = int(rng.integers(2, 4)) if cfg.classes >= 3 else 2
    n_seg = min(n_seg, cfg.frames)
    classes = rng.choice(cfg.classes, size=n_seg, replace=False).tolist()
    min_len = max(1, cfg.frames // (2 * n_seg))
    spare = cfg.frames - min_len * n_seg
    cuts = np.sort(rng.integers(0, spare + 1, size=n_seg - 1))
    extra = np.diff(np.concatenate([[0], cuts, [spare]]))
    lengths = (min_len + extra).astype(int).tolist()
    return compose_segments(classes, lengths, cfg, rng, sample_id, split)


def inject_label_noise(samples: list[VideoSample], rho: float, rng: np.random.Generator,
                       classes: int | None = None) -> list[VideoSample]:
    """Flip ``floor(rho*N)`` clean labels to a uniformly drawn wrong class."""
    if not 0 <= rho < 1:
        raise ValueError(f"noise rate must lie in [0, 1), got {rho}")
    k = classes or (max(s.label for s in samples) + 1 if samples else 2)
    n_flip = int(np.floor(rho * len(samples) + 1e-9))
    clean = [i for i, s in enumerate(samples) if s.kind == Kind.CLEAN]
    if n_flip > len(clean):
        raise ValueError(f"only {len(clean)} clean samples available to flip {n_flip}")
    chosen = rng.choice(len(clean), size=n_flip, replace=False) if n_flip else []
    out = list(samples)
    for j in sorted(int(c) for c in chosen):
        i = clean[j]
        s = samples[i]
        wrong = (s.label + int(rng.integers(1, k))) % k
        out[i] = VideoSample(s.id, s.frames, wrong, Kind.INJECTED_NOISY, s.split, s.label)
    return out


def _generate_split(cfg: GenConfig, split: str, n: int, id_base: int, noise: float) -> list[VideoSample]:
    plan = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], 2**31 - 1])
    n_hard = int(np.floor(cfg.hard_rate * n + 1e-9))
    hard = set(plan.choice(n, size=n_hard, replace=False).tolist()) if n_hard else set()
    samples = []
    for j in range(n):
        sid = id_base + j
        rng = sample_rng(cfg.seed, split, sid)
        if j in hard:
            samples.append(make_hard_sample(cfg, rng, sid, split))
        else:
            samples.append(generate_class_sample(int(rng.integers(cfg.classes)), cfg, rng, sid, split))
    return inject_label_noise(samples, noise, plan, cfg.classes)


def generate(cfg: GenConfig) -> list[VideoSample]:
    """Train then test samples; ids are global and ordered. Label noise hits train only."""
    return (_generate_split(cfg, "train", cfg.train, 0, cfg.noise_rate)
            + _generate_split(cfg, "test", cfg.test, cfg.train, 0.0))


def split_of(samples: Sequence[VideoSample], split: str) -> list[VideoSample]:
    return [s for s in samples if s.split == split]


# --------------------------------------------------------------------------
# on-disk format

_HEADER = struct.Struct("<4sIIII")


def write_dataset(samples: Sequence[VideoSample], path, meta: dict | None = None) -> Path:
    """Write ``data.bin`` and ``manifest.jsonl`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    t, d = (samples[0].frames.shape if n else (0, 0))
    for s in samples:
        if s.frames.shape != (t, d):
            raise ValueError(f"sample {s.id} has shape {s.frames.shape}, expected {(t, d)}")
    with open(out / "data.bin", "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, t, d))
        if n:
            fh.write(np.stack([s.frames for s in samples]).astype("<f4").tobytes())
            fh.write(np.array([s.label for s in samples], dtype="<u2").tobytes())
            fh.write(np.array([int(s.kind) for s in samples], dtype="u1").tobytes())
    with open(out / "manifest.jsonl", "w") as fh:
        for s in samples:
            fh.write(json.dumps({"id": s.id, "label": s.label, "kind": s.kind.label,
                                 "split": s.split}) + "\n")
    if meta is not None:
        with open(out / "gen_config.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
    return out


def read_dataset(path) -> list[VideoSample]:
    root = Path(path)
    bin_path = root / "data.bin"
    man_path = root / "manifest.jsonl"
    try:
        raw = bin_path.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(bin_path, "file not found") from None
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(bin_path, "truncated header")
    magic, version, n, t, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(bin_path, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(bin_path, f"unsupported version {version}")
    n_vals = n * t * d
    expected = _HEADER.size + 4 * n_vals + 2 * n + n
    if len(raw) < expected:
        raise DatasetFormatError(bin_path, f"truncated payload: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise DatasetFormatError(bin_path, f"{len(raw) - expected} trailing bytes")
    off = _HEADER.size
    frames = np.frombuffer(raw, "<f4", n_vals, off).astype(np.float64).reshape(n, t, d)
    off += 4 * n_vals
    labels = np.frombuffer(raw, "<u2", n, off)
    kinds = np.frombuffer(raw, "u1", n, off + 2 * n)
    if np.any(kinds > 2):
        raise DatasetFormatError(bin_path, "unknown kind code")
    try:
        with open(man_path) as fh:
            manifest = [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise DatasetFormatError(man_path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(man_path, f"bad JSON line: {exc}") from None
    if len(manifest) != n:
        raise DatasetFormatError(man_path, f"{len(manifest)} manifest rows for {n} payload samples")
    out = []
    for i, row in enumerate(manifest):
        if row["label"] != int(labels[i]) or Kind.parse(row["kind"]) != Kind(int(kinds[i])):
            raise DatasetFormatError(man_path, f"row {i} disagrees with payload")
        out.append(VideoSample(int(row["id"]), frames[i], int(labels[i]), Kind(int(kinds[i])),
                               row.get("split", "train")))
    return out


def gen_config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)

