"""Training loop: AdamW with warmup + cosine schedule and per-epoch triage refresh."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import metrics, nets, resampler
from . import triage as tr
from .checkpoint import Checkpoint
from .synthdata import VideoSample

MODES = ("vanilla", "bigloss-up", "bigloss-down", "hard-only", "noisy-only", "full")
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    warmup: int = 10
    lr: float = 7e-4
    min_lr: float = 7e-6
    weight_decay: float = 0.05
    batch: int = 128
    smoothing: float = 0.1
    aux_weight: float = 0.5
    jitter: float = 0.05
    seed: int = 0
    mode: str = "full"
    triage: tr.TriageConfig = field(default_factory=tr.TriageConfig)
    bigloss_up: float = 1.5
    bigloss_down: float = 0.5
    eval_every: int = 1
    # drop assigned-Noisy samples from batches outright instead of weighting them
    delete_noisy: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.warmup < 0:
            raise ValueError("epochs and warmup must be >= 0")
        if self.epochs > 0 and self.warmup >= self.epochs:
            raise ValueError(f"warmup ({self.warmup}) must be shorter than epochs ({self.epochs})")
        if not 0 < self.min_lr <= self.lr:
            raise ValueError(f"need 0 < min_lr <= lr, got {self.min_lr}, {self.lr}")
        if self.weight_decay < 0 or self.batch < 1 or self.jitter < 0 or self.aux_weight < 0:
            raise ValueError("weight_decay, jitter, aux_weight must be >= 0 and batch >= 1")
        if not 0 <= self.smoothing < 1:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("triage"), dict):
            d["triage"] = tr.TriageConfig(**d["triage"])
        return cls(**d)


def effective_triage(cfg: TrainConfig) -> tr.TriageConfig:
    """Triage thresholds with the branches the ablation mode switches off zeroed."""
    t = cfg.triage
    if cfg.mode == "hard-only":
        return replace(t, t_noisy=0.0)
    if cfg.mode == "noisy-only":
        return replace(t, t_hard=0.0)
    return t


# --------------------------------------------------------------------------
# schedule and optimiser

def lr_schedule(progress: float, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine down to ``min_lr`` at progress 1."""
    warm = cfg.warmup / cfg.epochs if cfg.epochs else 0.0
    if warm > 0 and progress < warm:
        return cfg.lr * progress / warm
    s = (progress - warm) / (1.0 - warm) if warm < 1 else 1.0
    s = min(max(s, 0.0), 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * s))


def step_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate of 0-based optimizer step ``step``; the last step lands on ``min_lr``."""
    return lr_schedule((step + 1) / total_steps, cfg)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise dc.ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                f"parameter has {params[name].shape}")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, g in grads.items():
        theta = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# --------------------------------------------------------------------------
# inference helpers

def _map_chunks(fn: Callable[[np.ndarray], np.ndarray], frames: np.ndarray, chunk: int,
                threads: int) -> np.ndarray:
    """Apply ``fn`` over fixed-size chunks; chunking, not threads, fixes the arithmetic."""
    pieces = [frames[i:i + chunk] for i in range(0, len(frames), chunk)]
    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(fn, pieces))
    else:
        out = [fn(p) for p in pieces]
    return np.concatenate(out, axis=0)


def predict_logits(frames: np.ndarray, params: nets.Params, cfg: nets.ModelConfig,
                   chunk: int = EVAL_CHUNK, threads: int = 1) -> np.ndarray:
    """Hard-index inference logits ``[N, K]``."""
    if len(frames) == 0:
        return np.zeros((0, cfg.classes))
    return _map_chunks(lambda x: nets.forward(x, params, cfg, soft=False).logits.value,
                       frames, chunk, threads)


def clip_frame_indices(T: int, m: int, n: int) -> list[np.ndarray]:
    """Per clip, ``n`` frame indices uniform-sampled inside the clip (repeating if short)."""
    return [r.start + np.asarray(resampler.uniform_indices(len(r), n, allow_repeat=True))
            for r in tr.split_clips(T, m)]


def clip_predictions(frames: np.ndarray, params: nets.Params, cfg: nets.ModelConfig, m: int,
                     chunk: int = EVAL_CHUNK, threads: int = 1) -> np.ndarray:
    """Predicted class of each of the ``m`` clips of each sample: ``[N, m]``."""
    cols = [predict_logits(frames[:, idx], params, cfg, chunk, threads).argmax(axis=1)
            for idx in clip_frame_indices(frames.shape[1], m, cfg.frames_in)]
    return np.stack(cols, axis=1)


def per_sample_loss(logits: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    return dc.smoothed_cross_entropy(dc.DiffArray(logits), labels, eps).value


def agreement_pass(ids: Sequence[int], frames: np.ndarray, labels: np.ndarray, params: nets.Params,
                   cfg: nets.ModelConfig, m: int, eps: float, epoch: int = 0,
                   with_clips: bool = True, threads: int = 1
                   ) -> tuple[list[tr.AgreementRecord], np.ndarray]:
    """No-gradient pass: clip agreement plus full-sample loss. Returns records and full predictions."""
    logits = predict_logits(frames, params, cfg, threads=threads)
    losses = per_sample_loss(logits, labels, eps)
    clips = clip_predictions(frames, params, cfg, m, threads=threads) if with_clips else None
    records = []
    for j, sid in enumerate(ids):
        if clips is not None:
            records.append(tr.make_record(int(sid), clips[j], losses[j], epoch, int(labels[j])))
        else:
            records.append(tr.AgreementRecord(int(sid), [], float("nan"), float(losses[j]), epoch,
                                              int(labels[j])))
    return records, logits.argmax(axis=1)


# --------------------------------------------------------------------------
# history

HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "n_hard", "n_noisy", "n_ordinary",
                   "train_war", "train_uar", "test_war", "test_uar"]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    n_hard: int
    n_noisy: int
    n_ordinary: int
    train_war: float
    train_uar: float
    test_war: float = float("nan")
    test_uar: float = float("nan")


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.epochs:
                w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                            for c in HISTORY_COLUMNS])

    @staticmethod
    def read_csv(path) -> "TrainHistory":
        out = TrainHistory()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.epochs.append(EpochRecord(
                    int(row["epoch"]), float(row["lr"]), float(row["train_loss"]), int(row["n_hard"]),
                    int(row["n_noisy"]), int(row["n_ordinary"]), float(row["train_war"]),
                    float(row["train_uar"]), float(row["test_war"]), float(row["test_uar"])))
        return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: TrainHistory
    records: list[tr.AgreementRecord] | None = None  # last triage pass
    assignments: list[tr.TriageAssignment] | None = None


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


# --------------------------------------------------------------------------
# training

def stack_samples(samples: Sequence[VideoSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.array([s.id for s in samples], dtype=np.int64)
    frames = np.stack([np.asarray(s.frames, dtype=np.float64) for s in samples]) if samples else None
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return ids, frames, labels


def check_dims(frames: np.ndarray, labels: np.ndarray, cfg: nets.ModelConfig) -> None:
    if frames.shape[2] != cfg.frame_dim:
        raise dc.ShapeError(f"dataset frame dim {frames.shape[2]} != model frame dim {cfg.frame_dim}")
    if labels.size and labels.max() >= cfg.classes:
        raise ValueError(f"label {labels.max()} outside the model's {cfg.classes} classes")


def _jitter(frames: np.ndarray, ids: np.ndarray, seed: int, epoch: int, sigma: float) -> np.ndarray:
    if sigma == 0:
        return frames
    noise = np.stack([np.random.default_rng([seed, epoch, int(i), 13]).standard_normal(frames.shape[1:])
                      for i in ids])
    return frames + sigma * noise


def _assign(cfg: TrainConfig, records: list[tr.AgreementRecord]) -> list[tr.TriageAssignment]:
    t = cfg.triage
    if cfg.mode == "bigloss-up":
        return tr.assign_big_loss(records, t.t_hard, cfg.bigloss_up, t.lambda_ordinary)
    if cfg.mode == "bigloss-down":
        return tr.assign_big_loss(records, t.t_hard, cfg.bigloss_down, t.lambda_ordinary)
    return tr.assign_triage(records, effective_triage(cfg))


def _scores(preds, labels, K) -> tuple[float, float]:
    if len(labels) == 0:
        return float("nan"), float("nan")
    cm = metrics.confusion(preds, labels, K)
    return metrics.war(cm), metrics.uar(cm)


def train(samples: Sequence[VideoSample], model_cfg: nets.ModelConfig, cfg: TrainConfig,
          test: Sequence[VideoSample] | None = None, threads: int = 1,
          log: Callable[[str], None] | None = None) -> TrainResult:
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    ids, frames, labels = stack_samples(samples)
    check_dims(frames, labels, model_cfg)
    if test:
        test_ids, test_frames, test_labels = stack_samples(test)
        check_dims(test_frames, test_labels, model_cfg)
    params = nets.init_params(model_cfg, cfg.seed)
    names = params.names()
    values = params.values()
    state = OptimizerState()
    history = TrainHistory()
    n = len(ids)
    batch = min(cfg.batch, n)
    n_batches = -(-n // batch)
    total_steps = cfg.epochs * n_batches
    tcfg = effective_triage(cfg)
    lam = np.full(n, tcfg.lambda_ordinary)
    noisy = np.zeros(n, dtype=bool)
    records = assignments = None
    K = model_cfg.classes

    for epoch in range(cfg.epochs):
        if cfg.mode != "vanilla" and epoch >= cfg.triage.warmup_epochs:
            records, _ = agreement_pass(ids, frames, labels, params, model_cfg, tcfg.m, cfg.smoothing,
                                        epoch, with_clips=not cfg.mode.startswith("bigloss"),
                                        threads=threads)
            assignments = _assign(cfg, records)
            lam = np.array([a.lam for a in assignments])
            noisy = np.array([a.category == tr.Category.NOISY for a in assignments])
            counts = tr.category_counts(assignments)
        else:
            counts = {tr.Category.HARD: 0, tr.Category.NOISY: 0, tr.Category.ORDINARY: n}

        perm = np.random.default_rng([cfg.seed, epoch, 11]).permutation(n)
        loss_sum, loss_count, lr = 0.0, 0, lr_schedule(0.0, cfg)
        seen_pred, seen_label = [], []
        for b in range(n_batches):
            step = epoch * n_batches + b
            lr = step_lr(step, total_steps, cfg)
            rows = perm[b * batch:(b + 1) * batch]
            if cfg.delete_noisy:
                rows = rows[~noisy[rows]]
            rows = rows[lam[rows] > 0]  # zero-weight samples take no part in backward
            if rows.size == 0:
                continue
            x = _jitter(frames[rows], ids[rows], cfg.seed, epoch, cfg.jitter)
            y = labels[rows]
            with dc.Tape() as tape:
                out = nets.forward(x, params, model_cfg, soft=True)
                main = dc.smoothed_cross_entropy(out.logits, y, cfg.smoothing)
                aux = dc.smoothed_cross_entropy(out.aux_logits, y, cfg.smoothing)
                per = dc.add(main, dc.scale(aux, cfg.aux_weight))
                weighted = dc.mul(per, dc.DiffArray(lam[rows]))
                loss = dc.scale(dc.sum_(weighted), 1.0 / rows.size)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            grads = tape.backward(loss)
            adamw_step(values, {k: grads[params[k]] for k in names}, state, lr, cfg.weight_decay)
            loss_sum += float(weighted.value.sum())
            loss_count += rows.size
            seen_pred.append(out.logits.value.argmax(axis=1))
            seen_label.append(y)

        tw, tu = _scores(np.concatenate(seen_pred) if seen_pred else [],
                         np.concatenate(seen_label) if seen_label else [], K)
        rec = EpochRecord(epoch, lr, loss_sum / loss_count if loss_count else float("nan"),
                          counts[tr.Category.HARD], counts[tr.Category.NOISY],
                          counts[tr.Category.ORDINARY], tw, tu)
        last = epoch == cfg.epochs - 1
        if test and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            rec.test_war, rec.test_uar = _scores(
                predict_logits(test_frames, params, model_cfg, threads=threads).argmax(axis=1),
                test_labels, K)
        history.epochs.append(rec)
        if log:
            log(f"epoch {epoch:3d} lr {lr:.3e} loss {rec.train_loss:.4f} "
                f"hard {rec.n_hard} noisy {rec.n_noisy} train WAR {tw:.4f} test WAR {rec.test_war:.4f}")

    meta = {"train_config": cfg.to_dict(), "epochs_completed": cfg.epochs, "n_train": n}
    return TrainResult(Checkpoint(model_cfg, params, meta), history, records, assignments)


# --------------------------------------------------------------------------
# evaluation

def evaluate(ckpt: Checkpoint, samples: Sequence[VideoSample], m: int = 4, smoothing: float = 0.1,
             threads: int = 1) -> metrics.MetricsReport:
    """Hard-index inference over ``samples`` with confusion, WAR/UAR and agreement tables."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    ids, frames, labels = stack_samples(samples)
    check_dims(frames, labels, ckpt.model)
    records, preds = agreement_pass(ids, frames, labels, ckpt.params, ckpt.model, m, smoothing,
                                    threads=threads)
    return metrics.build_report(preds, labels, ckpt.model.classes, records, m)
