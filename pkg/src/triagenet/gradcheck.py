"""Central finite-difference checks for every differentiable operation."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import nets, resampler

H_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_err: float
    passed: bool


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = H_STEP) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        keep = flat[j]
        flat[j] = keep + h
        up = fn()
        flat[j] = keep - h
        down = fn()
        flat[j] = keep
        gflat[j] = (up - down) / (2 * h)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(name: str, build: Callable[..., dc.DiffArray], inputs: Sequence[np.ndarray],
          tol: float = TOLERANCE, h: float = H_STEP) -> CheckResult:
    """Compare tape gradients of ``build(*leaves)`` against central differences."""
    leaves = [dc.DiffArray(x, requires_grad=True) for x in inputs]
    with dc.Tape() as tape:
        out = build(*leaves)
    grads = tape.backward(out)

    def value() -> float:
        return float(build(*leaves).value)

    worst = 0.0
    for leaf in leaves:
        worst = max(worst, rel_error(grads[leaf], numeric_grad(value, leaf.value, h)))
    return CheckResult(name, worst, worst < tol)


def _project(seed: int, y: dc.DiffArray) -> dc.DiffArray:
    """Fixed random linear functional (seeded by shape) covering every output element."""
    w = np.random.default_rng([seed, 99, *y.shape]).standard_normal(y.shape)
    return dc.sum_(dc.mul(y, dc.DiffArray(w)))


def _away_from(rng, shape, lo=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)


def op_checks(seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    P = lambda y: _project(seed, y)  # noqa: E731
    cases: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("matmul", lambda a, b: P(dc.matmul(a, b)), [r(3, 4), r(4, 2)]),
        ("matmul:batched", lambda a, b: P(dc.matmul(a, b)), [r(2, 3, 4), r(4, 2)]),
        ("affine", lambda x, w, b: P(dc.affine(x, w, b)), [r(2, 3, 4), r(4, 5), r(5)]),
        ("addmm", lambda c, a, b: P(dc.addmm(c, a, b)), [r(3, 2), r(3, 4), r(4, 2)]),
        ("bmm", lambda a, b: P(dc.bmm(a, b)), [r(2, 3, 4), r(2, 4, 2)]),
    ]
    for kind in dc.UNARY_RULES:
        x = np.abs(r(3, 4)) + 0.1 if kind == "log" else _away_from(rng, (3, 4))
        cases.append((f"unary:{kind}", lambda x, k=kind: P(dc.unary(k, x)), [x]))
    for kind in ("add", "sub", "mul", "div", "max"):
        a, b = r(3, 4), r(3, 4)
        if kind == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if kind == "max":
            b = a + np.where(rng.random((3, 4)) < 0.5, -0.3, 0.3)
        cases.append((f"binary:{kind}", lambda a, b, k=kind: P(dc.binary(k, a, b)), [a, b]))
    cases += [
        ("scale", lambda x: P(dc.scale(x, -1.7)), [r(3, 2)]),
        ("shift", lambda x: P(dc.unary("square", dc.shift(x, 0.3))), [r(3, 2)]),
        ("broadcast_to", lambda x: P(dc.broadcast_to(x, (2, 3, 4))), [r(3, 1)]),
        ("reshape", lambda x: P(dc.reshape(x, (4, 3))), [r(2, 6)]),
        ("index", lambda x: P(dc.index(x, (slice(None), 1))), [r(3, 4)]),
        ("gather", lambda x: P(dc.gather(x, np.array([[0, 2, 2], [3, 1, 0]]))), [r(2, 4, 3)]),
        ("unstack", lambda x: P(dc.concat(dc.unstack(x, axis=1)[::-1], axis=-1)), [r(2, 3, 4)]),
        ("sum", lambda x: P(dc.sum_(x, axis=1)), [r(3, 4)]),
        ("mean", lambda x: P(dc.mean(x, axis=0)), [r(3, 4)]),
        ("concat", lambda a, b: P(dc.concat([a, b], axis=1)), [r(2, 3), r(2, 2)]),
        ("rearrange_group", lambda x: P(dc.rearrange_group(x, 2, 3)), [r(2, 6, 3)]),
        ("rearrange_stride", lambda x: P(dc.rearrange_stride(x, 2, 3)), [r(2, 6, 3)]),
        ("inverse_rearrange_group", lambda x: P(dc.inverse_rearrange_group(x)), [r(3, 2, 4)]),
        ("inverse_rearrange_stride", lambda x: P(dc.inverse_rearrange_stride(x)), [r(3, 2, 4)]),
        ("softmax", lambda x: P(dc.softmax(x)), [r(3, 5)]),
        ("log_softmax", lambda x: P(dc.log_softmax(x)), [r(3, 5)]),
        ("smoothed_cross_entropy", lambda x: dc.smoothed_cross_entropy(x, 2, 0.1), [r(5)]),
        ("smoothed_cross_entropy:batched",
         lambda x: dc.sum_(dc.smoothed_cross_entropy(x, np.array([0, 3, 1]), 0.1)), [r(3, 4)]),
        ("lstm_cell", lambda z, c: P(dc.concat(list(dc.lstm_cell(z, c)), axis=-1)), [r(3, 8), r(3, 2)]),
        ("soft_resample",
         lambda f, mu, d: P(resampler.soft_resample(f, mu, d, 4)),
         [r(2, 12, 3), np.array([0.3, 0.6]), np.array([1.7, 2.4])]),
    ]
    return cases


def tiny_model_check(seed: int = 0) -> CheckResult:
    """End-to-end gradient of the training loss of a tiny recogniser."""
    cfg = nets.ModelConfig(frame_dim=3, hidden_dim=2, classes=3, frames_in=4, n1=2, n2=2,
                           detect_frames=4, summary_dim=2)
    params = nets.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 17)
    frames = rng.standard_normal((2, 8, 3))
    labels = np.array([0, 2])
    names = params.names()

    def build(*leaves):
        p = nets.Params(dict(zip(names, leaves)))
        out = nets.forward(frames, p, cfg, soft=True)
        main = dc.smoothed_cross_entropy(out.logits, labels, 0.1)
        aux = dc.smoothed_cross_entropy(out.aux_logits, labels, 0.1)
        return dc.mean(dc.add(main, dc.scale(aux, 0.5)))

    return check("end_to_end:tiny_model", build, [v.value.copy() for _, v in params.items()])


def run_suite(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    results = [check(name, build, inputs, tol) for name, build, inputs in op_checks(seed)]
    results.append(tiny_model_check(seed))
    return results


def report(results: Sequence[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34s} max rel err {r.rel_err:.3e}"
             for r in results]
    n_fail = sum(not r.passed for r in results)
    tail = f"{len(results) - n_fail}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    return "\n".join(lines + [tail])


def main(seed: int = 0) -> tuple[bool, str]:
    t0 = time.perf_counter()
    results = run_suite(seed)
    return all(r.passed for r in results), report(results, time.perf_counter() - t0)
