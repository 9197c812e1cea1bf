"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import GenreClassifier, ModelConfig, RecurrentVAE, forward_loss, genre_label

STEP = 1e-5
MIN_FLOOR = 1e-7
# denominator floor in rounding units of the difference quotient
FLOOR_ULPS = 2000


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    n_checked: int


def resolution_floor(loss_value: float, step: float = STEP) -> float:
    """Denominator floor: the difference quotient cannot resolve gradients below
    roughly eps * |loss| / step, so smaller magnitudes are not scored relatively."""
    return max(MIN_FLOOR, FLOOR_ULPS * np.finfo(float).eps * abs(loss_value) / step)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MIN_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    loss_fn: Callable[[], T.Tensor],
    params: dict[str, T.Tensor],
    step: float = STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradReport]:
    """Compare backward() against central differences of ``loss_fn``.

    ``loss_fn`` must be deterministic (fixed noise). With ``max_entries`` only a
    random subset of each parameter's entries is perturbed.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    floor = resolution_floor(loss.item(), step)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    reports = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        # perturbed passes need no graph and no per-op guard; the quotients are checked below
        guard = T.set_finite_check(False)
        try:
            with T.no_grad():
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = loss_fn().item()
                    flat[i] = orig - step
                    down = loss_fn().item()
                    flat[i] = orig
                    numeric[j] = (up - down) / (2 * step)
        finally:
            T.set_finite_check(guard)
        if not np.all(np.isfinite(numeric)):
            raise FloatingPointError(f"non-finite finite-difference loss for {name}")
        a = analytic[name].reshape(-1)[idx]
        err = relative_error(a, numeric, floor)
        worst = int(np.argmax(err)) if len(err) else 0
        reports.append(GradReport(
            name, float(err.max()) if len(err) else 0.0,
            np.unravel_index(idx[worst], p.shape) if len(err) else (), len(idx),
        ))
    return reports


def reduced_config(multitask: bool = False, seed: int = 3) -> ModelConfig:
    return ModelConfig(n_frames=8, d_hidden=8, dense=(16,), d_z=4, multitask=multitask, seed=seed)


def model_gradcheck(multitask: bool, seed: int = 3, batch: int = 2, max_entries: int | None = None) -> list[GradReport]:
    """Finite-difference sweep of the full training objective at reduced dims."""
    cfg = reduced_config(multitask, seed)
    model = RecurrentVAE(cfg)
    rng = np.random.default_rng(seed + 100)
    x = (rng.random((batch, cfg.n_frames, cfg.n_pitches)) < 0.1).astype(float)
    eps = rng.standard_normal((batch, cfg.d_z))
    if not multitask:
        return check_gradients(lambda: forward_loss(model, x, eps).total, model.parameters(), max_entries=max_entries)
    clf = GenreClassifier(reduced_config(False, seed + 1))
    clf.freeze()
    y = genre_label([True, False] * (batch // 2) + [True] * (batch % 2))
    return check_gradients(
        lambda: forward_loss(model, x, eps, y=y, classifier=clf).total,
        model.parameters(), max_entries=max_entries,
    )


def op_gradchecks(seed: int = 0) -> dict[str, float]:
    """Max relative error per primitive op on small random inputs."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return T.Tensor(rng.standard_normal(shape), requires_grad=True)

    a, b, c = leaf(3, 4), leaf(4, 5), leaf(3, 4)
    v = leaf(4)
    p = T.Tensor(rng.uniform(0.05, 0.95, (3, 4)), requires_grad=True)
    target = (rng.random((3, 4)) < 0.5).astype(float)
    w = rng.standard_normal((3, 5))
    w4 = rng.standard_normal((3, 4))
    w_stack = rng.standard_normal((3, 2, 4))
    pos = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    gp = T.GRUParams.init(rng, 4, 4)
    gp2 = T.GRUParams.init(rng, 4, 4)
    for t in (gp.b_r, gp.b_u, gp.b_c):
        t.data[...] = rng.standard_normal(4) * 0.3
    xs = [leaf(2, 4) for _ in range(3)]
    h0 = leaf(2, 4)

    cases = {
        "matmul": (lambda: T.sum(T.mul(T.matmul(a, b), w)), [a, b]),
        "add": (lambda: T.sum(T.mul(T.add(a, c), w4)), [a, c]),
        "sub": (lambda: T.sum(T.mul(T.sub(a, c), w4)), [a, c]),
        "mul": (lambda: T.sum(T.mul(a, c)), [a, c]),
        "add_bias": (lambda: T.sum(T.mul(T.add_bias(a, v), w4)), [a, v]),
        "sigmoid": (lambda: T.sum(T.mul(T.sigmoid(a), w4)), [a]),
        "tanh": (lambda: T.sum(T.mul(T.tanh(a), w4)), [a]),
        "exp": (lambda: T.sum(T.mul(T.exp(a), w4)), [a]),
        "log": (lambda: T.sum(T.mul(T.log(pos), w4)), [pos]),
        "square": (lambda: T.sum(T.mul(T.square(a), w4)), [a]),
        "sum": (lambda: T.sum(T.mul(T.sum(a, axis=0), v)), [a]),
        "mean": (lambda: T.mean(T.square(a)), [a]),
        "reshape": (lambda: T.sum(T.mul(T.reshape(a, (4, 3)), w4.reshape(4, 3))), [a]),
        "slice": (lambda: T.sum(T.square(a[1:, 2:])), [a]),
        "concat": (lambda: T.sum(T.mul(T.concat([a, c], axis=1), np.hstack([w4, w4 * 2]))), [a, c]),
        "stack": (lambda: T.sum(T.mul(T.stack([a, c], axis=1), w_stack)), [a, c]),
        "bce": (lambda: T.binary_cross_entropy(target, p), [p]),
        "gru_cell": (
            lambda: T.sum(T.square(T.gru_cell(xs[0], h0, gp))),
            [xs[0], h0, *gp.named("g").values()],
        ),
        "bgru": (
            lambda: T.sum(T.square(T.concat(T.bgru(xs, gp, gp2), axis=1))),
            [*xs, *gp.named("f").values(), *gp2.named("b").values()],
        ),
    }
    out = {}
    for name, (fn, leaves) in cases.items():
        reports = check_gradients(fn, {str(i): t for i, t in enumerate(leaves)})
        out[name] = max(r.max_rel_error for r in reports)
    return out

