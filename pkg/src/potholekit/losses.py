"""Reference implementations of the detector training losses.

These are plain numpy functions with hand-written gradients, meant for
checking numbers rather than for training:

* the two-stage (RPN) multi-task loss: log loss on objectness plus a
  smooth-L1 box term gated by the ground-truth label,
* the single-shot (SSD) loss: softmax confidence loss plus smooth-L1
  localisation loss, normalised by the number of matched default boxes,
* the anchor-relative ``(dx, dy, dw, dh)`` box encoding both regress.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import BoundingBox

EPS = 1e-7
BACKGROUND, POTHOLE = 0, 1


class KinkError(ValueError):
    """Finite differences requested at a point where the loss is not differentiable."""


def smooth_l1(x):
    """``0.5 x^2`` for ``|x| < 1``, else ``|x| - 0.5``; summed over array input."""
    a = np.abs(np.asarray(x, dtype=float))
    v = np.where(a < 1.0, 0.5 * a * a, a - 0.5)
    return float(v.sum())


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=float)
    g = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return float(g) if g.ndim == 0 else g


def near_smooth_l1_kink(x, margin: float) -> bool:
    return bool(np.any(np.abs(np.abs(np.asarray(x, dtype=float)) - 1.0) <= margin))


def encode_box(box: BoundingBox, anchor: BoundingBox) -> np.ndarray:
    """Regression target of ``box`` relative to ``anchor``: ``(dx, dy, log dw, log dh)``."""
    cx, cy = box.center
    cxa, cya = anchor.center
    wa, ha = anchor.width, anchor.height
    return np.array([(cx - cxa) / wa, (cy - cya) / ha, math.log(box.width / wa), math.log(box.height / ha)])


def decode_box(t: Sequence[float], anchor: BoundingBox) -> BoundingBox:
    cxa, cya = anchor.center
    wa, ha = anchor.width, anchor.height
    cx, cy = cxa + t[0] * wa, cya + t[1] * ha
    w, h = wa * math.exp(t[2]), ha * math.exp(t[3])
    return BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class AnchorPrediction:
    p: float
    p_star: int
    t: tuple
    t_star: tuple

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.p_star not in (0, 1):
            raise ValueError(f"p_star must be 0 or 1, got {self.p_star}")
        if len(self.t) != 4 or len(self.t_star) != 4:
            raise ValueError("t and t_star must have 4 components")
        if not all(math.isfinite(v) for v in (*self.t, *self.t_star)):
            raise ValueError("t and t_star must be finite")


def _rpn_arrays(batch: Sequence[AnchorPrediction]):
    if not batch:
        raise ValueError("empty anchor batch")
    p = np.array([a.p for a in batch], dtype=float)
    ps = np.array([a.p_star for a in batch], dtype=float)
    t = np.array([a.t for a in batch], dtype=float)
    ts = np.array([a.t_star for a in batch], dtype=float)
    return p, ps, t, ts


def _check_norms(n_cls, n_reg):
    if n_cls < 1 or n_reg < 1:
        raise ValueError("n_cls and n_reg must be >= 1")


def rpn_terms(batch, n_cls: int = 1, n_reg: int = 1) -> tuple[float, float]:
    """``(classification term, un-weighted regression term)`` of the RPN loss."""
    _check_norms(n_cls, n_reg)
    p, ps, t, ts = _rpn_arrays(batch)
    pc = np.clip(p, EPS, 1.0 - EPS)
    cls = -(ps * np.log(pc) + (1.0 - ps) * np.log(1.0 - pc))
    reg = sum(ps[i] * smooth_l1(t[i] - ts[i]) for i in range(len(batch)))
    return float(cls.sum()) / n_cls, float(reg) / n_reg


def rpn_loss(batch, lam: float = 1.0, n_cls: int = 1, n_reg: int = 1) -> float:
    cls, reg = rpn_terms(batch, n_cls, n_reg)
    return cls + lam * reg


def rpn_loss_grad(batch, lam: float = 1.0, n_cls: int = 1, n_reg: int = 1):
    """Gradients ``(dL/dp, dL/dt)``; ``dL/dp`` is zero where the clamp is active."""
    _check_norms(n_cls, n_reg)
    p, ps, t, ts = _rpn_arrays(batch)
    active = (p > EPS) & (p < 1.0 - EPS)
    dp = np.where(active, (-ps / p + (1.0 - ps) / (1.0 - p)) / n_cls, 0.0)
    dt = lam / n_reg * ps[:, None] * smooth_l1_grad(t - ts)
    return dp, dt


@dataclass(frozen=True)
class SSDBatch:
    """Default-box predictions for one image.

    ``x[i, j]`` is 1 when default box ``i`` is matched to ground-truth box
    ``j``; ``c`` holds ``(background, pothole)`` logits per default box.
    """

    x: np.ndarray  # (n_boxes, n_gt)
    c: np.ndarray  # (n_boxes, 2)
    l: np.ndarray  # (n_boxes, 4)
    g: np.ndarray  # (n_gt, 4)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(len(self.c), -1)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float).reshape(-1, 4))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float).reshape(-1, 4))
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("match indicators must be 0 or 1")
        if np.any(x.sum(axis=1) > 1):
            raise ValueError("a default box may be matched to at most one ground-truth box")
        if self.c.shape != (x.shape[0], 2) or self.l.shape[0] != x.shape[0] or self.g.shape[0] != x.shape[1]:
            raise ValueError("inconsistent SSD batch shapes")

    @property
    def n_matched(self) -> int:
        return int(np.count_nonzero(self.x))


def _log_softmax(c):
    m = c.max(axis=1, keepdims=True)
    z = c - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ssd_loss(batch: SSDBatch) -> float:
    """``(L_conf + L_loc) / N`` with unmatched boxes scored against background."""
    n = batch.n_matched
    if n == 0:
        raise ValueError("no matched default boxes (N = 0)")
    matched = batch.x.sum(axis=1) > 0
    target = np.where(matched, POTHOLE, BACKGROUND)
    conf = -_log_softmax(batch.c)[np.arange(len(target)), target].sum()
    diff = batch.l[:, None, :] - batch.g[None, :, :]
    loc = sum(smooth_l1(diff[i, j]) for i, j in zip(*np.nonzero(batch.x)))
    return float(conf + loc) / n


def ssd_loss_grad(batch: SSDBatch):
    """Gradients ``(dL/dc, dL/dl)``."""
    n = batch.n_matched
    if n == 0:
        raise ValueError("no matched default boxes (N = 0)")
    matched = batch.x.sum(axis=1) > 0
    target = np.where(matched, POTHOLE, BACKGROUND)
    probs = np.exp(_log_softmax(batch.c))
    dc = probs.copy()
    dc[np.arange(len(target)), target] -= 1.0
    dl = np.zeros_like(batch.l)
    for i, j in zip(*np.nonzero(batch.x)):
        dl[i] += smooth_l1_grad(batch.l[i] - batch.g[j])
    return dc / n, dl / n


def numeric_gradient_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    point,
    step: float = 1e-5,
    is_kink: Callable[[np.ndarray], bool] | None = None,
) -> float:
    """Max relative error between ``grad(point)`` and central differences of ``f``.

    Relative error per component is ``|a - n| / max(|a|, |n|, 1e-6)``. If
    ``is_kink`` says the point is non-differentiable, :class:`KinkError` is
    raised instead of returning a meaningless number.
    """
    x = np.array(point, dtype=float)
    if is_kink is not None and is_kink(x):
        raise KinkError(f"point {x.tolist()} is at a non-differentiable kink")
    analytic = np.asarray(grad(x), dtype=float).reshape(x.shape)
    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f(x)
        flat[k] = orig - step
        lo = f(x)
        flat[k] = orig
        nflat[k] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def smooth_l1_gradient_check(x: float, step: float = 1e-5) -> float:
    return numeric_gradient_check(
        lambda v: smooth_l1(v), smooth_l1_grad, [x], step, lambda v: near_smooth_l1_kink(v, step)
    )


def rpn_gradient_check(batch, lam=1.0, n_cls=1, n_reg=1, step=1e-5) -> float:
    """Gradient check over every ``p`` and ``t`` in the batch."""
    n = len(batch)
    p0, ps, t0, ts = _rpn_arrays(batch)

    def unpack(v):
        return v[:n], v[n:].reshape(n, 4)

    def rebuild(v):
        p, t = unpack(v)
        return [AnchorPrediction(float(p[i]), int(ps[i]), tuple(t[i]), tuple(ts[i])) for i in range(n)]

    def f(v):
        return rpn_loss(rebuild(v), lam, n_cls, n_reg)

    def g(v):
        dp, dt = rpn_loss_grad(rebuild(v), lam, n_cls, n_reg)
        return np.concatenate([dp, dt.ravel()])

    def kink(v):
        p, t = unpack(v)
        clamp = np.any((p - step <= EPS) | (p + step >= 1.0 - EPS))
        return bool(clamp) or near_smooth_l1_kink((t - ts)[ps == 1], step)

    return numeric_gradient_check(f, g, np.concatenate([p0, t0.ravel()]), step, kink)


def ssd_gradient_check(batch: SSDBatch, step=1e-5) -> float:
    """Gradient check over every logit and location parameter."""
    nc = batch.c.size

    def rebuild(v):
        return SSDBatch(batch.x, v[:nc].reshape(batch.c.shape), v[nc:].reshape(batch.l.shape), batch.g)

    def f(v):
        return ssd_loss(rebuild(v))

    def g(v):
        dc, dl = ssd_loss_grad(rebuild(v))
        return np.concatenate([dc.ravel(), dl.ravel()])

    def kink(v):
        b = rebuild(v)
        return any(near_smooth_l1_kink(b.l[i] - b.g[j], step) for i, j in zip(*np.nonzero(b.x)))

    return numeric_gradient_check(f, g, np.concatenate([batch.c.ravel(), batch.l.ravel()]), step, kink)


def _random_non_kink(rng, size, margin=1e-3):
    while True:
        v = rng.uniform(-3.0, 3.0, size)
        if not near_smooth_l1_kink(v, margin):
            return v


def run_checks(n_points: int = 100, seed: int = 0, tol: float = 1e-4) -> list[tuple[str, bool, str]]:
    """Invariant and gradient checks behind ``potholekit loss-check``."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, ok, detail):
        results.append((name, bool(ok), detail))

    lo, hi = 1 - 1e-12, 1 + 1e-12
    junction = abs(smooth_l1(lo) - smooth_l1(hi)) < 1e-11 and abs(smooth_l1_grad(lo) - smooth_l1_grad(hi)) < 1e-11
    record("smooth_l1 C1 at |x| = 1", junction, f"value {smooth_l1(1.0)}, slope {smooth_l1_grad(1.0)}")

    hand = rpn_loss([AnchorPrediction(0.5, 1, (0.5,) * 4, (0.0,) * 4)])
    record("rpn_loss hand case", abs(hand - (math.log(2) + 0.5)) < 1e-5, f"{hand:.6f}")

    uni = ssd_loss(SSDBatch(np.ones((1, 1)), np.zeros((1, 2)), np.zeros((1, 4)), np.zeros((1, 4))))
    record("ssd_loss uniform logits", abs(uni - math.log(2)) < 1e-9, f"{uni:.9f}")

    worst = max(smooth_l1_gradient_check(float(_random_non_kink(rng, ()))) for _ in range(n_points))
    record("smooth_l1 gradient", worst <= tol, f"max rel err {worst:.2e}")

    worst = 0.0
    for _ in range(n_points):
        n = int(rng.integers(1, 5))
        ps = rng.integers(0, 2, n)
        ts = rng.normal(size=(n, 4))
        t = ts + _random_non_kink(rng, (n, 4))
        batch = [AnchorPrediction(float(rng.uniform(0.05, 0.95)), int(ps[i]), tuple(t[i]), tuple(ts[i])) for i in range(n)]
        worst = max(worst, rpn_gradient_check(batch, lam=float(rng.uniform(0.5, 2)), n_cls=n, n_reg=n))
    record("rpn_loss gradient", worst <= tol, f"max rel err {worst:.2e}")

    worst = 0.0
    for _ in range(n_points):
        nb, ng = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        x = np.zeros((nb, ng))
        x[0, rng.integers(ng)] = 1
        for i in range(1, nb):
            if rng.random() < 0.5:
                x[i, rng.integers(ng)] = 1
        g = rng.normal(size=(ng, 4))
        l = np.zeros((nb, 4))
        for i in range(nb):
            j = int(np.argmax(x[i])) if x[i].any() else 0
            l[i] = g[j] + _random_non_kink(rng, 4)
        batch = SSDBatch(x, rng.normal(size=(nb, 2)) * 2, l, g)
        worst = max(worst, ssd_gradient_check(batch))
    record("ssd_loss gradient", worst <= tol, f"max rel err {worst:.2e}")

    worst = 0.0
    for _ in range(n_points):
        anchor = BoundingBox(*_rand_box(rng))
        box = BoundingBox(*_rand_box(rng))
        back = decode_box(encode_box(box, anchor), anchor)
        worst = max(worst, float(np.max(np.abs(np.subtract(back.as_tuple(), box.as_tuple())))))
    record("encode/decode inverse", worst <= 1e-9, f"max abs err {worst:.2e}")
    return results


def _rand_box(rng):
    x0, y0 = rng.uniform(0, 500, 2)
    w, h = rng.uniform(1, 200, 2)
    return x0, y0, x0 + w, y0 + h
