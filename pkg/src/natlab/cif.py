"""Continuous integrate-and-fire: weight scaling, the accumulate/fire loop
with the frame-splitting rule, and the quantity loss.

Firing positions are discrete events decided from the weight values; the
contributed weights themselves are recorded on the graph (the completing
portion is threshold minus the accumulated weight, the remainder seeds the
next accumulation), so CE gradients flow into both H and alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor

DEFAULT_THRESHOLD = 1.0
# scaled weights summing exactly to U may miss the U-th fire by rounding;
# crossings within this tolerance still close the embedding
CLOSURE_EPS = 1e-9


@dataclass
class FireTrace:
    """Fired embeddings with bookkeeping.

    fire_frames[i] is the frame at which embedding i completed; residual is
    the leftover accumulated weight after the last frame (for an
    inference-tail fire it is the weight that embedding integrated).
    """
    fired_embeddings: object     # (U', d) ndarray or graph Tensor
    fire_frames: list
    residual: float


def scale_weights(g: Graph, alpha: Tensor, num_tokens: int) -> Tensor:
    """Training-time scaling so the weights sum exactly to the target length."""
    total = float(alpha.data.sum())
    if total <= 0.0:
        raise ValueError("weight sum underflowed to zero; cannot scale")
    denom = g.sum(alpha)
    inv = g.apply("exp", [g.neg(g.apply("log", [denom]))])  # 1 / sum(alpha)
    return g.mul(g.scale(alpha, float(num_tokens)), inv)


def quantity_loss(g: Graph, alpha: Tensor, num_tokens: int) -> Tensor:
    """|sum(alpha) - U| on the unscaled weights; subgradient 0 at the kink."""
    diff = g.sub(g.sum(alpha), np.array(float(num_tokens)))
    return g.abs(diff)


def integrate_and_fire(g: Graph, H: Tensor, alpha: Tensor,
                       threshold=DEFAULT_THRESHOLD,
                       train_mode=False, num_tokens=None) -> FireTrace:
    """Accumulate weights frame by frame and fire integrated embeddings.

    When accumulation would cross the threshold at frame t the frame's weight
    splits: the portion completing the threshold closes the current embedding
    and the remainder seeds the next. With scaled training weights exactly
    num_tokens fires occur. At inference a trailing partial accumulation
    fires iff residual > threshold / 2.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    T, d = H.shape
    alpha_vals = np.asarray(alpha.data, dtype=np.float64).reshape(T)

    segments = []        # closed segments: lists of (frame, weight_expr, weight_val)
    current = []
    acc_val = 0.0
    acc_expr = None      # graph scalar (1,) or None meaning exactly 0

    for t in range(T):
        a_t = g.reshape(g.slice(alpha, ((t, t + 1),)), (1,))
        rem_expr = a_t
        rem_val = alpha_vals[t]
        while acc_val + rem_val >= threshold - CLOSURE_EPS:
            if train_mode and num_tokens is not None and len(segments) == num_tokens:
                break  # exact-closure absorbed the target count; keep leftovers
            thr = np.full((1,), threshold)
            take_expr = thr if acc_expr is None else g.sub(thr, acc_expr)
            take_val = threshold - acc_val
            if rem_val < take_val:
                # fp shortfall within tolerance: close with what remains
                take_expr, take_val = rem_expr, rem_val
            current.append((t, take_expr, take_val))
            segments.append(current)
            current = []
            rem_expr = g.sub(rem_expr, take_expr)
            rem_val -= take_val
            acc_expr = None
            acc_val = 0.0
            if rem_val <= 0.0:
                rem_expr = None
                break
        if rem_expr is not None and rem_val > 0.0:
            current.append((t, rem_expr, rem_val))
            acc_expr = rem_expr if acc_expr is None else g.add(acc_expr, rem_expr)
            acc_val += rem_val

    residual = acc_val
    if not train_mode and current and residual > threshold / 2.0:
        segments.append(current)
        current = []

    if not segments:
        return FireTrace(fired_embeddings=np.zeros((0, d)),
                         fire_frames=[], residual=residual)

    rows = []
    fire_frames = []
    for seg in segments:
        acc_row = None
        for t, w_expr, _ in seg:
            h_row = g.slice(H, ((t, t + 1), (0, d)))
            term = g.mul(g.reshape(w_expr, (1, 1)), h_row)
            acc_row = term if acc_row is None else g.add(acc_row, term)
        rows.append(acc_row)
        fire_frames.append(seg[-1][0])
    E = g.concat(rows, axis=0)
    return FireTrace(fired_embeddings=E, fire_frames=fire_frames,
                     residual=residual)
