"""CTC machinery: stable log-space forward loss, greedy decoding, Viterbi
forced alignment, and posterior compression.

All dynamic programming runs in log space over the extended label sequence
[blank, y1, blank, y2, ..., blank] with blank id 0. -inf is represented by a
large negative sentinel that propagates safely through max and log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NEG_INF, Graph, Tensor, register_op

BLANK_ID = 0


class UnalignableTargetError(ValueError):
    def __init__(self, num_frames, num_tokens):
        super().__init__(
            f"unalignable target: {num_tokens} tokens cannot fit in "
            f"{num_frames} frames")
        self.num_frames = num_frames
        self.num_tokens = num_tokens


@dataclass
class CompressedPosterior:
    """One probability row per output token plus the frames that produced it.

    segment_spans[i] lists the source frame indices averaged into rows[i];
    the spans partition the non-blank frames of the source alignment in order.
    """
    rows: np.ndarray            # (U', V+1)
    segment_spans: list


def _extended_labels(target):
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def min_frames_required(target):
    """Shortest alignment: one frame per token plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _forward_table(log_post, ext):
    """Alpha table of the standard CTC forward recursion, in log space."""
    T = log_post.shape[0]
    S = len(ext)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_post[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_post[0, ext[1]]
    # states that may take the skip transition (non-blank, differs from s-2)
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[2:] = prev[:-2]
        skip = np.where(can_skip, skip, NEG_INF)
        m = np.maximum(np.maximum(stay, step), skip)
        safe = np.maximum(m, NEG_INF)  # avoid overflow when all are sentinel
        total = (np.exp(stay - safe) + np.exp(step - safe) + np.exp(skip - safe))
        alpha[t] = safe + np.log(total) + log_post[t, ext]
        np.maximum(alpha[t], NEG_INF, out=alpha[t])
    return alpha


def _backward_table(log_post, ext):
    T = log_post.shape[0]
    S = len(ext)
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    can_skip_from = np.zeros(S, dtype=bool)
    can_skip_from[:-2] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + log_post[t + 1, ext]
        stay = nxt
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[:-2] = nxt[2:]
        skip = np.where(can_skip_from, skip, NEG_INF)
        m = np.maximum(np.maximum(stay, step), skip)
        safe = np.maximum(m, NEG_INF)
        total = np.exp(stay - safe) + np.exp(step - safe) + np.exp(skip - safe)
        beta[t] = safe + np.log(total)
        np.maximum(beta[t], NEG_INF, out=beta[t])
    return beta


def ctc_log_likelihood_value(log_post, target):
    """log P(target | posteriors) summed over all valid alignments.

    Returns the -inf sentinel when the target is unalignable within T frames.
    Pure numpy; see ctc_log_likelihood_node for the differentiable version.
    """
    log_post = np.asarray(log_post, dtype=np.float64)
    target = list(target)
    T = log_post.shape[0]
    if min_frames_required(target) > T:
        return NEG_INF
    ext = _extended_labels(target)
    alpha = _forward_table(log_post, ext)
    S = len(ext)
    last = alpha[T - 1, S - 1]
    if S > 1:
        hi = max(last, alpha[T - 1, S - 2])
        ll = hi + np.log(np.exp(last - hi) + np.exp(alpha[T - 1, S - 2] - hi))
    else:
        ll = last
    return float(max(ll, NEG_INF))


def _ctc_op(xs, attrs):
    """Graph op: scalar log-likelihood of a target given (T, V+1) log rows.

    Gradient is the state-occupancy posterior from the forward-backward
    algorithm: d ll / d log_post[t, k] = sum over states with label k of
    exp(alpha + beta - ll).
    """
    (log_post,) = xs
    target = list(attrs["target"])
    T, _ = log_post.shape
    if min_frames_required(target) > T:
        out = np.array(NEG_INF)
        return out, lambda g: (np.zeros_like(log_post),)
    ext = _extended_labels(target)
    alpha = _forward_table(log_post, ext)
    beta = _backward_table(log_post, ext)
    S = len(ext)
    last = alpha[T - 1, S - 1]
    if S > 1:
        hi = max(last, alpha[T - 1, S - 2])
        ll = hi + np.log(np.exp(last - hi) + np.exp(alpha[T - 1, S - 2] - hi))
    else:
        ll = last
    ll = max(ll, NEG_INF)

    def vjp(g):
        grad = np.zeros_like(log_post)
        if ll <= NEG_INF / 2:
            return (grad,)
        occ = np.exp(np.minimum(alpha + beta - ll, 0.0))
        for s in range(S):
            grad[:, ext[s]] += occ[:, s]
        return (grad * float(g),)

    return np.array(ll), vjp


register_op("ctc_log_likelihood", _ctc_op)


def ctc_log_likelihood(log_post, target):
    """Differentiable when given a graph Tensor; plain float otherwise."""
    if isinstance(log_post, Tensor) and log_post.graph is not None:
        g: Graph = log_post.graph
        return g.apply("ctc_log_likelihood", [log_post],
                       {"target": tuple(int(t) for t in target)})
    return ctc_log_likelihood_value(
        log_post.data if isinstance(log_post, Tensor) else log_post, target)


def greedy_decode(posterior):
    """Per-frame argmax alignment; ties go to the smallest symbol index."""
    posterior = np.asarray(posterior)
    return np.argmax(posterior, axis=-1).astype(np.int64)


def collapse(alignment):
    """Merge consecutive duplicates, then drop blanks."""
    out = []
    prev = None
    for label in alignment:
        label = int(label)
        if label != prev and label != BLANK_ID:
            out.append(label)
        prev = label
    return out


def _segment_spans(alignment):
    """Frame-index spans of the maximal non-blank runs, in order."""
    spans = []
    prev = BLANK_ID
    for t, label in enumerate(alignment):
        label = int(label)
        if label == BLANK_ID:
            prev = BLANK_ID
            continue
        if label == prev:
            spans[-1].append(t)
        else:
            spans.append([t])
        prev = label
    return spans


def compress(posterior, alignment):
    """Average posterior rows within each repeated-label run, drop blanks.

    Works for both inference (greedy alignment) and training (Viterbi
    alignment). An all-blank alignment yields an empty CompressedPosterior.
    """
    posterior = np.asarray(posterior, dtype=np.float64)
    if len(alignment) != posterior.shape[0]:
        raise ValueError(
            f"alignment length {len(alignment)} != posterior frames "
            f"{posterior.shape[0]}")
    spans = _segment_spans(alignment)
    if not spans:
        return CompressedPosterior(
            rows=np.zeros((0, posterior.shape[1])), segment_spans=[])
    rows = np.stack([posterior[span].mean(axis=0) for span in spans])
    return CompressedPosterior(rows=rows, segment_spans=spans)


def compress_on_graph(g: Graph, posterior: Tensor, alignment):
    """Graph-recorded compression: mean of the selected rows, differentiable
    through the averaged rows (not through the discrete alignment choice).

    Returns (rows Tensor of shape (U', V+1), segment_spans); rows is None
    when the alignment is all blank.
    """
    spans = _segment_spans(alignment)
    if not spans:
        return None, []
    parts = []
    for span in spans:
        lo, hi = span[0], span[-1] + 1
        seg = g.slice(posterior, ((lo, hi), (0, posterior.shape[1])))
        parts.append(g.mean(seg, axis=0, keepdims=True))
    return g.concat(parts, axis=0), spans


def viterbi_align(log_post, target):
    """Most probable alignment that collapses to target (max-product DP).

    Ties are broken by preferring, at equal score, the predecessor with the
    smaller extended-label index.
    """
    log_post = np.asarray(log_post, dtype=np.float64)
    target = [int(t) for t in target]
    T = log_post.shape[0]
    if min_frames_required(target) > T:
        raise UnalignableTargetError(T, len(target))
    ext = _extended_labels(target)
    S = len(ext)
    score = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    score[0, 0] = log_post[0, ext[0]]
    if S > 1:
        score[0, 1] = log_post[0, ext[1]]
    back[0, 0] = 0
    if S > 1:
        back[0, 1] = 1
    for t in range(1, T):
        for s in range(S):
            lo = s - 2 if (s >= 2 and ext[s] != BLANK_ID and ext[s] != ext[s - 2]) else max(s - 1, 0)
            best_prev = lo
            best = score[t - 1, lo]
            for p in range(lo + 1, s + 1):
                if score[t - 1, p] > best:
                    best = score[t - 1, p]
                    best_prev = p
            score[t, s] = best + log_post[t, ext[s]]
            back[t, s] = best_prev
        np.maximum(score[t], NEG_INF, out=score[t])
    if S > 1 and score[T - 1, S - 2] >= score[T - 1, S - 1]:
        s = S - 2
    else:
        s = S - 1
    if score[T - 1, s] <= NEG_INF / 2:
        raise UnalignableTargetError(T, len(target))
    states = [s]
    for t in range(T - 1, 0, -1):
        s = back[t, s]
        states.append(s)
    states.reverse()
    return ext[np.array(states)]


def viterbi_score(log_post, alignment):
    """Sum of per-frame log posteriors along an alignment."""
    log_post = np.asarray(log_post)
    idx = np.asarray(alignment, dtype=np.int64)
    return float(log_post[np.arange(len(idx)), idx].sum())
