import math

import numpy as np
import pytest

from natlab.autodiff import NEG_INF, Graph, grad_check
from natlab import ctc
from natlab.ctc import (BLANK_ID, UnalignableTargetError, collapse, compress,
                        compress_on_graph, ctc_log_likelihood,
                        ctc_log_likelihood_value, greedy_decode,
                        viterbi_align, viterbi_score)


# ----------------------------------------------------------------------
# brute-force oracles: enumerate every alignment that collapses to target
# ----------------------------------------------------------------------

def enumerate_alignments(T, target):
    """All frame-label sequences of length T whose collapse equals target."""
    results = []

    def rec(prefix):
        if len(prefix) == T:
            if collapse(prefix) == list(target):
                results.append(list(prefix))
            return
        # prune: remaining frames must fit the remaining tokens
        done = collapse(prefix)
        if done != list(target)[:len(done)]:
            return
        remaining_tokens = len(target) - len(done)
        if remaining_tokens > T - len(prefix):
            return
        symbols = {BLANK_ID}
        if prefix:
            symbols.add(prefix[-1])
        if len(done) < len(target):
            symbols.add(target[len(done)])
        for s in sorted(symbols):
            prefix.append(s)
            rec(prefix)
            prefix.pop()

    rec([])
    return results


def brute_force_log_likelihood(log_post, target):
    paths = enumerate_alignments(log_post.shape[0], target)
    if not paths:
        return NEG_INF
    scores = [sum(log_post[t, s] for t, s in enumerate(p)) for p in paths]
    hi = max(scores)
    return hi + math.log(sum(math.exp(s - hi) for s in scores))


def brute_force_best(log_post, target):
    paths = enumerate_alignments(log_post.shape[0], target)
    if not paths:
        return NEG_INF, None
    scored = [(sum(log_post[t, s] for t, s in enumerate(p)), p) for p in paths]
    return max(scored, key=lambda x: x[0])


def random_log_posterior(rng, T, V):
    logits = rng.standard_normal((T, V + 1)) * 2.0
    logits -= logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    return logits - lse


def random_instance(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 9))
    V = int(rng.integers(1, 5))
    U = int(rng.integers(0, min(4, T) + 1))
    target = [int(rng.integers(1, V + 1)) for _ in range(U)]
    return random_log_posterior(rng, T, V), target


# ----------------------------------------------------------------------
# forward loss
# ----------------------------------------------------------------------

def test_single_frame_single_token():
    lp = random_log_posterior(np.random.default_rng(0), 1, 3)
    assert ctc_log_likelihood_value(lp, [2]) == pytest.approx(lp[0, 2])


def test_two_frames_one_token_closed_form():
    lp = random_log_posterior(np.random.default_rng(1), 2, 2)
    p = np.exp(lp)
    expect = (p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 1])
    assert ctc_log_likelihood_value(lp, [1]) == pytest.approx(np.log(expect))


def test_unalignable_returns_neg_inf():
    lp = random_log_posterior(np.random.default_rng(2), 1, 3)
    assert ctc_log_likelihood_value(lp, [1, 2]) <= NEG_INF / 2


def test_repeat_needs_separating_blank():
    lp = random_log_posterior(np.random.default_rng(3), 2, 2)
    assert ctc_log_likelihood_value(lp, [1, 1]) <= NEG_INF / 2


def test_forward_matches_brute_force_small_sweep():
    for seed in range(200):
        lp, target = random_instance(seed)
        got = ctc_log_likelihood_value(lp, target)
        want = brute_force_log_likelihood(lp, target)
        if want <= NEG_INF / 2:
            assert got <= NEG_INF / 2
        else:
            assert got == pytest.approx(want, rel=1e-9)


def test_ctc_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((4, 3))
        target = [int(rng.integers(1, 3)) for _ in range(int(rng.integers(1, 3)))]

        def f(x):
            g = x.graph
            lp = g.log_softmax(x, axis=-1)
            return g.neg(ctc_log_likelihood(lp, target))

        worst = max(worst, grad_check(f, x0, step=1e-5))
    assert worst < 1e-4


# ----------------------------------------------------------------------
# greedy decode and collapse
# ----------------------------------------------------------------------

def _posterior_with_argmax(labels, V=3):
    T = len(labels)
    post = np.full((T, V + 1), 0.1 / V)
    for t, s in enumerate(labels):
        post[t] = (1.0 - 0.9) / V
        post[t, s] = 0.9
    post /= post.sum(axis=-1, keepdims=True)
    return post


def test_greedy_decode_worked_example():
    # rows argmaxing a, blank, b, b, c decode to exactly that alignment
    a, b, c = 1, 2, 3
    post = _posterior_with_argmax([a, BLANK_ID, b, b, c])
    assert list(greedy_decode(post)) == [a, BLANK_ID, b, b, c]


def test_greedy_all_blank():
    post = _posterior_with_argmax([BLANK_ID] * 4)
    assert list(greedy_decode(post)) == [BLANK_ID] * 4


def test_greedy_uniform_ties_to_blank():
    post = np.full((3, 4), 0.25)
    assert list(greedy_decode(post)) == [BLANK_ID] * 3


def test_collapse_worked_example():
    a, b, c = 1, 2, 3
    assert collapse([a, BLANK_ID, b, b, c]) == [a, b, c]


def test_collapse_all_blank():
    assert collapse([BLANK_ID, BLANK_ID]) == []


def test_collapse_blank_separates_repeats():
    a = 1
    assert collapse([a, BLANK_ID, a]) == [a, a]


# ----------------------------------------------------------------------
# compression (both worked examples)
# ----------------------------------------------------------------------

def test_compress_inference_worked_example():
    rng = np.random.default_rng(10)
    post = np.exp(random_log_posterior(rng, 5, 3))
    a, b, c = 1, 2, 3
    comp = compress(post, [a, BLANK_ID, b, b, c])
    assert comp.rows.shape == (3, 4)
    assert np.array_equal(comp.rows[0], post[0])
    assert np.array_equal(comp.rows[1], (post[2] + post[3]) / 2.0)
    assert np.array_equal(comp.rows[2], post[4])
    assert comp.segment_spans == [[0], [2, 3], [4]]


def test_compress_training_worked_example():
    rng = np.random.default_rng(11)
    post = np.exp(random_log_posterior(rng, 5, 3))
    a, b = 1, 2
    comp = compress(post, [BLANK_ID, a, BLANK_ID, b, b])
    assert comp.rows.shape == (2, 4)
    assert np.array_equal(comp.rows[0], post[1])
    assert np.array_equal(comp.rows[1], (post[3] + post[4]) / 2.0)
    assert comp.segment_spans == [[1], [3, 4]]


def test_compress_all_blank_is_empty():
    post = np.full((4, 3), 1 / 3)
    comp = compress(post, [BLANK_ID] * 4)
    assert comp.rows.shape[0] == 0
    assert comp.segment_spans == []


def test_compress_rows_are_probability_rows():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 9))
        post = np.exp(random_log_posterior(rng, T, 3))
        align = [int(rng.integers(0, 4)) for _ in range(T)]
        comp = compress(post, align)
        assert comp.rows.shape[0] == len(collapse(align))
        if comp.rows.size:
            assert np.allclose(comp.rows.sum(axis=-1), 1.0, atol=1e-9)
        flat = [t for span in comp.segment_spans for t in span]
        nonblank = [t for t, s in enumerate(align) if s != BLANK_ID]
        assert flat == nonblank


def test_compress_length_mismatch():
    with pytest.raises(ValueError, match="alignment length"):
        compress(np.full((3, 2), 0.5), [0, 0])


def test_compress_on_graph_matches_plain():
    rng = np.random.default_rng(12)
    post = np.exp(random_log_posterior(rng, 6, 3))
    align = [1, 1, 0, 2, 2, 3]
    g = Graph()
    rows, spans = compress_on_graph(g, g.leaf(post), align)
    plain = compress(post, align)
    assert np.allclose(rows.data, plain.rows)
    assert spans == plain.segment_spans


# ----------------------------------------------------------------------
# viterbi
# ----------------------------------------------------------------------

def test_viterbi_unique_alignment():
    lp = random_log_posterior(np.random.default_rng(20), 2, 3)
    assert list(viterbi_align(lp, [1, 2])) == [1, 2]


def test_viterbi_unalignable_raises():
    lp = random_log_posterior(np.random.default_rng(21), 2, 3)
    with pytest.raises(UnalignableTargetError) as exc:
        viterbi_align(lp, [1, 2, 3])
    assert exc.value.num_frames == 2
    assert exc.value.num_tokens == 3


def test_viterbi_matches_brute_force_sweep():
    for seed in range(300):
        lp, target = random_instance(seed + 5000)
        if ctc.min_frames_required(target) > lp.shape[0]:
            continue
        align = viterbi_align(lp, target)
        assert collapse(align) == target
        best_score, _ = brute_force_best(lp, target)
        assert viterbi_score(lp, align) == pytest.approx(best_score, rel=1e-9)


def test_forward_at_least_viterbi():
    # sum over alignments >= its max term
    for seed in range(100):
        lp, target = random_instance(seed + 9000)
        if ctc.min_frames_required(target) > lp.shape[0]:
            continue
        ll = ctc_log_likelihood_value(lp, target)
        assert ll >= viterbi_score(lp, viterbi_align(lp, target)) - 1e-9


def test_viterbi_tie_break_prefers_smaller_state():
    # uniform posterior: every valid alignment scores the same; the declared
    # rule keeps the smaller extended-label predecessor (defer emission)
    lp = np.log(np.full((3, 3), 1 / 3))
    align = viterbi_align(lp, [1])
    assert collapse(list(align)) == [1]
    assert list(align) == [BLANK_ID, BLANK_ID, 1]
