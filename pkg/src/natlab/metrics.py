"""Evaluation metrics: token error rate, null-output percentage on noise,
and the real-time factor of decoding."""

from __future__ import annotations

import os
import time

import numpy as np


def edit_distance(hyp, ref):
    """Levenshtein distance with unit insertion/deletion/substitution costs."""
    m, n = len(hyp), len(ref)
    if m == 0:
        return n
    if n == 0:
        return m
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[n]


def error_rate(hyps, refs):
    """100 * total edit distance / total reference length."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise ValueError("empty reference list")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("references contain no tokens")
    total_err = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return 100.0 * total_err / total_ref


def transcribe_set(model, utterances, beam=1):
    return [model.transcribe(u.features, beam=beam) for u in utterances]


def null_output_rate(model, noise_set, beam=1):
    """Percent of clips whose decoded transcript is empty."""
    if not noise_set:
        raise ValueError("empty noise set")
    empties = sum(1 for u in noise_set
                  if not model.transcribe(u.features, beam=beam))
    return 100.0 * empties / len(noise_set)


def measure_rtf(model, utterances, beam=1, clock=time.perf_counter,
                timed_region_counter=None):
    """Wall-clock decode time divided by total nominal audio duration.

    Only the per-utterance transcription (encoder + generation) is inside the
    timed region; data handling stays outside. timed_region_counter, when
    given, is a list whose length afterwards equals the number of timed
    regions entered (instrumentation hook for tests).
    """
    total_audio = sum(u.duration_sec for u in utterances)
    if total_audio <= 0:
        raise ValueError("dataset carries no audio duration")
    elapsed = 0.0
    for u in utterances:
        feats = u.features
        t0 = clock()
        model.transcribe(feats, beam=beam)
        elapsed += clock() - t0
        if timed_region_counter is not None:
            timed_region_counter.append(1)
    return elapsed / total_audio


def eval_parallelism():
    """Evaluation thread cap from the NAT_LAB_THREADS environment variable."""
    raw = os.environ.get("NAT_LAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
