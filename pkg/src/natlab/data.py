"""Synthetic utterance generation across duration regimes, plus dataset I/O.

Each token id has a fixed unit-norm prototype feature vector; an utterance
emits each token's prototype for a regime-dependent number of frames with
Gaussian perturbation, separated by silence gaps. The variable regime's
heavy-tailed durations stress length estimation; pure_noise clips carry no
token content and an empty target.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

FRAME_SHIFT_SEC = 0.01    # 10 ms frame shift
DEFAULT_D_FEAT = 16
NOISE_STD = 0.3

REGIME_NAMES = ("regular", "variable", "noisy", "pure_noise")


@dataclass
class Regime:
    name: str = "regular"
    snr_db: float = 10.0              # only used by the noisy regime
    d_feat: int = DEFAULT_D_FEAT
    silence_max: int = 3              # gap before each token: uniform 0..3
    noise_std: float = NOISE_STD

    def __post_init__(self):
        if self.name not in REGIME_NAMES:
            raise ValueError(f"unknown regime {self.name!r}")

    def sample_duration(self, rng):
        """Frames per token. regular: uniform 3-5; variable: a 50/50 mixture
        of uniform 1-2 and uniform 6-12."""
        if self.name == "variable":
            if rng.random() < 0.5:
                return int(rng.integers(1, 3))
            return int(rng.integers(6, 13))
        return int(rng.integers(3, 6))


@dataclass
class Utterance:
    features: np.ndarray     # (T, d_feat)
    target: list             # token ids, 1..vocab_size; empty for pure noise
    regime: str
    seed: int
    duration_sec: float = 0.0

    def __post_init__(self):
        if not self.duration_sec:
            self.duration_sec = self.features.shape[0] * FRAME_SHIFT_SEC


def token_prototype(token_id, d_feat=DEFAULT_D_FEAT):
    """Deterministic unit-norm vector standing in for a token's acoustics."""
    rng = np.random.default_rng([int(token_id), int(d_feat), 0x5EED])
    v = rng.standard_normal(d_feat)
    return v / np.linalg.norm(v)


def _noise_process(rng, T, d_feat):
    """Filtered Gaussian with a random per-utterance spectral tilt."""
    tilt = rng.uniform(0.0, 0.9)
    white = rng.standard_normal((T, d_feat))
    out = np.empty_like(white)
    prev = np.zeros(d_feat)
    for t in range(T):
        prev = tilt * prev + white[t]
        out[t] = prev
    # normalize to unit average frame power regardless of tilt
    out *= np.sqrt(1.0 - tilt * tilt)
    return out


def gen_utterance(regime: Regime, vocab_size, u_range, seed) -> Utterance:
    """Synthesize one utterance; fully reproducible from the seed."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    lo, hi = u_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid token-count range {u_range}")
    if regime.name == "pure_noise":
        raise ValueError("use gen_noise_utterance for the pure_noise regime")
    rng = np.random.default_rng([int(seed), 0xA11CE])
    U = int(rng.integers(lo, hi + 1))
    tokens = [int(rng.integers(1, vocab_size + 1)) for _ in range(U)]
    frames = []
    prev_tok = None
    for tok in tokens:
        gap = int(rng.integers(0, regime.silence_max + 1))
        if tok == prev_tok and gap == 0:
            # repeated tokens need a separating silence frame for CTC;
            # resample from the nonzero part of the law
            gap = int(rng.integers(1, regime.silence_max + 1))
        prev_tok = tok
        for _ in range(gap):
            frames.append(rng.standard_normal(regime.d_feat) * regime.noise_std)
        proto = token_prototype(tok, regime.d_feat)
        for _ in range(regime.sample_duration(rng)):
            frames.append(proto + rng.standard_normal(regime.d_feat) * regime.noise_std)
    feats = np.stack(frames)
    if regime.name == "noisy":
        noise = _noise_process(rng, feats.shape[0], regime.d_feat)
        sig_pow = float(np.mean(feats ** 2))
        noise_pow = float(np.mean(noise ** 2))
        gain = np.sqrt(sig_pow / (noise_pow * 10 ** (regime.snr_db / 10.0)))
        feats = feats + gain * noise
    return Utterance(features=feats, target=tokens, regime=regime.name,
                     seed=int(seed))


def gen_noise_utterance(T, seed, d_feat=DEFAULT_D_FEAT) -> Utterance:
    """A pure-noise clip with no token content and an empty target."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng([int(seed), 0x90153])
    feats = _noise_process(rng, T, d_feat)
    return Utterance(features=feats, target=[], regime="pure_noise",
                     seed=int(seed))


def gen_dataset(regime: Regime, count, vocab_size, u_range, base_seed=0,
                noise_fraction=0.0, noise_frames=(20, 60)):
    """A list of utterances; optionally a fraction are pure-noise clips so
    models learn to emit nothing on noise."""
    utts = []
    rng = np.random.default_rng([int(base_seed), 0xD47A])
    for i in range(count):
        seed = base_seed * 1_000_003 + i
        if noise_fraction > 0 and rng.random() < noise_fraction:
            T = int(rng.integers(noise_frames[0], noise_frames[1] + 1))
            utts.append(gen_noise_utterance(T, seed, d_feat=regime.d_feat))
        else:
            utts.append(gen_utterance(regime, vocab_size, u_range, seed))
    return utts


def gen_noise_set(count, base_seed=0, d_feat=DEFAULT_D_FEAT,
                  frames=(20, 60)):
    rng = np.random.default_rng([int(base_seed), 0x90154])
    return [gen_noise_utterance(int(rng.integers(frames[0], frames[1] + 1)),
                                base_seed * 1_000_003 + i, d_feat=d_feat)
            for i in range(count)]


# ----------------------------------------------------------------------
# dataset files: one JSON record per line, features as base64 float64 LE
# ----------------------------------------------------------------------

class DatasetFormatError(ValueError):
    def __init__(self, line_no, msg):
        super().__init__(f"malformed record at line {line_no}: {msg}")
        self.line_no = line_no


def write_dataset(path, utterances):
    with open(path, "w") as fh:
        for u in utterances:
            feats = np.ascontiguousarray(u.features, dtype="<f8")
            rec = {
                "shape": list(feats.shape),
                "features": base64.b64encode(feats.tobytes()).decode("ascii"),
                "target": [int(t) for t in u.target],
                "regime": u.regime,
                "seed": int(u.seed),
                "duration_sec": u.duration_sec,
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path):
    utts = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                shape = tuple(rec["shape"])
                raw = base64.b64decode(rec["features"])
                feats = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                utts.append(Utterance(features=feats,
                                      target=list(rec["target"]),
                                      regime=rec["regime"],
                                      seed=int(rec["seed"]),
                                      duration_sec=float(rec["duration_sec"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetFormatError(line_no, str(exc)) from exc
    return utts
