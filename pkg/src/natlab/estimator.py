"""Scikit-learn style front door: a recognizer estimator with fit/predict
and get_params/set_params, so the models compose with sklearn pipelines and
model-selection utilities."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .metrics import error_rate
from .models import Model, ModelConfig, make_batch
from .data import Utterance
from .training import TrainConfig, train


def _check_features(X, d_feat):
    out = []
    for i, f in enumerate(X):
        arr = np.asarray(f, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != d_feat:
            raise ValueError(
                f"X[{i}] must be a (T, {d_feat}) matrix, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError(f"X[{i}] has no frames")
        out.append(arr)
    return out


def _check_targets(y, vocab_size):
    out = []
    for i, seq in enumerate(y):
        toks = [int(t) for t in seq]
        if any(t < 0 or t > vocab_size for t in toks):
            raise ValueError(
                f"y[{i}] contains ids outside [0, {vocab_size}]")
        if any(t == 0 for t in toks):
            raise ValueError(f"y[{i}] contains the blank id 0")
        out.append(toks)
    return out


class SequenceRecognizer(BaseEstimator):
    """Trains one model variant on (feature matrix, token sequence) pairs.

    Parameters mirror the model and training configuration; predict returns
    one token-id list per input feature matrix.
    """

    def __init__(self, variant="paraformer_v2", vocab_size=16, d_model=64,
                 n_enc_layers=2, n_dec_layers=2, n_heads=4, d_ff=128,
                 d_feat=16, cif_threshold=1.0, conv_kernel=3,
                 steps=1000, batch_size=8, learning_rate=3e-3,
                 warmup_steps=100, seed=0, beam=1):
        self.variant = variant
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.d_feat = d_feat
        self.cif_threshold = cif_threshold
        self.conv_kernel = conv_kernel
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.beam = beam

    def fit(self, X, y):
        feats = _check_features(X, self.d_feat)
        targets = _check_targets(y, self.vocab_size)
        if len(feats) != len(targets):
            raise ValueError(f"{len(feats)} inputs vs {len(targets)} targets")
        cfg = ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model,
                          n_enc_layers=self.n_enc_layers,
                          n_dec_layers=self.n_dec_layers,
                          n_heads=self.n_heads, d_ff=self.d_ff,
                          variant=self.variant, d_feat=self.d_feat,
                          cif_threshold=self.cif_threshold,
                          conv_kernel=self.conv_kernel)
        tcfg = TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           warmup_steps=self.warmup_steps, seed=self.seed)
        self.model_ = Model(cfg, seed=self.seed)
        dataset = [Utterance(features=f, target=t, regime="regular", seed=i)
                   for i, (f, t) in enumerate(zip(feats, targets))]
        self.loss_curve_ = train(self.model_, dataset, tcfg)
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        feats = _check_features(X, self.d_feat)
        return [self.model_.transcribe(f, beam=self.beam) for f in feats]

    def score(self, X, y):
        """1 - token error rate (as a fraction); higher is better."""
        hyps = self.predict(X)
        refs = _check_targets(y, self.vocab_size)
        return 1.0 - error_rate(hyps, refs) / 100.0
