"""The four system variants over a shared self-attention encoder:

- ctc:           encoder + CTC head, greedy collapse at inference
- paraformer:    CIF-fired token embeddings + bidirectional NAR decoder
- paraformer_v2: compressed CTC posterior embeddings + NAR decoder
- ar_aed:        the same decoder with a causal mask, token-by-token

Training builds one eager graph per step; inference builds throwaway graphs
per utterance. All arithmetic is float64.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import cif, ctc
from .autodiff import NEG_INF, Graph, Tensor

VARIANTS = ("ctc", "paraformer", "paraformer_v2", "ar_aed")


@dataclass
class ModelConfig:
    vocab_size: int = 16          # tokens 1..vocab_size; blank is 0
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    variant: str = "paraformer_v2"
    cif_threshold: float = 1.0
    conv_kernel: int = 3
    d_feat: int = 16
    ce_weight: float = 1.0
    aux_weight: float = 1.0       # quantity loss (paraformer) / CTC loss (v2)
    label_smoothing: float = 0.0  # uniform smoothing mass for decoder CE
    subsample: bool = False       # optional stride-2 conv x2 front end

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def sos_id(self):
        return self.vocab_size + 1

    @property
    def eos_id(self):
        return self.vocab_size + 2

    @property
    def n_out(self):
        # AR appends start/end symbols to the vocabulary
        if self.variant == "ar_aed":
            return self.vocab_size + 3
        return self.vocab_size + 1


@dataclass
class Batch:
    features: np.ndarray          # (B, Tmax, d_feat), zero padded
    feature_lengths: np.ndarray   # (B,)
    targets: list                 # list of token-id lists
    target_lengths: np.ndarray    # (B,)


def make_batch(utterances) -> Batch:
    feats = [np.asarray(u.features, dtype=np.float64) for u in utterances]
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    tmax = int(lengths.max())
    d = feats[0].shape[1]
    padded = np.zeros((len(feats), tmax, d))
    for i, f in enumerate(feats):
        padded[i, :f.shape[0]] = f
    targets = [list(u.target) for u in utterances]
    tlen = np.array([len(t) for t in targets], dtype=np.int64)
    return Batch(features=padded, feature_lengths=lengths,
                 targets=targets, target_lengths=tlen)


def sinusoidal_positions(n, d):
    """Fixed sinusoidal positional encodings, shape (n, d)."""
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    enc = np.zeros((n, d))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


class UnalignableBatchError(ValueError):
    def __init__(self, index, num_frames, num_tokens):
        super().__init__(
            f"unalignable target in batch utterance {index}: "
            f"{num_tokens} tokens in {num_frames} frames")
        self.index = index


class Model:
    """One variant's parameters plus its graph builders."""

    def __init__(self, config: ModelConfig, seed=0, params=None):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)
        self.decoder_calls = 0    # instrumentation for AR/NAR call counting

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _init_params(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        p = {}

        def mat(name, fan_in, *shape):
            bound = 1.0 / np.sqrt(fan_in)
            p[name] = rng.uniform(-bound, bound, size=shape)

        d, ff = cfg.d_model, cfg.d_ff
        mat("enc.in.W", cfg.d_feat, cfg.d_feat, d)
        mat("enc.in.b", cfg.d_feat, d)
        if cfg.subsample:
            for j in range(2):
                mat(f"enc.sub{j}.W", 3 * d, 3, d, d)
                mat(f"enc.sub{j}.b", 3 * d, d)
        for i in range(cfg.n_enc_layers):
            self._init_attn(p, rng, f"enc{i}.attn")
            self._init_ffn(p, rng, f"enc{i}")
        p["enc.ln.g"] = np.ones(d)
        p["enc.ln.b"] = np.zeros(d)

        if cfg.variant in ("ctc", "paraformer_v2"):
            mat("ctc.W", d, d, cfg.vocab_size + 1)
            mat("ctc.b", d, cfg.vocab_size + 1)
        if cfg.variant == "paraformer":
            k = cfg.conv_kernel
            mat("cif.conv.W", k * d, k, d, d)
            mat("cif.conv.b", k * d, d)
            mat("cif.lin.W", d, d, 1)
            mat("cif.lin.b", d, 1)
        if cfg.variant == "paraformer_v2":
            mat("embed.W", cfg.vocab_size + 1, cfg.vocab_size + 1, d)
        if cfg.variant == "ar_aed":
            mat("tok.W", d, cfg.n_out, d)

        if cfg.variant != "ctc":
            for i in range(cfg.n_dec_layers):
                self._init_attn(p, rng, f"dec{i}.self")
                self._init_attn(p, rng, f"dec{i}.cross")
                self._init_ffn(p, rng, f"dec{i}")
            p["dec.ln.g"] = np.ones(d)
            p["dec.ln.b"] = np.zeros(d)
            mat("out.W", d, d, cfg.n_out)
            mat("out.b", d, cfg.n_out)
        return p

    def _init_attn(self, p, rng, prefix):
        d = self.config.d_model
        bound = 1.0 / np.sqrt(d)
        for nm in ("q", "k", "v", "o"):
            p[f"{prefix}.W{nm}"] = rng.uniform(-bound, bound, size=(d, d))
            p[f"{prefix}.b{nm}"] = rng.uniform(-bound, bound, size=(d,))
        p[f"{prefix}.ln.g"] = np.ones(d)
        p[f"{prefix}.ln.b"] = np.zeros(d)

    def _init_ffn(self, p, rng, prefix):
        d, ff = self.config.d_model, self.config.d_ff
        p[f"{prefix}.ff.W1"] = rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(d, ff))
        p[f"{prefix}.ff.b1"] = rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), size=(ff,))
        p[f"{prefix}.ff.W2"] = rng.uniform(-1 / np.sqrt(ff), 1 / np.sqrt(ff), size=(ff, d))
        p[f"{prefix}.ff.b2"] = rng.uniform(-1 / np.sqrt(ff), 1 / np.sqrt(ff), size=(d,))
        p[f"{prefix}.ff.ln.g"] = np.ones(d)
        p[f"{prefix}.ff.ln.b"] = np.zeros(d)

    # ------------------------------------------------------------------
    # graph helpers
    # ------------------------------------------------------------------

    def bind(self, g: Graph):
        """Create one leaf per parameter; returns {name: Tensor}."""
        return {k: g.leaf(v) for k, v in self.params.items()}

    def _linear(self, g, P, prefix, x):
        return g.add(g.matmul(x, P[f"{prefix}.W"]), P[f"{prefix}.b"])

    def _ln(self, g, P, prefix, x):
        return g.add(g.mul(g.layer_norm(x), P[f"{prefix}.ln.g"]),
                     P[f"{prefix}.ln.b"])

    def _mha(self, g, P, prefix, x_q, x_kv, key_mask=None, causal=False):
        """Multi-head attention; x_q (B,Tq,d), x_kv (B,Tk,d).

        key_mask: bool (B, Tk), True at padded keys.
        """
        cfg = self.config
        B, Tq, d = x_q.shape
        Tk = x_kv.shape[1]
        h, dh = cfg.n_heads, d // cfg.n_heads

        def heads(t, T):
            t = g.reshape(t, (B, T, h, dh))
            return g.transpose(t, (0, 2, 1, 3))

        q = heads(g.add(g.matmul(x_q, P[f"{prefix}.Wq"]), P[f"{prefix}.bq"]), Tq)
        k = heads(g.add(g.matmul(x_kv, P[f"{prefix}.Wk"]), P[f"{prefix}.bk"]), Tk)
        v = heads(g.add(g.matmul(x_kv, P[f"{prefix}.Wv"]), P[f"{prefix}.bv"]), Tk)
        scores = g.scale(g.matmul(q, g.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(dh))
        mask = None
        if key_mask is not None:
            mask = np.broadcast_to(key_mask[:, None, None, :], (B, h, Tq, Tk))
        if causal:
            cmask = np.triu(np.ones((Tq, Tk), dtype=bool), k=1)
            cmask = np.broadcast_to(cmask[None, None], (B, h, Tq, Tk))
            mask = cmask if mask is None else (mask | cmask)
        if mask is not None:
            scores = g.masked_fill(scores, mask, NEG_INF)
        att = g.softmax(scores, axis=-1)
        ctx = g.matmul(att, v)
        ctx = g.reshape(g.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
        return g.add(g.matmul(ctx, P[f"{prefix}.Wo"]), P[f"{prefix}.bo"])

    def _ffn(self, g, P, prefix, x):
        hdn = g.gelu(g.add(g.matmul(x, P[f"{prefix}.ff.W1"]), P[f"{prefix}.ff.b1"]))
        return g.add(g.matmul(hdn, P[f"{prefix}.ff.W2"]), P[f"{prefix}.ff.b2"])

    # ------------------------------------------------------------------
    # encoder
    # ------------------------------------------------------------------

    def encode(self, g, P, features, feature_lengths=None):
        """(B, T, d_feat) -> (B, T', d_model); pre-norm self-attention stack.

        Returns (H, lengths, key_mask). Padded frames are masked out of
        attention keys.
        """
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)
        B, T, _ = feats.shape
        if feature_lengths is None:
            feature_lengths = np.full(B, T, dtype=np.int64)
        x = self._linear(g, P, "enc.in", g.leaf(feats))
        lengths = np.asarray(feature_lengths, dtype=np.int64)
        if cfg.subsample:
            for j in range(2):
                x = g.gelu(g.add(g.conv1d(x, P[f"enc.sub{j}.W"], stride=2),
                                 P[f"enc.sub{j}.b"]))
                lengths = (lengths + 1) // 2
            T = x.shape[1]
        x = g.add(x, sinusoidal_positions(T, cfg.d_model))
        key_mask = np.arange(T)[None, :] >= lengths[:, None]
        for i in range(cfg.n_enc_layers):
            normed = self._ln(g, P, f"enc{i}.attn", x)
            a = self._mha(g, P, f"enc{i}.attn", normed, normed,
                          key_mask=key_mask)
            x = g.add(x, a)
            x = g.add(x, self._ffn(g, P, f"enc{i}", self._ln(g, P, f"enc{i}.ff", x)))
        H = self._ln(g, P, "enc", x)
        return H, lengths, key_mask

    # ------------------------------------------------------------------
    # decoder
    # ------------------------------------------------------------------

    def decode_stack(self, g, P, E, H, h_key_mask=None, e_key_mask=None,
                     causal=False):
        """Transformer decoder: self-attention over the token stream, cross
        attention into H, feed-forward; returns (B, U, n_out) logits.
        """
        cfg = self.config
        self.decoder_calls += 1
        x = E
        for i in range(cfg.n_dec_layers):
            normed = self._ln(g, P, f"dec{i}.self", x)
            a = self._mha(g, P, f"dec{i}.self", normed, normed,
                          key_mask=e_key_mask, causal=causal)
            x = g.add(x, a)
            c = self._mha(g, P, f"dec{i}.cross",
                          self._ln(g, P, f"dec{i}.cross", x), H,
                          key_mask=h_key_mask)
            x = g.add(x, c)
            x = g.add(x, self._ffn(g, P, f"dec{i}", self._ln(g, P, f"dec{i}.ff", x)))
        x = self._ln(g, P, "dec", x)
        return self._linear(g, P, "out", x)

    # ------------------------------------------------------------------
    # per-utterance pieces
    # ------------------------------------------------------------------

    def ctc_log_posteriors(self, g, P, H_row):
        """(T, d) -> (T, V+1) log-softmax rows."""
        logits = self._linear(g, P, "ctc", H_row)
        return g.log_softmax(logits, axis=-1)

    def cif_weights(self, g, P, H_row):
        """(T, d) -> (T,) sigmoid weights: Sigmoid(Linear(Conv(H)))."""
        c = g.add(g.conv1d(H_row, P["cif.conv.W"]), P["cif.conv.b"])
        w = g.add(g.matmul(c, P["cif.lin.W"]), P["cif.lin.b"])
        return g.reshape(g.sigmoid(w), (H_row.shape[0],))

    # ------------------------------------------------------------------
    # training losses
    # ------------------------------------------------------------------

    def forward_loss(self, batch: Batch):
        """Build the variant's training loss graph for one batch.

        Returns (graph, param leaves, loss Tensor, diagnostics dict).
        """
        cfg = self.config
        g = Graph()
        P = self.bind(g)
        H, lengths, key_mask = self.encode(g, P, batch.features,
                                           batch.feature_lengths)
        B = H.shape[0]
        h_rows = [g.slice(H, ((b, b + 1), (0, int(lengths[b])), (0, cfg.d_model)))
                  for b in range(B)]
        h_rows = [g.reshape(r, (int(lengths[b]), cfg.d_model))
                  for b, r in enumerate(h_rows)]

        if cfg.variant == "ctc":
            return self._loss_ctc(g, P, h_rows, batch)
        if cfg.variant == "paraformer":
            return self._loss_paraformer(g, P, h_rows, H, key_mask, batch)
        if cfg.variant == "paraformer_v2":
            return self._loss_v2(g, P, h_rows, H, key_mask, batch)
        return self._loss_ar(g, P, H, key_mask, batch)

    def _ctc_terms(self, g, P, h_rows, batch, need_logpost=False):
        """Per-utterance CTC negative log likelihoods (mean per utterance)."""
        nlls = []
        log_posts = []
        for b, hr in enumerate(h_rows):
            lp = self.ctc_log_posteriors(g, P, hr)
            log_posts.append(lp)
            ll = ctc.ctc_log_likelihood(lp, batch.targets[b])
            if ll.item() <= NEG_INF / 2:
                raise UnalignableBatchError(b, hr.shape[0], len(batch.targets[b]))
            nlls.append(g.neg(ll))
        total = nlls[0]
        for t in nlls[1:]:
            total = g.add(total, t)
        mean_nll = g.scale(g.reshape(total, (1,)), 1.0 / len(nlls))
        return (mean_nll, log_posts) if need_logpost else mean_nll

    def _loss_ctc(self, g, P, h_rows, batch):
        mean_nll = self._ctc_terms(g, P, h_rows, batch)
        diag = {"ctc": mean_nll.item(), "total": mean_nll.item()}
        return g, P, mean_nll, diag

    def _pad_token_stream(self, g, rows, u_lens, d):
        """Stack per-utterance (U_b, d) tensors into (B, Umax, d) plus mask."""
        umax = max(u_lens)
        parts = []
        for r, u in zip(rows, u_lens):
            if u < umax:
                r = g.concat([r, np.zeros((umax - u, d))], axis=0)
            parts.append(g.reshape(r, (1, umax, d)))
        mask = np.arange(umax)[None, :] >= np.asarray(u_lens)[:, None]
        return g.concat(parts, axis=0), mask

    def _target_rows(self, B, umax, n_out, seqs):
        """Per-position target distributions for the decoder cross entropy.

        Padded positions stay all-zero so they contribute nothing; with
        label smoothing epsilon the mass is (1 - eps) on the target plus a
        uniform eps over the output alphabet.
        """
        eps = self.config.label_smoothing
        rows = np.zeros((B, umax, n_out))
        for b, seq in enumerate(seqs):
            for u_i, tok in enumerate(seq):
                rows[b, u_i, :] = eps / n_out
                rows[b, u_i, tok] += 1.0 - eps
        return rows

    def _nar_ce(self, g, P, e_rows, H, key_mask, batch):
        """Cross entropy of the NAR decoder over exactly U positions per
        utterance (mean per token); e_rows are per-utterance (U_b, d)."""
        cfg = self.config
        u_lens = [len(t) for t in batch.targets]
        d = cfg.d_model
        e_rows = [g.add(r, sinusoidal_positions(u, d))
                  for r, u in zip(e_rows, u_lens)]
        E, e_mask = self._pad_token_stream(g, e_rows, u_lens, d)
        logits = self.decode_stack(g, P, E, H, h_key_mask=key_mask,
                                   e_key_mask=e_mask)
        logp = g.log_softmax(logits, axis=-1)
        B, umax, n_out = logp.shape
        rows = self._target_rows(B, umax, n_out, batch.targets)
        total_tokens = sum(u_lens)
        picked = g.sum(g.mul(logp, rows))
        return g.scale(g.reshape(g.neg(picked), (1,)), 1.0 / max(total_tokens, 1))

    def _loss_paraformer(self, g, P, h_rows, H, key_mask, batch):
        cfg = self.config
        e_rows = []
        qty_terms = []
        for b, hr in enumerate(h_rows):
            alpha = self.cif_weights(g, P, hr)
            U = len(batch.targets[b])
            qty_terms.append(cif.quantity_loss(g, alpha, U))
            scaled = cif.scale_weights(g, alpha, U)
            trace = cif.integrate_and_fire(g, hr, scaled,
                                           threshold=cfg.cif_threshold,
                                           train_mode=True, num_tokens=U)
            if len(trace.fire_frames) != U:
                raise RuntimeError(
                    f"CIF fired {len(trace.fire_frames)} != target {U}")
            e_rows.append(trace.fired_embeddings)
        ce = self._nar_ce(g, P, e_rows, H, key_mask, batch)
        qty = qty_terms[0]
        for t in qty_terms[1:]:
            qty = g.add(qty, t)
        qty = g.scale(g.reshape(qty, (1,)), 1.0 / len(qty_terms))
        loss = g.add(g.scale(ce, cfg.ce_weight), g.scale(qty, cfg.aux_weight))
        diag = {"ce": ce.item(), "quantity": qty.item(), "total": loss.item()}
        return g, P, loss, diag

    def _loss_v2(self, g, P, h_rows, H, key_mask, batch):
        cfg = self.config
        mean_nll, log_posts = self._ctc_terms(g, P, h_rows, batch,
                                              need_logpost=True)
        ce_utts = []
        e_rows = []
        ce_batch_idx = []
        for b, lp in enumerate(log_posts):
            target = batch.targets[b]
            if not target:
                continue  # noise utterance: CTC term only
            align = ctc.viterbi_align(lp.data, target)
            post = g.softmax(self._linear(g, P, "ctc", h_rows[b]), axis=-1)
            rows, spans = ctc.compress_on_graph(g, post, align)
            if rows is None or rows.shape[0] != len(target):
                raise RuntimeError("training compression length mismatch")
            e_rows.append(g.matmul(rows, P["embed.W"]))
            ce_batch_idx.append(b)
        if e_rows:
            sub = Batch(features=batch.features,
                        feature_lengths=batch.feature_lengths,
                        targets=[batch.targets[b] for b in ce_batch_idx],
                        target_lengths=np.array(
                            [len(batch.targets[b]) for b in ce_batch_idx]))
            H_sub = self._take_batch_rows(g, H, ce_batch_idx)
            ce = self._nar_ce(g, P, e_rows, H_sub, key_mask[ce_batch_idx], sub)
        else:
            ce = g.leaf(np.zeros(1))
        loss = g.add(g.scale(ce, cfg.ce_weight), g.scale(mean_nll, cfg.aux_weight))
        diag = {"ce": ce.item(), "ctc": mean_nll.item(), "total": loss.item()}
        return g, P, loss, diag

    def _take_batch_rows(self, g, H, idx):
        if len(idx) == H.shape[0] and idx == list(range(H.shape[0])):
            return H
        parts = [g.slice(H, ((b, b + 1), (0, H.shape[1]), (0, H.shape[2])))
                 for b in idx]
        return g.concat(parts, axis=0)

    def _loss_ar(self, g, P, H, key_mask, batch):
        cfg = self.config
        d = cfg.d_model
        ins = [[cfg.sos_id] + list(t) for t in batch.targets]
        outs = [list(t) + [cfg.eos_id] for t in batch.targets]
        u_lens = [len(t) for t in ins]
        tok_rows = []
        for seq in ins:
            onehot = np.zeros((len(seq), cfg.n_out))
            onehot[np.arange(len(seq)), seq] = 1.0
            emb = g.matmul(g.leaf(onehot), P["tok.W"])
            tok_rows.append(g.add(emb, sinusoidal_positions(len(seq), d)))
        E, e_mask = self._pad_token_stream(g, tok_rows, u_lens, d)
        logits = self.decode_stack(g, P, E, H, h_key_mask=key_mask,
                                   e_key_mask=e_mask, causal=True)
        logp = g.log_softmax(logits, axis=-1)
        B, umax, n_out = logp.shape
        rows = self._target_rows(B, umax, n_out, outs)
        total = sum(u_lens)
        ce = g.scale(g.reshape(g.neg(g.sum(g.mul(logp, rows))), (1,)),
                     1.0 / total)
        diag = {"ce": ce.item(), "total": ce.item()}
        return g, P, ce, diag

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def transcribe(self, features, beam=1, max_len=None):
        """Decode one utterance's feature matrix to a token-id list."""
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)[None]
        g = Graph()
        P = self.bind(g)
        H, lengths, _ = self.encode(g, P, feats)
        hr = g.reshape(H, (H.shape[1], cfg.d_model))

        if cfg.variant == "ctc":
            lp = self.ctc_log_posteriors(g, P, hr)
            return ctc.collapse(ctc.greedy_decode(lp.data))

        if cfg.variant == "paraformer_v2":
            post = g.softmax(self._linear(g, P, "ctc", hr), axis=-1)
            align = ctc.greedy_decode(post.data)
            rows, spans = ctc.compress_on_graph(g, post, align)
            if rows is None:
                return []
            E = g.matmul(rows, P["embed.W"])
            return self._nar_emit(g, P, E, hr)

        if cfg.variant == "paraformer":
            alpha = self.cif_weights(g, P, hr)
            trace = cif.integrate_and_fire(g, hr, alpha,
                                           threshold=cfg.cif_threshold,
                                           train_mode=False)
            if not trace.fire_frames:
                return []
            return self._nar_emit(g, P, trace.fired_embeddings, hr)

        # ar_aed
        if max_len is None:
            max_len = max(2 * H.shape[1], 8)
        return self.ar_generate(g, P, hr, max_len=max_len, beam=beam)

    def _nar_emit(self, g, P, E, hr):
        cfg = self.config
        U = E.shape[0]
        E = g.add(E, sinusoidal_positions(U, cfg.d_model))
        E3 = g.reshape(E, (1, U, cfg.d_model))
        H3 = g.reshape(hr, (1, hr.shape[0], cfg.d_model))
        logits = self.decode_stack(g, P, E3, H3)
        labels = np.argmax(logits.data[0], axis=-1)
        return [int(t) for t in labels if t != ctc.BLANK_ID]

    def ar_generate(self, g, P, hr, max_len, beam=1):
        """Causal generation from the start symbol until end symbol or
        max_len; beam > 1 keeps top-beam prefixes by summed log-probability,
        length-unnormalized.
        """
        cfg = self.config
        H3 = g.reshape(hr, (1, hr.shape[0], cfg.d_model))
        hyps = [([cfg.sos_id], 0.0, False)]
        for _ in range(max_len):
            if all(fin for _, _, fin in hyps):
                break
            expanded = []
            for seq, logp, fin in hyps:
                if fin:
                    expanded.append((seq, logp, fin))
                    continue
                onehot = np.zeros((len(seq), cfg.n_out))
                onehot[np.arange(len(seq)), seq] = 1.0
                emb = g.matmul(g.leaf(onehot), P["tok.W"])
                emb = g.add(emb, sinusoidal_positions(len(seq), cfg.d_model))
                E3 = g.reshape(emb, (1, len(seq), cfg.d_model))
                logits = self.decode_stack(g, P, E3, H3, causal=True)
                row = logits.data[0, -1]
                row = row - row.max()
                lse = np.log(np.exp(row).sum())
                logprobs = row - lse
                order = np.argsort(-logprobs)[:beam]
                for tok in order:
                    tok = int(tok)
                    expanded.append((seq + [tok], logp + float(logprobs[tok]),
                                     tok == cfg.eos_id))
            expanded.sort(key=lambda h: -h[1])
            hyps = expanded[:beam]
        best = max(hyps, key=lambda h: h[1])
        seq = best[0][1:]
        if seq and seq[-1] == cfg.eos_id:
            seq = seq[:-1]
        return [t for t in seq if 1 <= t <= cfg.vocab_size]

    def sequence_log_prob(self, features, tokens):
        """Teacher-forced log probability of tokens + end symbol (AR only)."""
        cfg = self.config
        g = Graph()
        P = self.bind(g)
        H, _, _ = self.encode(g, P, np.asarray(features, dtype=np.float64)[None])
        seq_in = [cfg.sos_id] + list(tokens)
        seq_out = list(tokens) + [cfg.eos_id]
        onehot = np.zeros((len(seq_in), cfg.n_out))
        onehot[np.arange(len(seq_in)), seq_in] = 1.0
        emb = g.matmul(g.leaf(onehot), P["tok.W"])
        emb = g.add(emb, sinusoidal_positions(len(seq_in), cfg.d_model))
        E3 = g.reshape(emb, (1, len(seq_in), cfg.d_model))
        logits = self.decode_stack(g, P, E3, H, causal=True)
        lp = logits.data[0]
        lp = lp - lp.max(axis=-1, keepdims=True)
        lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
        return float(sum(lp[i, t] for i, t in enumerate(seq_out)))


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(path, model: Model, extra=None):
    """Self-describing container: config as JSON plus named float64 arrays.

    extra holds training state (step counter, optimizer moments).
    """
    payload = {f"param.{k}": v for k, v in model.params.items()}
    if extra:
        for k, v in extra.items():
            payload[f"extra.{k}"] = np.asarray(v)
    payload["config_json"] = np.array(json.dumps(asdict(model.config)))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns (model, extra dict)."""
    with np.load(path, allow_pickle=False) as z:
        cfg = ModelConfig(**json.loads(str(z["config_json"])))
        params = {}
        extra = {}
        for key in z.files:
            if key.startswith("param."):
                params[key[len("param."):]] = z[key].astype(np.float64)
            elif key.startswith("extra."):
                extra[key[len("extra."):]] = z[key]
    return Model(cfg, params=params), extra
