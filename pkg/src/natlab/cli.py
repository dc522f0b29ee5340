"""Operator command line: data generation, training, evaluation, alignment
inspection, RTF benchmarking, and noise testing.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure. Failures print a single line starting with "error: ".
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys

import numpy as np

from . import ctc
from . import data as synth
from .config import ConfigError, load_run_config
from .metrics import error_rate, edit_distance, measure_rtf, \
    null_output_rate, transcribe_set
from .models import Model, UnalignableBatchError, load_checkpoint, \
    save_checkpoint
from .training import TrainingDiverged, optimizer_extra, restore_optimizer, \
    train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class DataError(Exception):
    pass


def _build_parser():
    p = _Parser(prog="natlab",
                description="synthetic sequence-transduction laboratory for "
                            "NAR/AR recognizer comparisons")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="write a synthetic dataset")
    g.add_argument("--regime", required=True,
                   choices=list(synth.REGIME_NAMES))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--u-min", type=int, default=3)
    g.add_argument("--u-max", type=int, default=8)
    g.add_argument("--noise-fraction", type=float, default=0.0)
    g.add_argument("--snr-db", type=float, default=10.0)

    t = sub.add_parser("train", help="train one variant on a dataset file")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--variant", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="SEC.KEY=V",
                   help="override a config value")

    e = sub.add_parser("eval", help="token error rate of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", type=int, default=1)
    e.add_argument("--worst", type=int, default=5,
                   help="how many worst offenders to print")

    a = sub.add_parser("align", help="inspect greedy and Viterbi alignments")
    a.add_argument("--ckpt", default=None)
    a.add_argument("--data", default=None)
    a.add_argument("--utt-id", type=int, default=None)
    a.add_argument("--posterior", default=None,
                   help="whitespace text or .npy posterior matrix instead of "
                        "a checkpoint")
    a.add_argument("--target", default=None,
                   help="space-separated token ids for the Viterbi view")

    b = sub.add_parser("bench-rtf", help="compare decoding real-time factors")
    b.add_argument("--ckpt-list", required=True,
                   help="comma-separated checkpoint paths")
    b.add_argument("--data", required=True)
    b.add_argument("--beam", type=int, default=5,
                   help="beam width for ar_aed checkpoints")
    b.add_argument("--csv", default=None)

    n = sub.add_parser("noise-test", help="null-output percentage on noise")
    n.add_argument("--ckpt-list", required=True)
    n.add_argument("--noise-data", required=True)
    n.add_argument("--csv", default=None)
    return p


def _load_data(path):
    try:
        return synth.read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    except synth.DatasetFormatError as exc:
        raise DataError(str(exc)) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _cmd_gen_data(args):
    if args.count < 0:
        raise DataError("count must be >= 0")
    regime = synth.Regime(name=args.regime, snr_db=args.snr_db)
    if args.regime == "pure_noise":
        utts = synth.gen_noise_set(args.count, base_seed=args.seed)
    else:
        utts = synth.gen_dataset(regime, args.count, args.vocab_size,
                                 (args.u_min, args.u_max),
                                 base_seed=args.seed,
                                 noise_fraction=args.noise_fraction)
    try:
        synth.write_dataset(args.out, utts)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    lengths = [u.features.shape[0] for u in utts]
    tokens = [len(u.target) for u in utts]
    print(f"wrote {len(utts)} records to {args.out}")
    if utts:
        print(f"regime={args.regime} mean_frames={np.mean(lengths):.1f} "
              f"mean_tokens={np.mean(tokens):.2f}")
    return EXIT_OK


def _cmd_train(args):
    run = load_run_config(args.config, overrides=args.set)
    if args.variant:
        run.model = dataclasses.replace(run.model, variant=args.variant)
    dataset = _load_data(args.data)
    if not dataset:
        raise DataError("training dataset is empty")
    d_feat = dataset[0].features.shape[1]
    if d_feat != run.model.d_feat:
        run.model = dataclasses.replace(run.model, d_feat=d_feat)
    if args.resume:
        model, extra = _load_ckpt(args.resume)
        restore_optimizer(model, extra, run.train)
    else:
        model = Model(run.model, seed=run.train.seed)
    curve = train(model, dataset, run.train)
    save_checkpoint(args.out, model, extra=optimizer_extra(model))
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(curve)
    print(f"trained {model.config.variant} for {len(curve)} steps; "
          f"final loss {curve[-1][1]:.4f}; checkpoint {args.out}")
    return EXIT_OK


def _cmd_eval(args):
    model, _ = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    if not dataset:
        raise DataError("evaluation dataset is empty")
    d_feat = dataset[0].features.shape[1]
    if d_feat != model.config.d_feat:
        raise DataError(
            f"checkpoint expects d_feat={model.config.d_feat} but dataset "
            f"carries {d_feat} (parameter enc.in.W)")
    speech = [u for u in dataset if u.target]
    if not speech:
        raise DataError("dataset contains no utterances with targets")
    hyps = transcribe_set(model, speech, beam=args.beam)
    refs = [u.target for u in speech]
    ter = error_rate(hyps, refs)
    print(f"token_error_rate={ter:.2f}")
    per_utt = sorted(
        ((edit_distance(h, r), i) for i, (h, r) in enumerate(zip(hyps, refs))),
        reverse=True)
    for dist, i in per_utt[:args.worst]:
        print(f"worst utt={i} edits={dist} hyp={hyps[i]} ref={refs[i]}")
    return EXIT_OK


def _read_posterior(path):
    try:
        if path.endswith(".npy"):
            post = np.load(path)
        else:
            post = np.loadtxt(path, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read posterior {path}: {exc}") from exc
    return np.asarray(post, dtype=np.float64)


def _print_alignment_views(post, target):
    with np.errstate(divide="ignore"):
        log_post = np.log(np.maximum(post, 1e-300))
    greedy = ctc.greedy_decode(post)
    print(f"greedy alignment: {list(map(int, greedy))}")
    print(f"greedy collapsed: {ctc.collapse(greedy)}")
    comp = ctc.compress(post, greedy)
    spans = ",".join("{" + ",".join(str(t) for t in s) + "}"
                     for s in comp.segment_spans)
    print(f"greedy compression spans: {spans if spans else '(empty)'}")
    if target is not None:
        try:
            align = ctc.viterbi_align(log_post, target)
        except ctc.UnalignableTargetError as exc:
            raise DataError(str(exc)) from exc
        print(f"viterbi alignment: {list(map(int, align))}")
        print(f"viterbi collapsed: {ctc.collapse(align)}")
        comp_v = ctc.compress(post, align)
        spans_v = ",".join("{" + ",".join(str(t) for t in s) + "}"
                           for s in comp_v.segment_spans)
        print(f"viterbi compression spans: {spans_v if spans_v else '(empty)'}")


def _cmd_align(args):
    if args.posterior:
        post = _read_posterior(args.posterior)
        target = [int(t) for t in args.target.split()] if args.target else None
        _print_alignment_views(post, target)
        return EXIT_OK
    if not (args.ckpt and args.data and args.utt_id is not None):
        raise DataError("align needs either --posterior or "
                        "--ckpt/--data/--utt-id")
    model, _ = _load_ckpt(args.ckpt)
    if model.config.variant not in ("ctc", "paraformer_v2"):
        raise DataError(
            f"variant {model.config.variant} has no CTC head to align with")
    dataset = _load_data(args.data)
    if args.utt_id < 0 or args.utt_id >= len(dataset):
        raise DataError(f"unknown utterance id {args.utt_id} "
                        f"(dataset has {len(dataset)} records)")
    utt = dataset[args.utt_id]
    from .autodiff import Graph
    g = Graph()
    P = model.bind(g)
    H, _, _ = model.encode(g, P, utt.features[None])
    hr = g.reshape(H, (H.shape[1], model.config.d_model))
    lp = model.ctc_log_posteriors(g, P, hr)
    post = np.exp(lp.data)
    _print_alignment_views(post, utt.target if utt.target else None)
    return EXIT_OK


def _bench_rows(paths, fn):
    rows = []
    for path in paths:
        model, _ = _load_ckpt(path)
        rows.append((path, model.config.variant, fn(model)))
    return rows


def _cmd_bench_rtf(args):
    dataset = _load_data(args.data)
    if not dataset:
        raise DataError("benchmark dataset is empty")
    paths = [p for p in args.ckpt_list.split(",") if p]

    def rtf_of(model):
        beam = args.beam if model.config.variant == "ar_aed" else 1
        return measure_rtf(model, dataset, beam=beam)

    rows = _bench_rows(paths, rtf_of)
    print(f"{'model':<40} {'variant':<14} RTF")
    for path, variant, rtf in rows:
        print(f"{path:<40} {variant:<14} {rtf:.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "variant", "rtf"])
            w.writerows(rows)
    return EXIT_OK


def _cmd_noise_test(args):
    noise_set = _load_data(args.noise_data)
    if not noise_set:
        raise DataError("noise dataset is empty")
    paths = [p for p in args.ckpt_list.split(",") if p]
    rows = _bench_rows(paths, lambda m: null_output_rate(m, noise_set))
    print(f"{'model':<40} {'variant':<14} null_output_pct")
    for path, variant, pct in rows:
        print(f"{path:<40} {variant:<14} {pct:.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "variant", "null_output_pct"])
            w.writerows(rows)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "align": _cmd_align,
    "bench-rtf": _cmd_bench_rtf,
    "noise-test": _cmd_noise_test,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UnalignableBatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
