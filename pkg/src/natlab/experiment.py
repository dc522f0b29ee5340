"""Cross-variant experiment runner: trains and evaluates each
(variant, regime) cell over several seeds and reports median metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as synth
from .config import DataConfig
from .metrics import error_rate, eval_parallelism, measure_rtf, \
    null_output_rate, transcribe_set
from .models import Model, ModelConfig
from .training import TrainConfig, train


@dataclass
class CellResult:
    variant: str
    regime: str
    token_error_rate: float
    rtf: float
    null_output_pct: float
    seeds: list
    loss_curve: list          # (step, loss) samples from the first seed


@dataclass
class ExperimentReport:
    cells: list

    def to_json(self):
        return json.dumps({"cells": [asdict(c) for c in self.cells]}, indent=2)

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        return ExperimentReport(
            cells=[CellResult(**c) for c in raw["cells"]])


def _make_sets(dcfg: DataConfig, model_cfg: ModelConfig, seed):
    regime = synth.Regime(name=dcfg.regime, snr_db=dcfg.snr_db,
                          d_feat=dcfg.d_feat)
    train_set = synth.gen_dataset(regime, dcfg.train_count,
                                  model_cfg.vocab_size,
                                  (dcfg.u_min, dcfg.u_max),
                                  base_seed=dcfg.seed + seed,
                                  noise_fraction=dcfg.noise_fraction)
    test_set = synth.gen_dataset(regime, dcfg.test_count,
                                 model_cfg.vocab_size,
                                 (dcfg.u_min, dcfg.u_max),
                                 base_seed=dcfg.seed + seed + 7919,
                                 noise_fraction=0.0)
    return train_set, test_set


def run_cell(variant, model_cfg: ModelConfig, train_cfg: TrainConfig,
             dcfg: DataConfig, seed, noise_set=None):
    """Train one (variant, seed) model and evaluate all three metrics."""
    cfg = dataclasses.replace(model_cfg, variant=variant)
    tcfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + seed)
    train_set, test_set = _make_sets(dcfg, cfg, seed)
    model = Model(cfg, seed=seed)
    curve = train(model, train_set, tcfg, eval_set=test_set[:50])
    hyps = transcribe_set(model, test_set)
    ter = error_rate(hyps, [u.target for u in test_set])
    rtf = measure_rtf(model, test_set[:20],
                      beam=5 if variant == "ar_aed" else 1)
    if noise_set is None:
        noise_set = synth.gen_noise_set(50, base_seed=dcfg.seed,
                                        d_feat=dcfg.d_feat)
    null_pct = null_output_rate(model, noise_set)
    return model, curve, ter, rtf, null_pct


def run_experiment(variants, regimes, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, dcfg: DataConfig, seeds,
                   noise_set=None, report_path=None, curves_path=None):
    """Runs every (variant, regime) cell over the seeds; medians per cell."""
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(v, r) for v in variants for r in regimes]

    def run_pair(pair):
        variant, regime = pair
        d = dataclasses.replace(dcfg, regime=regime)
        ters, rtfs, nulls, curves = [], [], [], []
        for s in seeds:
            _, curve, ter, rtf, null_pct = run_cell(
                variant, model_cfg, train_cfg, d, s, noise_set=noise_set)
            ters.append(ter)
            rtfs.append(rtf)
            nulls.append(null_pct)
            curves.append(curve)
        return CellResult(variant=variant, regime=regime,
                          token_error_rate=float(np.median(ters)),
                          rtf=float(np.median(rtfs)),
                          null_output_pct=float(np.median(nulls)),
                          seeds=list(seeds), loss_curve=curves[0])

    workers = eval_parallelism()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run_pair, jobs))
    else:
        cells = [run_pair(j) for j in jobs]
    report = ExperimentReport(cells=cells)
    if report_path:
        with open(report_path, "w") as fh:
            fh.write(report.to_json())
    if curves_path:
        write_loss_curves(curves_path, report)
    return report


def write_loss_curves(path, report: ExperimentReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "regime", "step", "loss"])
        for cell in report.cells:
            for step, loss in cell.loss_curve:
                w.writerow([cell.variant, cell.regime, step, loss])
