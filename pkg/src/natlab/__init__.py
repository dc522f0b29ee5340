"""Desk-scale laboratory for comparing CTC, CIF-based, compressed-posterior
NAR, and autoregressive sequence recognizers on synthetic data."""

from .autodiff import Graph, Tensor, grad_check
from .ctc import (BLANK_ID, CompressedPosterior, UnalignableTargetError,
                  collapse, compress, ctc_log_likelihood, greedy_decode,
                  viterbi_align)
from .cif import FireTrace, integrate_and_fire, quantity_loss, scale_weights
from .data import Regime, Utterance, gen_dataset, gen_noise_utterance, \
    gen_utterance, read_dataset, write_dataset
from .estimator import SequenceRecognizer
from .metrics import error_rate, measure_rtf, null_output_rate
from .models import Batch, Model, ModelConfig, load_checkpoint, \
    make_batch, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "BLANK_ID", "Batch", "CompressedPosterior", "FireTrace", "Graph",
    "Model", "ModelConfig", "Regime", "SequenceRecognizer", "Tensor",
    "TrainConfig", "UnalignableTargetError", "Utterance", "collapse",
    "compress", "ctc_log_likelihood", "error_rate", "gen_dataset",
    "gen_noise_utterance", "gen_utterance", "grad_check", "greedy_decode",
    "integrate_and_fire", "load_checkpoint", "make_batch", "measure_rtf",
    "null_output_rate", "quantity_loss", "read_dataset", "save_checkpoint",
    "scale_weights", "train", "viterbi_align", "write_dataset",
]

__version__ = "0.1.0"
