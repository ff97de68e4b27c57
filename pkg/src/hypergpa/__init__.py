"""Hypernetwork forecasting of time-series model parameters under drift.

Reads K recent periods of M coupled series, encodes the drift dynamics with
a graph-coupled controlled differential equation, and generates the target
forecaster's parameters for the next, unseen period.  Ships the target-model
zoo, Vanilla/RevIN/HyperGRU baselines, a synthetic drift generator, and an
evaluation harness behind one CLI (``hypergpa``).
"""

from .data import SynthConfig, TimeSeriesCorpus, load_csv, normalize, split, synth_drift, write_csv
from .layer1 import L1Config, agc, embed_initial, encode_periods, field_G
from .layer2 import (
    L2Config,
    argmax_select,
    assemble_params,
    attention_coeffs,
    initial_queries,
    refine_queries,
)
from .metrics import compute_metrics, emit_report, improvement_ratio
from .optim import AdamState, adam_step
from .paths import ControlPath, SolverConfig, eval_deriv, eval_path, fit_path, integrate_cde
from .tape import Tape, Tensor, finite_diff_check, grad
from .targets import ParamGraph, TargetArch, build_param_graph, forecast, gru_step, lstm_step
from .training import (
    HyperGPAModel,
    PeriodBatch,
    TrainConfig,
    hypergpa_loss,
    make_pairs,
    make_period_batches,
    train,
)

__version__ = "0.1.0"
