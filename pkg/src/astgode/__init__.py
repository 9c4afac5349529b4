"""Attention-based spatio-temporal graph neural ODE forecasting on numpy."""

from .autodiff import Tape, Variable, vjp
from .data import (
    BRANCHES,
    Layout,
    TrafficArchive,
    chronological_split,
    enumerate_valid_anchors,
    extract_bundle,
    fit_normalizer,
    load_archive,
    stack_bundles,
    synthetic_archive,
    synthetic_distances,
)
from .graph import ChebBasis, SensorGraph, build_adjacency, cheb_basis, graph_basis, scaled_laplacian
from .model import ModelDims, ModelParams, load_params, model_forward, save_params
from .odeint import IntegratorConfig, grad_via_adjoint, grad_via_tape, integrate
from .training import LossConfig, TrainConfig, evaluate, loss_and_grads, train

__version__ = "0.1.0"
