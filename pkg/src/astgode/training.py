"""Composite loss, Adam, masked metrics and the train/evaluate loops."""

from __future__ import annotations

import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .data import (
    BRANCHES,
    Batch,
    NormalizationStats,
    TrafficArchive,
    chronological_split,
    denormalize,
    enumerate_valid_anchors,
    extract_bundle,
    fit_normalizer,
    stack_bundles,
)
from .graph import ChebBasis, SensorGraph, graph_basis
from .model import ModelDims, ModelParams, branch_params, decode_head, dynamics, encode, model_forward
from .odeint import IntegratorConfig, grad_via_adjoint, integrate

__all__ = [
    "LossConfig",
    "TrainConfig",
    "AdamState",
    "EmptyMaskWarning",
    "masked_mse",
    "composite_loss",
    "loss_and_grads",
    "adam_step",
    "masked_metrics",
    "MetricsReport",
    "predict",
    "evaluate",
    "historical_average",
    "TrainResult",
    "train",
    "dataset_loss",
]

log = logging.getLogger(__name__)

GRADIENT_MODES = ("tape", "adjoint")


class EmptyMaskWarning(RuntimeWarning):
    """A loss term had no observed target entries and contributed 0."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    gradient_mode: str = "tape"
    hidden_dim: int = 64
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("epochs, batch sizes and hidden_dim must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid Adam constants")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")


# -- loss ------------------------------------------------------------------------------


def _per_sample_weights(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Weights ``mask / count_b / B`` so that a weighted sum is the mean per-sample MSE."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim < 1:
        raise ValueError("mask must be at least one-dimensional")
    counts = m.reshape(m.shape[0], -1).sum(axis=1)
    empty = int((counts == 0).sum())
    inv = np.where(counts > 0, 1.0 / np.where(counts > 0, counts, 1.0), 0.0)
    w = m * inv.reshape((-1,) + (1,) * (m.ndim - 1)) / m.shape[0]
    return w, empty


def masked_mse(pred, target, mask, per_sample: bool = False) -> Variable:
    """Mean squared error over entries where ``mask`` is true.

    With ``per_sample`` the leading axis indexes samples and the result is the
    average of the per-sample masked MSEs.  Terms with no observed entries
    contribute 0 and raise :class:`EmptyMaskWarning`.
    """
    pv = pred.value if isinstance(pred, Variable) else np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if pv.shape != t.shape or pv.shape != m.shape:
        raise ad.ShapeError(f"masked_mse: pred {pv.shape}, target {t.shape}, mask {m.shape} differ")
    if per_sample:
        w, empty = _per_sample_weights(m)
    else:
        n = int(m.sum())
        empty = int(n == 0)
        w = m / n if n else np.zeros(m.shape)
    if empty:
        warnings.warn(f"{empty} loss term(s) had no observed entries", EmptyMaskWarning, stacklevel=2)
    tt = np.where(m, t, 0.0)
    return ad.sum(ad.mul(ad.square(ad.sub(pred, tt)), w))


def composite_loss(fused, intermediate: Mapping, batch: Batch, cfg: LossConfig = LossConfig()):
    """``mse(final) + alpha * mean over the six intermediate checkpoints``.

    Returns the scalar Variable and a dict of the individual term values.
    """
    final = masked_mse(fused, batch.targets["predicted"], batch.masks["predicted"], per_sample=True)
    terms = {"predicted": float(final.value)}
    inter = None
    for br in BRANCHES:
        for k in (1, 2):
            t = masked_mse(intermediate[(br, k)], batch.targets[(br, k)], batch.masks[(br, k)], per_sample=True)
            terms[(br, k)] = float(t.value)
            inter = t if inter is None else ad.add(inter, t)
    total = ad.add(final, ad.scale(inter, cfg.alpha / 6.0))
    return total, terms


def loss_and_grads(
    params: ModelParams,
    batch: Batch,
    basis: ChebBasis,
    integ: IntegratorConfig = IntegratorConfig(),
    loss_cfg: LossConfig = LossConfig(),
    mode: str = "tape",
) -> tuple[float, dict]:
    """Batch loss and its gradient for every parameter, by tape or adjoint."""
    if mode == "tape":
        tape = Tape()
        leaves = params.leaves(tape)
        pred = model_forward(leaves, batch, basis, integ)
        loss, _ = composite_loss(pred.fused, pred.intermediate, batch, loss_cfg)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[v] for k, v in leaves.items()}
    if mode != "adjoint":
        raise ValueError(f"unknown gradient mode {mode!r}")

    p = params.arrays
    enc_tape = Tape()
    enc_w = enc_tape.variable(p["encoder.weight"])
    enc_b = enc_tape.variable(p["encoder.bias"])
    h0 = {br: encode(batch.inputs[br], enc_w, enc_b) for br in BRANCHES}

    def f(h, th):
        return dynamics(h, th, basis)

    ckpts = {}
    for br in BRANCHES:
        ckpts[br] = [h0[br].value] + integrate(f, h0[br].value, branch_params(p, br), 3, integ)

    head_tape = Tape()
    head_names = ("fusion.weight", "fusion.bias", "decoder.weight", "decoder.bias")
    head = {k: head_tape.variable(p[k]) for k in head_names}
    hidden = {br: [ckpts[br][0]] + [head_tape.variable(h) for h in ckpts[br][1:]] for br in BRANCHES}
    fused, inter, _ = decode_head(head, hidden)
    loss, _ = composite_loss(fused, inter, batch, loss_cfg)
    hg = head_tape.backward(loss)

    grads = {k: hg[v] for k, v in head.items()}
    seeds = []
    for br in BRANCHES:
        cot = [None] + [hg[v] for v in hidden[br][1:]]
        gh0, gth = grad_via_adjoint(f, branch_params(p, br), ckpts[br], cot, integ)
        seeds.append((h0[br], gh0))
        for k, g in gth.items():
            grads[f"{br}.{k}"] = g
    eg = enc_tape.backprop(seeds)
    grads["encoder.weight"] = eg[enc_w]
    grads["encoder.bias"] = eg[enc_b]
    return float(loss.value), {k: grads[k] for k in params}


# -- optimizer -----------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: Mapping, state: AdamState, cfg: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_arrays, m_out, v_out = {}, {}, {}
    for k, theta in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != theta.shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {theta.shape}")
        m = b1 * state.m.get(k, np.zeros_like(theta)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(theta)) + (1.0 - b2) * (g * g)
        new_arrays[k] = theta - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        m_out[k], v_out[k] = m, v
    return ModelParams(params.dims, new_arrays), AdamState(t, m_out, v_out)


# -- metrics ---------------------------------------------------------------------------------


def masked_metrics(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, float, int]:
    """``(rmse, mae, count)`` over mask-true entries; NaN metrics when none are observed.

    Sums are exactly rounded (``math.fsum``), so the result does not depend on
    how the entries are ordered or partitioned.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ad.ShapeError(f"metrics: pred {pred.shape}, target {target.shape}, mask {mask.shape} differ")
    d = pred[mask] - target[mask]
    n = int(d.size)
    if n == 0:
        return math.nan, math.nan, 0
    return math.sqrt(math.fsum((d * d).tolist()) / n), math.fsum(np.abs(d).tolist()) / n, n


@dataclass
class MetricsReport:
    horizons: list  # dicts: minutes, step, rmse, mae, count
    overall: dict  # rmse, mae, count over every step
    curve: list  # dicts: step, minutes, rmse, mae, count
    windowed: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ASTGODE_THREADS", "1")))
    except ValueError:
        return 1


def predict(
    params: ModelParams,
    archive: TrafficArchive,
    anchors: Sequence[int],
    stats: NormalizationStats,
    basis: ChebBasis,
    integ: IntegratorConfig = IntegratorConfig(),
    batch_size: int = 64,
) -> dict:
    """Denormalized predictions ``{"fused", "weekly", "daily", "recent"} -> (S, T_h, N, F)``."""
    chunks = [list(anchors[i:i + batch_size]) for i in range(0, len(anchors), batch_size)]

    def run(chunk):
        batch = stack_bundles([extract_bundle(archive, t, stats) for t in chunk])
        pred = model_forward(params.arrays, batch, basis, integ)
        out = {"fused": pred.fused.value}
        out.update({br: pred.branch_final[br].value for br in BRANCHES})
        return out

    workers = min(_threads(), max(1, len(chunks)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    keys = ("fused",) + BRANCHES
    if not parts:
        th, n, f = archive.layout.steps_per_hour, archive.shape[1], archive.shape[2]
        return {k: np.zeros((0, th, n, f)) for k in keys}
    return {k: denormalize(np.concatenate([p[k] for p in parts]), stats) for k in keys}


def targets_for(archive: TrafficArchive, anchors: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit predicted-segment targets and observed masks, ``(S, T_h, N, F)``."""
    th = archive.layout.steps_per_hour
    if not len(anchors):
        empty = np.zeros((0, th) + archive.shape[1:])
        return empty, empty.astype(bool)
    tgt = np.stack([archive.series[t:t + th] for t in anchors])
    mask = ~np.isnan(tgt)
    return np.where(mask, tgt, 0.0), mask


def horizon_step(minutes: float, cadence_minutes: float, seg_len: int) -> int:
    steps = minutes / cadence_minutes
    if steps != int(steps) or not 1 <= steps <= seg_len:
        raise ValueError(f"horizon {minutes} min is not a whole step in 1..{seg_len} at {cadence_minutes}-min cadence")
    return int(steps) - 1


def metrics_report(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    cadence_minutes: float,
    horizons_minutes: Sequence[float] = (15, 30, 60),
    windowed: bool = False,
) -> MetricsReport:
    """Per-step curve, per-horizon and overall metrics for ``(S, T_h, N, F)`` arrays."""
    seg_len = pred.shape[1]
    curve = []
    for s in range(seg_len):
        r, a, n = masked_metrics(pred[:, s], target[:, s], mask[:, s])
        curve.append({"step": s, "minutes": (s + 1) * cadence_minutes, "rmse": r, "mae": a, "count": n})
    horizons = []
    for minutes in horizons_minutes:
        s = horizon_step(minutes, cadence_minutes, seg_len)
        sl = slice(0, s + 1) if windowed else slice(s, s + 1)
        r, a, n = masked_metrics(pred[:, sl], target[:, sl], mask[:, sl])
        horizons.append({"minutes": minutes, "step": s, "rmse": r, "mae": a, "count": n})
    r, a, n = masked_metrics(pred, target, mask)
    return MetricsReport(horizons, {"rmse": r, "mae": a, "count": n}, curve, windowed)


def evaluate(
    params: ModelParams,
    archive: TrafficArchive,
    split: range,
    stats: NormalizationStats,
    basis: ChebBasis,
    integ: IntegratorConfig = IntegratorConfig(),
    horizons_minutes: Sequence[float] = (15, 30, 60),
    windowed: bool = False,
    branch: str = "fused",
    batch_size: int = 64,
) -> MetricsReport:
    """Masked RMSE/MAE in data units over every valid anchor of ``split``."""
    anchors = enumerate_valid_anchors(archive, split)
    pred = predict(params, archive, anchors, stats, basis, integ, batch_size)[branch]
    tgt, mask = targets_for(archive, anchors)
    return metrics_report(pred, tgt, mask, archive.cadence_minutes, horizons_minutes, windowed)


def historical_average(archive: TrafficArchive, train_range: range, anchors: Sequence[int]) -> np.ndarray:
    """Time-of-day mean over the training range, per vertex and feature.

    Slots never observed in training fall back to the overall training mean.
    """
    T_d = archive.layout.steps_per_day
    th = archive.layout.steps_per_hour
    block = archive.series[train_range.start:train_range.stop]
    slots = (np.arange(train_range.start, train_range.stop) % T_d)
    overall = np.nanmean(block.reshape(-1, *block.shape[1:]), axis=0)
    table = np.empty((T_d,) + block.shape[1:])
    for s in range(T_d):
        rows = block[slots == s]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = np.nanmean(rows, axis=0) if len(rows) else np.full(block.shape[1:], np.nan)
        table[s] = np.where(np.isnan(m), overall, m)
    if not len(anchors):
        return np.zeros((0, th) + block.shape[1:])
    idx = (np.asarray(anchors)[:, None] + np.arange(th)[None, :]) % T_d
    return table[idx]


# -- training loop ------------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_params: ModelParams
    best_state: AdamState
    final_params: ModelParams
    optimizer_state: AdamState
    log: list  # dicts: epoch, train_loss, val_rmse, val_mae, wall_seconds
    stats: NormalizationStats
    best_epoch: int
    splits: tuple


def dataset_loss(
    params: ModelParams,
    bundles: Sequence,
    basis: ChebBasis,
    integ: IntegratorConfig = IntegratorConfig(),
    loss_cfg: LossConfig = LossConfig(),
    batch_size: int = 64,
) -> float:
    """Sample-weighted mean composite loss over ``bundles`` (no gradient)."""
    total = 0.0
    for i in range(0, len(bundles), batch_size):
        batch = stack_bundles(bundles[i:i + batch_size])
        pred = model_forward(params.arrays, batch, basis, integ)
        loss, _ = composite_loss(pred.fused, pred.intermediate, batch, loss_cfg)
        total += float(loss.value) * len(batch)
    return total / len(bundles)


def train(
    archive: TrafficArchive,
    graph: SensorGraph,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    integ: IntegratorConfig = IntegratorConfig(),
    split_ratios: Sequence[float] = (0.7, 0.1, 0.2),
    on_epoch: Callable[[dict], None] | None = None,
    record_wall_time: bool = True,
) -> TrainResult:
    """Seeded mini-batch Adam training with best-validation checkpoint retention."""
    train_r, val_r, test_r = chronological_split(archive, split_ratios)
    anchors = enumerate_valid_anchors(archive, train_r)
    if not anchors:
        raise ValueError("training split holds no valid anchor")
    if graph.n_vertices != archive.shape[1]:
        raise ValueError(f"graph has {graph.n_vertices} vertices, archive has {archive.shape[1]}")
    stats = fit_normalizer(archive, train_r)
    basis = graph_basis(graph, 3)
    dims = ModelDims(archive.shape[1], archive.layout.steps_per_hour, archive.shape[2], cfg.hidden_dim, 3)

    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = ModelParams.init(dims, init_seq)
    shuffler = ad.rng(shuffle_seq)
    state = AdamState()
    bundles = [extract_bundle(archive, t, stats) for t in anchors]

    best, best_state, best_rmse, best_epoch = params, state, math.inf, 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffler.permutation(len(bundles))
        running = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = stack_bundles([bundles[j] for j in order[i:i + cfg.batch_size]])
            loss, grads = loss_and_grads(params, batch, basis, integ, loss_cfg, cfg.gradient_mode)
            running += loss * len(batch)
            params, state = adam_step(params, grads, state, cfg)
        val = evaluate(params, archive, val_r, stats, basis, integ, horizons_minutes=(),
                       batch_size=cfg.eval_batch_size)
        row = {
            "epoch": epoch,
            "train_loss": running / len(bundles),
            "val_rmse": val.overall["rmse"],
            "val_mae": val.overall["mae"],
            "wall_seconds": time.perf_counter() - t0 if record_wall_time else 0.0,
        }
        rows.append(row)
        log.info("epoch %d train_loss %.6g val_rmse %.6g val_mae %.6g",
                 epoch, row["train_loss"], row["val_rmse"], row["val_mae"])
        if on_epoch is not None:
            on_epoch(row)
        if row["val_rmse"] < best_rmse:
            best, best_state, best_rmse, best_epoch = params, state, row["val_rmse"], epoch
    return TrainResult(best, best_state, params, state, rows, stats, best_epoch, (train_r, val_r, test_r))
