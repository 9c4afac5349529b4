"""Command line entry point: ingest, train, evaluate, ablate-fusion, compare-adjoint.

All experiment settings come from one flat JSON document; ``--seed`` and
``--out`` override the corresponding keys.  Outputs are CSV/JSON only.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    ArchiveFormatError,
    TrafficArchive,
    chronological_split,
    enumerate_valid_anchors,
    fit_normalizer,
    load_archive,
    read_csv_matrix,
    write_archive,
    Layout,
)
from .graph import build_adjacency, graph_basis, read_distance_csv
from .model import CheckpointFormatError, load_params, save_params
from .odeint import IntegratorConfig
from .training import (
    LossConfig,
    TrainConfig,
    metrics_report,
    predict,
    targets_for,
    train,
)

log = logging.getLogger("astgode")


class UsageError(Exception):
    """Bad configuration or input; reported without a traceback."""


@dataclass
class RunConfig:
    archive: str | None = None
    distances: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_mode: str = "tape"
    alpha: float = 0.1
    method: str = "euler"
    substeps: int = 1
    hidden_dim: int = 64
    eval_batch_size: int = 64
    sigma: float | None = None
    epsilon: float = 0.1
    steps_per_day: int | None = None
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    horizons_minutes: list = field(default_factory=lambda: [15, 30, 60])
    windowed_metrics: bool = False
    csv_features: int = 1
    csv_cadence_minutes: float | None = None
    record_wall_time: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps, seed=self.seed,
            gradient_mode=self.gradient_mode, hidden_dim=self.hidden_dim,
            eval_batch_size=self.eval_batch_size,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.method, self.substeps)


# -- helpers ----------------------------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    try:
        cfg.train_config(), cfg.loss_config(), cfg.integrator()
    except ValueError as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return cfg


def _load_inputs(cfg: RunConfig):
    if not cfg.archive or not cfg.distances:
        raise UsageError("config must name both 'archive' and 'distances'")
    for p in (cfg.archive, cfg.distances):
        if not Path(p).exists():
            raise UsageError(f"file not found: {p}")
    archive = load_archive(cfg.archive, cfg.steps_per_day, csv_features=cfg.csv_features,
                           csv_cadence_minutes=cfg.csv_cadence_minutes)
    graph = build_adjacency(read_distance_csv(cfg.distances), archive.shape[1], cfg.sigma, cfg.epsilon)
    return archive, graph


def _finite(x) -> bool:
    if isinstance(x, dict):
        return all(_finite(v) for v in x.values())
    if isinstance(x, (list, tuple)):
        return all(_finite(v) for v in x)
    if isinstance(x, float):
        return math.isfinite(x)
    return True


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_rmse", "val_mae", "wall_seconds"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_rmse"]), repr(r["val_mae"]),
                        repr(r["wall_seconds"])])


def _split(cfg: RunConfig, archive: TrafficArchive, name: str) -> tuple:
    parts = chronological_split(archive, cfg.split)
    names = ("train", "val", "test")
    if name not in names:
        raise UsageError(f"unknown split {name!r}; choose from {names}")
    return parts[0], parts[names.index(name)]


def _run_training(cfg: RunConfig, out: Path):
    archive, graph = _load_inputs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    res = train(archive, graph, cfg.train_config(), cfg.loss_config(), cfg.integrator(), cfg.split,
                record_wall_time=cfg.record_wall_time)
    save_params(out / "checkpoint.astgp", res.best_params, res.best_state)
    save_params(out / "last.astgp", res.final_params, res.optimizer_state)
    _write_log(out / "epoch_log.csv", res.log)
    _write_json(out / "config.json", cfg.to_dict())
    return res


def _predictions(cfg: RunConfig, checkpoint, split: str):
    archive, graph = _load_inputs(cfg)
    try:
        params, _ = load_params(checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {checkpoint}") from None
    if params.dims.n_vertices != archive.shape[1] or params.dims.n_features != archive.shape[2] \
            or params.dims.seg_len != archive.layout.steps_per_hour:
        raise UsageError(f"checkpoint dimensions {params.dims} do not match the archive {archive.shape}")
    train_r, split_r = _split(cfg, archive, split)
    stats = fit_normalizer(archive, train_r)
    basis = graph_basis(graph, params.dims.cheb_order)
    anchors = enumerate_valid_anchors(archive, split_r)
    preds = predict(params, archive, anchors, stats, basis, cfg.integrator(), cfg.eval_batch_size)
    tgt, mask = targets_for(archive, anchors)
    return archive, preds, tgt, mask


# -- commands ------------------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"input not found: {src}")
    with open(src, "rb") as fh:
        binary = fh.read(4) == b"ASTG"
    if binary:
        archive = load_archive(src, None)
    else:
        series = read_csv_matrix(src, args.features)
        archive = TrafficArchive(series, Layout.from_cadence(args.cadence), float(args.cadence))
    write_archive(args.output, archive)
    T, N, F = archive.shape
    print(f"T={T} N={N} F={F} missing_fraction={archive.missing_fraction:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    res = _run_training(cfg, out)
    last = res.log[-1]
    print(f"best epoch {res.best_epoch}; final val_rmse={last['val_rmse']:.6g} val_mae={last['val_mae']:.6g}")
    return 0 if _finite(res.log) else 1


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    archive, preds, tgt, mask = _predictions(cfg, args.checkpoint, args.split)
    rep = metrics_report(preds["fused"], tgt, mask, archive.cadence_minutes, cfg.horizons_minutes,
                         cfg.windowed_metrics)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"split": args.split, "checkpoint": str(args.checkpoint), **rep.to_dict()}
    _write_json(out / f"metrics_{args.split}.json", doc)
    for h in rep.horizons:
        print(f"{h['minutes']:>5g} min  RMSE {h['rmse']:.4f}  MAE {h['mae']:.4f}  (n={h['count']})")
    print(f"  all      RMSE {rep.overall['rmse']:.4f}  MAE {rep.overall['mae']:.4f}")
    return 0 if _finite(rep.to_dict()) else 1


def cmd_ablate_fusion(args) -> int:
    cfg = _resolve_config(args)
    archive, preds, tgt, mask = _predictions(cfg, args.checkpoint, args.split)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    reports = {br: metrics_report(preds[br], tgt, mask, archive.cadence_minutes, ())
               for br in ("weekly", "daily", "recent", "fused")}
    seg_len = tgt.shape[1]
    for s in range(seg_len):
        for br, rep in reports.items():
            rows.append([s, br, repr(rep.curve[s]["rmse"]), repr(rep.curve[s]["mae"])])
    path = out / f"ablation_{args.split}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon_step", "branch", "rmse", "mae"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0 if all(math.isfinite(float(r[2])) and math.isfinite(float(r[3])) for r in rows) else 1


def _oscillation(log_rows) -> float:
    vals = [r["val_rmse"] for r in log_rows]
    return max((abs(b - a) for a, b in zip(vals, vals[1:])), default=0.0)


def cmd_compare_adjoint(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    summary = {}
    for mode in ("tape", "adjoint"):
        sub = dataclasses.replace(cfg, gradient_mode=mode, out_dir=str(out / mode))
        res = _run_training(sub, out / mode)
        summary[mode] = {
            "final_val_rmse": res.log[-1]["val_rmse"],
            "final_val_mae": res.log[-1]["val_mae"],
            "final_train_loss": res.log[-1]["train_loss"],
            "max_val_rmse_oscillation": _oscillation(res.log),
            "best_epoch": res.best_epoch,
        }
    summary["method"] = cfg.method
    summary["substeps"] = cfg.substeps
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.json", cfg.to_dict())
    for mode in ("tape", "adjoint"):
        s = summary[mode]
        print(f"{mode:8s} val RMSE {s['final_val_rmse']:.6g}  MAE {s['final_val_mae']:.6g}  "
              f"max oscillation {s['max_val_rmse_oscillation']:.4g}")
    return 0 if _finite(summary) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="astgode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a CSV matrix (or binary archive) to the canonical archive")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--features", type=int, default=1, help="features per vertex in the CSV (default 1)")
    p.add_argument("--cadence", type=float, default=5, help="minutes between rows (default 5)")
    p.set_defaults(func=cmd_ingest)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")

    p = sub.add_parser("train", help="train a model and write checkpoint + epoch log")
    common(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "per-horizon masked RMSE/MAE as JSON"),
        ("ablate-fusion", cmd_ablate_fusion, "per-branch horizon curves as CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.set_defaults(func=func)

    p = sub.add_parser("compare-adjoint", help="train with tape and adjoint gradients from one seed")
    common(p)
    p.set_defaults(func=cmd_compare_adjoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ArchiveFormatError, CheckpointFormatError) as exc:
        print(f"astgode {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"astgode {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
