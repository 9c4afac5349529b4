"""Encoder, attention-modulated Chebyshev ODE blocks, fusion layer and decoder.

Hidden states are ``(B, T_h, N, d_h)`` arrays; the single-sample helpers also
accept ``(T_h, N, d_h)``.  All layer functions take parameters as Variables or
plain arrays, so the same code serves recorded and value-only evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable, rng
from .data import BRANCHES, Batch
from .graph import ChebBasis
from .odeint import IntegratorConfig, integrate

__all__ = [
    "ModelDims",
    "ModelParams",
    "Predictions",
    "encode",
    "spatial_attention",
    "temporal_attention",
    "dynamics",
    "ode_block_forward",
    "fuse",
    "decode",
    "model_forward",
    "branch_params",
    "save_params",
    "load_params",
    "CheckpointFormatError",
]


@dataclass(frozen=True)
class ModelDims:
    n_vertices: int
    seg_len: int
    n_features: int
    hidden: int = 64
    cheb_order: int = 3

    def __post_init__(self):
        for name in ("n_vertices", "seg_len", "n_features", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cheb_order < 0:
            raise ValueError("cheb_order must be >= 0")


def param_shapes(dims: ModelDims) -> dict:
    d, n, t, f = dims.hidden, dims.n_vertices, dims.seg_len, dims.n_features
    shapes = {"encoder.weight": (d, f), "encoder.bias": (d,)}
    for b in BRANCHES:
        shapes.update({
            f"{b}.spatial.U1": (t,),
            f"{b}.spatial.U2": (d, t),
            f"{b}.spatial.U3": (d,),
            f"{b}.spatial.bias": (n, n),
            f"{b}.spatial.V": (n, n),
            f"{b}.temporal.M1": (n,),
            f"{b}.temporal.M2": (d, n),
            f"{b}.temporal.M3": (d,),
            f"{b}.temporal.bias": (t, t),
            f"{b}.temporal.V": (t, t),
        })
        for k in range(dims.cheb_order + 1):
            shapes[f"{b}.cheb.theta{k}"] = (d, d)
    shapes.update({
        "fusion.weight": (d, 3 * d),
        "fusion.bias": (d,),
        "decoder.weight": (f, d),
        "decoder.bias": (f,),
    })
    return shapes


def _glorot(g: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], shape[1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-lim, lim, size=shape)


class ModelParams:
    """Named parameter arrays in a fixed order."""

    def __init__(self, dims: ModelDims, arrays: Mapping[str, np.ndarray]):
        shapes = param_shapes(dims)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            raise ValueError(f"parameter names do not match the layout: {sorted(missing) or 'order differs'}")
        for k, shp in shapes.items():
            if arrays[k].shape != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {arrays[k].shape}")
        self.dims = dims
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, dims: ModelDims, seed: int) -> "ModelParams":
        g = rng(seed)
        arrays = {}
        for name, shp in param_shapes(dims).items():
            if name.endswith(".bias"):
                arrays[name] = np.zeros(shp)
            elif name.endswith(".V"):
                arrays[name] = np.ones(shp)
            else:
                arrays[name] = _glorot(g, shp)
        return cls(dims, arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: Tape) -> dict:
        return {k: tape.variable(v) for k, v in self.arrays.items()}

    def n_scalars(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def branch_params(p: Mapping, branch: str) -> dict:
    """Strip the branch prefix: ``weekly.spatial.U1`` -> ``spatial.U1``."""
    pre = branch + "."
    return {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}


# -- layers -------------------------------------------------------------------------


def _affine(x, weight, bias):
    return ad.add(ad.matmul(x, ad.transpose(weight)), bias)


def encode(segment, weight, bias) -> Variable:
    """Per-position affine map ``F -> d_h`` followed by relu."""
    val = segment.value if isinstance(segment, Variable) else np.asarray(segment)
    if np.isnan(val).any():
        raise ValueError("encoder input contains NaN; impute missing entries first")
    return ad.relu(_affine(segment, weight, bias))


def decode(h, weight, bias) -> Variable:
    """Per-position affine map ``d_h -> F`` (no output activation)."""
    return _affine(h, weight, bias)


def fuse(h_weekly, h_daily, h_recent, weight, bias) -> Variable:
    shapes = {tuple(np.shape(x.value if isinstance(x, Variable) else x)) for x in (h_weekly, h_daily, h_recent)}
    if len(shapes) != 1:
        raise ad.ShapeError(f"fusion inputs differ in shape: {sorted(shapes)}")
    cat = ad.concat([h_weekly, h_daily, h_recent], axis=-1)
    return _affine(cat, weight, bias)


def _batched(fn):
    def wrapper(h, *args, **kwargs):
        shp = h.value.shape if isinstance(h, Variable) else np.shape(h)
        if len(shp) == 3:
            out = fn(ad.reshape(h, (1,) + tuple(shp)), *args, **kwargs)
            return ad.reshape(out, out.shape[1:])
        if len(shp) != 4:
            raise ad.ShapeError(f"hidden state must be (T_h, N, d_h) or batched, got {shp}")
        return fn(h, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def spatial_attention(h, p: Mapping) -> Variable:
    """Row-stochastic ``N x N`` attention.

    ``softmax_rows(V @ sigmoid((H U1 U2)(U3 H)^T + bias))`` with the contractions
    taken over time/hidden axes as appropriate.
    """
    lhs = ad.einsum("bnc,cj->bnj", ad.einsum("btnc,t->bnc", h, p["spatial.U1"]), p["spatial.U2"])
    rhs = ad.einsum("btnc,c->bnt", h, p["spatial.U3"])
    score = ad.einsum("bnj,bmj->bnm", lhs, rhs)
    gate = ad.sigmoid(ad.add(score, p["spatial.bias"]))
    return ad.softmax(ad.einsum("nk,bkm->bnm", p["spatial.V"], gate), axis=-1)


@_batched
def temporal_attention(h, p: Mapping) -> Variable:
    """Row-stochastic ``T_h x T_h`` attention; the vertex/time mirror of the spatial one."""
    lhs = ad.einsum("btc,cj->btj", ad.einsum("btnc,n->btc", h, p["temporal.M1"]), p["temporal.M2"])
    rhs = ad.einsum("btnc,c->btn", h, p["temporal.M3"])
    score = ad.einsum("btj,bsj->bts", lhs, rhs)
    gate = ad.sigmoid(ad.add(score, p["temporal.bias"]))
    return ad.softmax(ad.einsum("tk,bks->bts", p["temporal.V"], gate), axis=-1)


@_batched
def dynamics(h, p: Mapping, basis: ChebBasis) -> Variable:
    """``dH/dtau = relu(sum_k ((T_k * A_S) H') Theta_k)`` with ``H' = A_T H`` along time."""
    n = h.value.shape[2] if isinstance(h, Variable) else np.shape(h)[2]
    if basis.n_vertices != n:
        raise ValueError(f"Chebyshev basis is {basis.n_vertices}x{basis.n_vertices}, state has N={n}")
    a_t = temporal_attention(h, p)
    a_s = spatial_attention(h, p)
    mixed = ad.einsum("bts,bsnc->btnc", a_t, h)
    total = None
    for k, poly in enumerate(basis.polys):
        prop = ad.mul(poly, a_s)
        term = ad.matmul(ad.einsum("bnm,btmc->btnc", prop, mixed), p[f"cheb.theta{k}"])
        total = term if total is None else ad.add(total, term)
    return ad.relu(total)


def ode_block_forward(h0, p: Mapping, basis: ChebBasis, config: IntegratorConfig = IntegratorConfig()) -> list:
    """Three unit advances of one branch: ``[H_1, H_2, H_3]``."""
    return integrate(lambda h, th: dynamics(h, th, basis), h0, p, 3, config)


@dataclass
class Predictions:
    fused: Variable  # (B, T_h, N, F)
    intermediate: dict  # (branch, k) -> decoded H_k, k in {1, 2}
    branch_final: dict  # branch -> decoded H_3, used by the fusion ablation
    hidden: dict  # branch -> [H_0, H_1, H_2, H_3]


def decode_head(p: Mapping, hidden: Mapping) -> tuple[Variable, dict, dict]:
    """Decode the intermediate checkpoints and the fused final state."""
    w, b = p["decoder.weight"], p["decoder.bias"]
    inter = {(br, k): decode(hidden[br][k], w, b) for br in BRANCHES for k in (1, 2)}
    fused_h = fuse(*(hidden[br][3] for br in BRANCHES), p["fusion.weight"], p["fusion.bias"])
    finals = {br: decode(hidden[br][3], w, b) for br in BRANCHES}
    return decode(fused_h, w, b), inter, finals


def model_forward(
    p: Mapping,
    batch: Batch,
    basis: ChebBasis,
    config: IntegratorConfig = IntegratorConfig(),
) -> Predictions:
    hidden = {}
    for br in BRANCHES:
        h0 = encode(batch.inputs[br], p["encoder.weight"], p["encoder.bias"])
        hidden[br] = [h0] + ode_block_forward(h0, branch_params(p, br), basis, config)
    fused, inter, finals = decode_head(p, hidden)
    return Predictions(fused, inter, finals, hidden)


# -- checkpoint file ------------------------------------------------------------------

PARAM_MAGIC = b"ASTGP"
PARAM_VERSION = 1
OPT_MAGIC = b"ADAM"


class CheckpointFormatError(ValueError):
    pass


def _write_blocks(fh, arrays: Mapping[str, np.ndarray]):
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blocks(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (ln,) = self.unpack("<I")
            name = self.take(ln).decode("utf-8")
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        return out


def save_params(path, params: ModelParams, optimizer_state=None) -> None:
    """Write parameters, optionally followed by an Adam state appendix."""
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<IIIIII", PARAM_VERSION, d.hidden, d.n_vertices, d.seg_len, d.n_features, d.cheb_order))
        _write_blocks(fh, params.arrays)
        if optimizer_state is not None:
            fh.write(OPT_MAGIC)
            fh.write(struct.pack("<Q", optimizer_state.step))
            _write_blocks(fh, {f"m.{k}": v for k, v in optimizer_state.m.items()})
            _write_blocks(fh, {f"v.{k}": v for k, v in optimizer_state.v.items()})


def load_params(path):
    """Return ``(ModelParams, optimizer_state or None)``."""
    from .training import AdamState

    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(PARAM_MAGIC)) != PARAM_MAGIC:
        raise CheckpointFormatError(f"{path}: not a parameter checkpoint")
    version, hidden, n, t, f, order = r.unpack("<IIIIII")
    if version != PARAM_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    dims = ModelDims(n, t, f, hidden, order)
    try:
        params = ModelParams(dims, r.blocks())
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from None
    opt = None
    if r.pos < len(r.raw):
        if r.take(len(OPT_MAGIC)) != OPT_MAGIC:
            raise CheckpointFormatError(f"{path}: trailing bytes are not an optimizer appendix")
        (step,) = r.unpack("<Q")
        m = {k[2:]: v for k, v in r.blocks().items()}
        v = {k[2:]: v for k, v in r.blocks().items()}
        opt = AdamState(step, m, v)
    return params, opt
