"""Fixed-step integration of block dynamics and its two gradient paths.

Dynamics have the signature ``f(h, theta) -> dh/dtau`` where ``h`` is a Variable
(or array) and ``theta`` a dict of named parameters.  Each unit advance of
``tau`` is split into ``substeps`` equal steps.

``grad_via_tape`` differentiates the recorded discrete solver.
``grad_via_adjoint`` integrates the cotangent ``a(tau)`` backwards, keeping only
the states at integer ``tau`` and re-integrating each interval on demand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable

__all__ = [
    "IntegratorConfig",
    "NonFiniteStateError",
    "StateCounter",
    "integrate",
    "grad_via_tape",
    "grad_via_adjoint",
]

METHODS = ("euler", "rk4")


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "euler"
    substeps: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integrator {self.method!r}; expected one of {METHODS}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps}")


class StateCounter:
    """Counts hidden-state arrays held at once by the adjoint pass."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def retain(self, n: int = 1):
        self.current += n
        self.peak = max(self.peak, self.current)

    def release(self, n: int = 1):
        self.current -= n


def _step(f, h, theta, dt: float, method: str):
    if method == "euler":
        return ad.add(h, ad.scale(f(h, theta), dt))
    k1 = f(h, theta)
    k2 = f(ad.add(h, ad.scale(k1, dt / 2)), theta)
    k3 = f(ad.add(h, ad.scale(k2, dt / 2)), theta)
    k4 = f(ad.add(h, ad.scale(k3, dt)), theta)
    incr = ad.add(ad.add(k1, ad.scale(k2, 2.0)), ad.add(ad.scale(k3, 2.0), k4))
    return ad.add(h, ad.scale(incr, dt / 6))


def _check(h, tau: float):
    val = h.value if isinstance(h, Variable) else h
    if not np.all(np.isfinite(val)):
        raise NonFiniteStateError(f"non-finite hidden state at tau={tau:g}")


def integrate(
    f: Callable,
    h0,
    theta: Mapping,
    n_advances: int = 3,
    config: IntegratorConfig = IntegratorConfig(),
) -> list:
    """States at ``tau = 1..n_advances``.

    Variables in, Variables out (recorded on their tape); arrays in, arrays out.
    """
    as_array = not isinstance(h0, Variable)
    dt = 1.0 / config.substeps
    h = h0
    out = []
    for i in range(n_advances):
        for j in range(config.substeps):
            h = _step(f, h, theta, dt, config.method)
            _check(h, i + (j + 1) * dt)
        out.append(h.value if as_array else h)
    return out


def grad_via_tape(
    f: Callable,
    h0: np.ndarray,
    theta: Mapping[str, np.ndarray],
    loss_fn: Callable[[list], Variable],
    n_advances: int = 3,
    config: IntegratorConfig = IntegratorConfig(),
) -> tuple[np.ndarray, dict]:
    """Gradients of ``loss_fn(checkpoints)`` by reverse sweep over the recorded solver."""
    tape = Tape()
    hv = tape.variable(h0)
    tv = {k: tape.variable(v) for k, v in theta.items()}
    states = integrate(f, hv, tv, n_advances, config)
    grads = tape.backward(loss_fn(states))
    return grads[hv], {k: grads[v] for k, v in tv.items()}


def _augmented(f, theta: Mapping[str, np.ndarray]):
    """``(h, a) -> (f(h), a^T df/dh, a^T df/dtheta)`` from one forward and one reverse sweep."""
    names = list(theta)
    prim = [theta[k] for k in names]

    def fn(hv, *tv):
        return f(hv, dict(zip(names, tv)))

    def evaluate(h, a):
        val, grads = ad.value_and_vjp(fn, [h, *prim], a)
        return val, grads[0], dict(zip(names, grads[1:]))

    return evaluate


def grad_via_adjoint(
    f: Callable,
    theta: Mapping[str, np.ndarray],
    checkpoints: Sequence[np.ndarray],
    cotangents: Sequence,
    config: IntegratorConfig = IntegratorConfig(),
    counter: StateCounter | None = None,
) -> tuple[np.ndarray, dict]:
    """Adjoint gradients ``(dL/dH_0, dL/dtheta)``.

    ``checkpoints`` are the forward states at ``tau = 0..n``; ``cotangents[k]`` is
    ``dL/dH_k`` from the loss terms at that checkpoint (None for no term).  Each
    cotangent is added to the adjoint as a jump when the backward pass reaches
    ``tau = k``.

    Within an interval the states are re-integrated forward from the stored
    checkpoint and visited in reverse.  With ``euler`` each backward step takes
    the vector-Jacobian product at the forward state that started the step, the
    exact transpose of the forward update.  With ``rk4`` the adjoint system
    ``da/dtau = -a^T df/dh`` is stepped backwards with the classical rule, the
    state being co-integrated within the step from the stored state at its end.
    """
    n = len(checkpoints) - 1
    if n < 1:
        raise ValueError("need the initial state and at least one checkpoint")
    if len(cotangents) != n + 1:
        raise ValueError(f"expected {n + 1} cotangents (one per checkpoint), got {len(cotangents)}")
    for k, c in enumerate(checkpoints):
        if c is None:
            raise ValueError(f"checkpoint at tau={k} is missing")
    counter = counter if counter is not None else StateCounter()
    counter.retain(n + 1)

    aug = _augmented(f, theta)
    s = config.substeps
    dt = 1.0 / s
    a = np.zeros_like(checkpoints[n], dtype=np.float64)
    gtheta = {k: np.zeros_like(v, dtype=np.float64) for k, v in theta.items()}

    def jump(k):
        nonlocal a
        if cotangents[k] is not None:
            a = a + np.asarray(cotangents[k], dtype=np.float64)

    jump(n)
    for k in range(n, 0, -1):
        states = [np.asarray(checkpoints[k - 1], dtype=np.float64)]
        counter.retain(1)
        for _ in range(s):
            states.append(_step(f, states[-1], theta, dt, config.method).value)
            counter.retain(1)
        for j in range(s - 1, -1, -1):
            if config.method == "euler":
                _, gh, gt = aug(states[j], a)
                a = a + dt * gh
                for name in gtheta:
                    gtheta[name] = gtheta[name] + dt * gt[name]
            else:
                a, gtheta = _rk4_adjoint_step(aug, states[j + 1], a, gtheta, dt)
            if not np.all(np.isfinite(a)):
                raise NonFiniteStateError(f"non-finite adjoint at tau={k - 1 + j * dt:g}")
        counter.release(len(states))
        jump(k - 1)
    counter.release(n + 1)
    return a, gtheta


def _rk4_adjoint_step(aug, h_end, a_end, gtheta, dt):
    f1, gh1, gt1 = aug(h_end, a_end)
    f2, gh2, gt2 = aug(h_end - 0.5 * dt * f1, a_end + 0.5 * dt * gh1)
    f3, gh3, gt3 = aug(h_end - 0.5 * dt * f2, a_end + 0.5 * dt * gh2)
    _, gh4, gt4 = aug(h_end - dt * f3, a_end + dt * gh3)
    a = a_end + (dt / 6) * (gh1 + 2.0 * gh2 + 2.0 * gh3 + gh4)
    out = {}
    for name, g in gtheta.items():
        out[name] = g + (dt / 6) * (gt1[name] + 2.0 * gt2[name] + 2.0 * gt3[name] + gt4[name])
    return a, out
