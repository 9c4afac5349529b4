"""Two ways to differentiate through the ODE block, and what they cost."""

import numpy as np

from astgode import autodiff as ad
from astgode.odeint import IntegratorConfig, StateCounter, grad_via_adjoint, grad_via_tape, integrate

g = np.random.default_rng(5)
h0 = g.normal(size=(2, 3))
theta = {"A": g.normal(size=(3, 3))}


def field(h, th):
    return ad.tanh(ad.matmul(h, ad.transpose(th["A"])))


def terminal(states):
    return ad.sum(ad.square(states[-1])) * 0.5


# Euler: the adjoint is the exact transpose of the discrete steps, so it agrees with the tape
for method, substeps in [("euler", 1), ("euler", 4), ("rk4", 4), ("rk4", 16), ("rk4", 64)]:
    cfg = IntegratorConfig(method, substeps)
    gh_t, gt_t = grad_via_tape(field, h0, theta, terminal, 3, cfg)
    states = [h0] + integrate(field, h0, theta, 3, cfg)
    counter = StateCounter()
    gh_a, gt_a = grad_via_adjoint(field, theta, states, [None, None, None, states[-1]], cfg, counter)
    gap = np.linalg.norm(gt_a["A"] - gt_t["A"]) / np.linalg.norm(gt_t["A"])
    # rk4: the adjoint solves the continuous backward system, the gap shrinks as substeps grow
    print(f"{method}/{substeps:<3} relative gap {gap:.2e}   peak live states {counter.peak}")
