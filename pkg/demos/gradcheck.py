"""Tape gradients of the full model against central differences."""

import numpy as np

from astgode.autodiff import Tape
from astgode.data import Layout, chronological_split, enumerate_valid_anchors, extract_bundle, fit_normalizer
from astgode.data import stack_bundles, synthetic_archive, synthetic_distances
from astgode.graph import build_adjacency, graph_basis
from astgode.model import ModelDims, ModelParams, model_forward
from astgode.training import composite_loss

layout = Layout(3, 6)
archive = synthetic_archive(120, 4, layout, n_features=2, seed=7)
basis = graph_basis(build_adjacency(synthetic_distances(4, seed=7), 4, epsilon=0.0))
train_r, _, _ = chronological_split(archive)
stats = fit_normalizer(archive, train_r)
batch = stack_bundles([extract_bundle(archive, t, stats) for t in enumerate_valid_anchors(archive, train_r)[:3]])
params = ModelParams.init(ModelDims(4, 3, 2, hidden=4), 7)


def loss(arrays):
    pred = model_forward(arrays, batch, basis)
    return composite_loss(pred.fused, pred.intermediate, batch)[0]


tape = Tape()
leaves = params.leaves(tape)
grads = tape.backward(loss(leaves))

print(f"{'tensor':<28}{'size':>6}{'rel err':>12}")
for name, val in params.items():
    fd = np.zeros_like(val)
    for idx in np.ndindex(val.shape):
        h = 1e-6 * max(1.0, abs(val[idx]))
        up, dn = val.copy(), val.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (loss({**params.arrays, name: up}).value - loss({**params.arrays, name: dn}).value) / (2 * h)
    g = grads[leaves[name]]
    err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
    print(f"{name:<28}{val.size:>6}{err:>12.2e}")
