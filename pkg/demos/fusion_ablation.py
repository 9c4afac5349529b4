"""How much each branch contributes once the model is trained."""

from astgode.data import Layout, chronological_split, enumerate_valid_anchors, synthetic_archive, synthetic_distances
from astgode.graph import build_adjacency, graph_basis
from astgode.training import TrainConfig, masked_metrics, predict, targets_for, train

layout = Layout(3, 12)
archive = synthetic_archive(200, 6, layout, noise=0.05, weekly_amplitude=0.2, seed=4)
graph = build_adjacency(synthetic_distances(6, seed=4), 6)
res = train(archive, graph, TrainConfig(learning_rate=5e-3, epochs=30, batch_size=4, hidden_dim=16))

_, _, test_r = chronological_split(archive)
anchors = enumerate_valid_anchors(archive, test_r)
target, mask = targets_for(archive, anchors)
preds = predict(res.best_params, archive, anchors, res.stats, graph_basis(graph))

# the fused head sees all three hidden states, each branch head only its own
for name in ("weekly", "daily", "recent", "fused"):
    rmse, mae, _ = masked_metrics(preds[name], target, mask)
    print(f"{name:>7}  rmse {rmse:.4f}  mae {mae:.4f}")
