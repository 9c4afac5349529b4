"""Train on a small synthetic archive and compare with the historical average."""

from astgode.data import Layout, chronological_split, enumerate_valid_anchors, synthetic_archive, synthetic_distances
from astgode.graph import build_adjacency, graph_basis
from astgode.training import TrainConfig, historical_average, masked_metrics, predict, targets_for, train

layout = Layout(3, 12)  # 20-minute cadence with a 12-step day, so a week fits in 84 steps
archive = synthetic_archive(200, 6, layout, noise=0.05, seed=1)
graph = build_adjacency(synthetic_distances(6, seed=1), 6)

res = train(archive, graph, TrainConfig(learning_rate=5e-3, epochs=30, batch_size=4, hidden_dim=16),
            on_epoch=lambda row: print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  "
                                       f"val rmse {row['val_rmse']:.4f}"))
print("best epoch:", res.best_epoch)

train_r, _, test_r = chronological_split(archive)
anchors = enumerate_valid_anchors(archive, test_r)
target, mask = targets_for(archive, anchors)
model = predict(res.best_params, archive, anchors, res.stats, graph_basis(graph))["fused"]
print("test RMSE  model %.4f   historical average %.4f" % (
    masked_metrics(model, target, mask)[0], masked_metrics(historical_average(archive, train_r, anchors), target, mask)[0]))
