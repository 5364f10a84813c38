"""Training the graph classifier on a small synthetic dataset.

Uses 20 cases and a short schedule so it finishes in well under a minute.
The acceptance suite runs the full 100-case benchmark.

Run with ``python demos/04_train_graph_classifier.py``.
"""

import numpy as np

from bronchusnet import pvgnn
from bronchusnet.metrics import classification_metrics
from bronchusnet.pipeline import benchmark_graphs

train, test = benchmark_graphs(n_cases=20, seed=0)
print(f"{len(train)} training graphs, {len(test)} test graphs, {sum(g.n_nodes for g in train)} training nodes")

for features in ("pv", "p"):
    config = pvgnn.TrainConfig(epochs=80, features=features, seed=0)
    params, history = pvgnn.train(train, config, val_graphs=test)
    for row in history[::20] + [history[-1]]:
        print(f"  [{features}] epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  val acc {row.get('val_acc', float('nan')):.3f}")
    batch = pvgnn.collate(test, features)
    pred = np.argmax(pvgnn.forward(batch, params), axis=1)
    report = classification_metrics(pred, batch.labels, config.n_classes)
    print(f"[{features}] test accuracy {report.accuracy:.3f}, macro f1 {report.f1:.3f}")
