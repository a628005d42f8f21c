"""Laplace noise on uploaded exercise embeddings and its cost in accuracy.

Run from the repository root:  python3 demos/03_privacy_noise.py
"""

import numpy as np

from fedcd import data, federation, metrics

# The noise itself: zero mean, variance 2 * scale^2.
sample = federation.apply_dp_noise(np.zeros(100_000), 0.2, 1)
print(f"scale 0.2: mean {sample.mean():+.4f}, variance {sample.var():.4f} (expected 0.08)")

spec = data.SyntheticSpec(4, 30, 80, 5, (-1.0, 0.0, 0.5, 1.0), 50)
catalog, qmatrix, logs = data.generate_synthetic(spec, 3)
clients = data.split_clients(logs, catalog, 0.8, 3)

print("\nscale   pooled ACC")
for scale in (0.0, 0.1, 0.3, 0.5):
    config = federation.StrategyConfig("full", federation.FairnessSoftmax(0.1), dp_scale=scale)
    result = federation.run_protocol(clients, qmatrix, config, rounds=15, epochs=3, batch_size=64, seed=3,
                                     model=federation.ModelConfig(learning_rate=0.005))
    report, _ = metrics.evaluate(result.clients, qmatrix)
    print(f"{scale:5.1f}   {report.acc:.4f}")
