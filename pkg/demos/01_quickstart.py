"""Quickstart: simulate schools, train FedCD for a few rounds, inspect the report.

Run from the repository root:  python3 demos/01_quickstart.py
"""

import numpy as np

from fedcd import data, federation, metrics

# Three schools of differing ability answer exercises tagged with four concepts.
spec = data.SyntheticSpec(
    schools=3, students_per_school=30, exercises=60, concepts=4,
    school_ability_offsets=(-1.0, 0.0, 1.0), logs_per_student=40,
)
catalog, qmatrix, logs = data.generate_synthetic(spec, 0)
print("logs:", len(logs), "| correct rate per school:", np.round(data.correct_rate_by_school(logs, catalog), 3))

# Each school keeps 80% of every student's exercises for training.
clients = data.split_clients(logs, catalog, 0.8, 0)
for c in clients:
    print(f"school {c.school}: {c.num_students} students, {len(c.train)} train / {len(c.test)} test")

# FedCD: exercise embeddings are shared, student embeddings and the diagnostic
# network stay on each client, and the server up-weights poorly fit clients.
config = federation.StrategyConfig("full", federation.FairnessSoftmax(gamma=0.1))
result = federation.run_protocol(
    clients, qmatrix, config, rounds=10, epochs=3, batch_size=64, seed=0,
    model=federation.ModelConfig(learning_rate=0.005),
)
print("mean client loss by round:", np.round(result.loss_by_round(), 4))
print("last aggregation weights:", np.round(result.server.last_weights, 4))

report, _ = metrics.evaluate(result.clients, qmatrix, with_doa=True)
print(f"pooled ACC {report.acc:.4f}  RMSE {report.rmse:.4f}  AUC {report.auc:.4f}  GF {report.gf:.4f}  DOA {report.doa:.4f}")
for school, m in report.per_client.items():
    print(f"  school {school}: ACC {m.acc:.4f} over {m.n_test} test responses")
