"""How well do learned proficiencies rank students? Centralized NCD and DINA.

The degree of agreement (DOA) checks, concept by concept, whether a student
rated more proficient also tends to answer that concept's exercises right
where a less proficient peer answers wrong.

NCD runs here without clipping its network weights to be non-negative
(clipped and bias-free it can never predict below 0.5). Unclipped, the
network may flip the direction of a proficiency dimension, so NCD
predicts well while its raw proficiencies can correlate poorly with true
mastery. DINA's product form fixes the direction.

Run from the repository root:  python3 demos/04_diagnosis_quality.py
"""

import numpy as np

from fedcd import data, federation, metrics

spec = data.SyntheticSpec(2, 60, 60, 4, (0.0, 0.0), 40, student_spread=2.0, difficulty_spread=2.0)
synth = data.generate_synthetic(spec, 1)
clients = data.split_clients(synth.logs, synth.catalog, 0.8, 1)
test = data.pool_clients(clients).test

# The generator's true mastery gives a ceiling for DOA on these responses.
print(f"true mastery DOA (ties excluded): "
      f"{metrics.degree_of_agreement(synth.mastery, synth.qmatrix, test, exclude_ties=True):.4f}")

for kind in ("ncd", "dina"):
    central = federation.run_centralized(clients, synth.qmatrix, epochs=40, batch_size=64, seed=1,
                                         model=federation.ModelConfig(kind=kind, learning_rate=0.005))
    F = metrics.global_proficiency([central])
    report, _ = metrics.evaluate([central], synth.qmatrix)
    doa = metrics.degree_of_agreement(F, synth.qmatrix, test)
    doa_strict = metrics.degree_of_agreement(F, synth.qmatrix, test, exclude_ties=True)
    corr = np.corrcoef(F.ravel(), synth.mastery.ravel())[0, 1]
    print(f"{kind}: ACC {report.acc:.4f}  AUC {report.auc:.4f}  DOA {doa:.4f}  "
          f"DOA ties excluded {doa_strict:.4f}  corr with truth {corr:.3f}")
