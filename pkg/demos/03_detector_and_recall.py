"""Train a small five-member detector ensemble and measure recall per variant.

A reduced corpus (shorter traces, fewer trials, smaller network) keeps this
under a minute; the CLI runs the full-size experiment.

Run:  python3 demos/03_detector_and_recall.py
"""

from evadebench.analysis import recall_sweep
from evadebench.candidates import CandidateConfig
from evadebench.detector import Hyperparams, train_ensemble
from evadebench.features import FeatureSpec, extract
from evadebench.simulator import WorkloadSpec, candidate_grid, simulate
from evadebench.trace import EnvironmentProfile

env = EnvironmentProfile()
spec = FeatureSpec(0.1, 10.0)
duration = 10.0

families = [CandidateConfig(t, 1.0, 0.0) for t in (1, 2, 3, 4, 8)]
benign = ["idle", "compressor", "bulk_encryptor", "secure_delete", "browser_like", "office_like"]

dataset = []
for i, fam in enumerate(families):
    for t in range(6):
        tr = simulate(WorkloadSpec("encryptor", candidate=fam, duration=duration), env, 1000 * i + t)
        dataset.append(extract(tr, spec))
for i, name in enumerate(benign):
    for t in range(5):
        tr = simulate(WorkloadSpec("benign_archetype", archetype=name, duration=duration), env, 5000 + 100 * i + t)
        dataset.append(extract(tr, spec))

ensemble = train_ensemble(dataset, Hyperparams(hidden=(32, 16), epochs=25), seeds=[101, 202, 303, 404, 505])

grid = candidate_grid([1, 2, 3], [1.0], [0.0, 0.05, 0.1])
held_out = {
    c: [extract(simulate(WorkloadSpec("encryptor", candidate=c, duration=duration), env, 90_000 + s), spec) for s in range(4)]
    for c in grid
}
for row in recall_sweep(ensemble, held_out):
    cm = row.confusion
    print(f"{row.candidate.key:<18} tp={cm.tp:>2} fn={cm.fn:>2}  recall={row.recall:.2f}")
