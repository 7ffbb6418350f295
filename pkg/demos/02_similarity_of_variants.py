"""How much does each micro-behavior knob move the features away from the original?

Builds the 12-candidate sub-grid at 100 % and 50 % encryption ratio for
threads 1 and 3 and prints the per-dimension cosine similarity to the baseline
for a few telling dimensions.

Run:  python3 demos/02_similarity_of_variants.py
"""

from evadebench.analysis import Excluded, candidate_similarity_table
from evadebench.candidates import CandidateConfig
from evadebench.features import FeatureSpec, average_features, extract
from evadebench.simulator import WorkloadSpec, candidate_grid, simulate
from evadebench.trace import EnvironmentProfile

env = EnvironmentProfile()
spec = FeatureSpec(1.0, 30.0)
baseline = CandidateConfig(3, 1.0, 0.1)
grid = candidate_grid([1, 3], [0.5, 1.0], [0.0, 0.05, 0.1], baseline)

features = {}
for cand in grid:
    trials = [extract(simulate(WorkloadSpec("encryptor", candidate=cand), env, seed), spec) for seed in range(3)]
    features[cand] = average_features(trials)

table = candidate_similarity_table(features, baseline)
cols = ["x_0", "x_1", "x_2", "x_3", "x_9", "x_17"]
print(f"{'candidate':<18}" + "".join(f"{c:>9}" for c in cols))
for row in table.rows:
    cells = [table.cell(row, c) for c in cols]
    print(f"{row:<18}" + "".join(f"{'excl':>9}" if isinstance(v, Excluded) else f"{v:>9.3f}" for v in cells))
print("\nexcluded columns:", ", ".join(table.excluded_columns()))
