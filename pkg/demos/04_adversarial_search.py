"""Search the 24-variant grid for the cheapest evader of a query-only detector.

The detector here is a hand-written rule (flag any trace whose write
throughput ever exceeds a bound) so the outcome is easy to reason about; the
search only ever calls its ``predict`` method.

Run:  python3 demos/04_adversarial_search.py
"""

import json

from evadebench.detector import Prediction
from evadebench.features import FeatureSpec
from evadebench.search import SearchConfig, search, selection_record
from evadebench.simulator import candidate_grid
from evadebench.trace import EnvironmentProfile


class ThroughputRule:
    def __init__(self, bound):
        self.bound = bound

    def predict(self, features):
        peak = features.values[:, 1].max()  # write throughput column
        hit = peak > self.bound
        return Prediction(float(hit), "ransomware" if hit else "benign")


env = EnvironmentProfile()
grid = candidate_grid([1, 2, 3], [0.5, 1.0], [0.0, 0.025, 0.05, 0.1])
config = SearchConfig(alpha=0.5, beta=0.5, trials_per_candidate=3, horizon=10.0)

selected, results = search(grid, [ThroughputRule(12e6)], env, config, feature_spec=FeatureSpec(0.5, 10.0), seed=4)
print(f"{'candidate':<18}{'evades':>7}{'F':>6}{'P':>7}{'objective':>10}{'|eps|':>9}")
for r in results:
    print(f"{r.candidate.key:<18}{str(r.evades):>7}{r.functional_degradation:>6.2f}"
          f"{r.performance_degradation:>7.2f}{r.objective:>10.3f}{r.perturbation_norm:>9.2f}")
print(json.dumps(selection_record(selected, results, config), indent=1))
