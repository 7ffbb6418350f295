"""Simulate one encryptor variant and one benign workload, then look at their features.

Run:  python3 demos/01_traces_and_features.py
"""

from evadebench.candidates import CandidateConfig
from evadebench.features import FEATURE_NAMES, FeatureSpec, extract
from evadebench.simulator import WorkloadSpec, files_encrypted, simulate
from evadebench.trace import EnvironmentProfile

env = EnvironmentProfile()
spec = FeatureSpec(t_window=1.0, t_d=30.0)

# The unmodified variant: three threads, whole files, 100 ms pause after each file.
enc = simulate(WorkloadSpec("encryptor", candidate=CandidateConfig(3, 1.0, 0.1)), env, seed=1)
zipper = simulate(WorkloadSpec("benign_archetype", archetype="compressor"), env, seed=1)

print(f"encryptor: {len(enc.storage_events)} storage events, {len(enc.memory_events)} memory events, "
      f"{files_encrypted(enc, 30.0)} files finished in 30 s")
print(f"compressor: {len(zipper.storage_events)} storage events, {len(zipper.memory_events)} memory events")

a, b = extract(enc, spec).values, extract(zipper, spec).values
print(f"\nfeature matrix shape {a.shape}; per-column means (encryptor vs compressor):")
for j, name in enumerate(FEATURE_NAMES):
    print(f"  x_{j:<2} {name:<28} {a[:, j].mean():>14.4g} {b[:, j].mean():>14.4g}")
