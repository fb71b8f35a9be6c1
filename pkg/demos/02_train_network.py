"""Learning the mount from data.

The network maps the camera's pose relative to the base to its specific
acceleration in camera axes.  Sequences of all four patterns are pooled,
split into 7:2:1 blocks and fitted with Adam on an L1 loss.
Run: python3 demos/02_train_network.py [weights.json]
"""
import sys
import time

import numpy as np

from springcam import dfn
from springcam import experiment as ex

manifest = ex.ExperimentManifest(n_sequences=6, profile="tiny")
t0 = time.perf_counter()
seqs = ex.training_sequences(manifest)
print(f"simulated {len(seqs)} sequences ({', '.join(manifest.patterns)}) "
      f"in {time.perf_counter() - t0:.0f} s")

data = dfn.make_dataset(seqs)
print(f"{len(data)} samples; label std linear {data.labels[:, :3].std(0).round(3)} m/s^2")

t0 = time.perf_counter()
report = ex.train_network(seqs, manifest)
res = report.result
print(f"trained {dfn.PROFILES[manifest.profile]} for {len(res.train_l1)} epochs "
      f"in {time.perf_counter() - t0:.0f} s")
print(f"final L1 train {res.train_l1[-1]:.4f}, validation {res.val_l1[-1]:.4f}")
print("held-out L1 / std:", np.round(report.rel_error, 4), "gate passed" if report.passed else "gate FAILED")

if len(sys.argv) > 1:
    res.net.save(sys.argv[1])
    print("weights written to", sys.argv[1])
