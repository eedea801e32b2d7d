"""Regression error of the co-state predictor, with and without a coarse start.

Runs 100 rounds of two-segment training of a 512-layer Verlet network twice:
once from random controls with an empty information set, once seeded by a
coarse 256-layer solve.  Writes the per-round fit_mse series to CSV for
plotting.
"""
import csv
import sys

import numpy as np

from timepar.data import gen_swissroll
from timepar.dynamics import ModelSpec, init_controls
from timepar.multilevel import CoarseConfig
from timepar.parallel import make_plan, parallel_train
from timepar.trajectory import LearningRate

out = sys.argv[1] if len(sys.argv) > 1 else "fit_mse.csv"
data = gen_swissroll(250, seed=0)
spec = ModelSpec(scheme="verlet", width=4, n_layers=512, horizon=10.0, weight_decay=1e-4)
plan = make_plan(spec, 2)
rounds = 100

_, single = parallel_train(spec, plan, data, LearningRate(0.2, decay=20), rounds, controls=init_controls(spec, 0))
_, multi = parallel_train(spec, plan, data, LearningRate(0.2, decay=20), rounds, coarse=CoarseConfig(2, 600, 0.5))
s = [r["fit_mse"][0] for r in single["rounds"]]
m = [r["fit_mse"][0] for r in multi["rounds"]]

with open(out, "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["round", "single_level", "multilevel"])
    for k, (a, b) in enumerate(zip(s, m), 1):
        w.writerow([k, "" if a is None else a, b])

first = [x for x in s[:20] if x is not None]
print(f"mean fit_mse, rounds 1-20: single {np.mean(first):.2e}, multilevel {np.mean(m[:20]):.2e}")
print(f"multilevel round 100 / round 1: {m[99] / m[0]:.3f}")
print(f"series written to {out}")
