"""Cutting the network into segments changes nothing when co-states are exact.

Serial SGD and the segmented trainer in lockstep mode (true co-states handed
across every split) produce the same parameters bit for bit.
"""
from timepar.data import BatchStream, gen_swissroll
from timepar.dynamics import ModelSpec, init_controls
from timepar.parallel import make_plan, parallel_train
from timepar.trajectory import LearningRate, serial_train

data = gen_swissroll(100, seed=0)
spec = ModelSpec(scheme="verlet", width=4, n_layers=32, horizon=10.0, weight_decay=1e-4)
start = init_controls(spec, seed=0)
rounds = 50

serial, _ = serial_train(spec, start, data, BatchStream(len(data), 32, 0), LearningRate(0.2), rounds)
print(f"serial          checksum {serial.checksum()[:16]}")
for K in (2, 4, 8):
    ctl, _ = parallel_train(spec, make_plan(spec, K), data, LearningRate(0.2), rounds,
                            controls=start, mode="lockstep")
    print(f"lockstep K={K}    checksum {ctl.checksum()[:16]}  identical={ctl.checksum() == serial.checksum()}")
