"""Two-segment training of a 32-layer Verlet network on the swiss roll.

A coarse 16-layer model is trained briefly, its controls are interpolated to
the fine grid, and its (state, co-state) pairs at the split seed the affine
co-state predictor.  Each round then runs both segments "concurrently": the
first segment uses the predicted co-state, the second the exact one.
"""
from timepar.data import BatchStream, gen_swissroll
from timepar.dynamics import ModelSpec, init_controls
from timepar.multilevel import CoarseConfig
from timepar.parallel import make_plan, parallel_train
from timepar.trajectory import LearningRate, evaluate, serial_train

data = gen_swissroll(250, seed=0)
spec = ModelSpec(scheme="verlet", width=4, n_layers=32, horizon=10.0, weight_decay=1e-4)
rounds = 800
schedule = LearningRate(0.2)

serial, _ = serial_train(spec, init_controls(spec, 0), data, BatchStream(len(data), 32, 0), schedule, rounds)
print(f"serial SGD          accuracy {evaluate(spec, serial, data)[1]:.3f}")

ctl, metrics = parallel_train(spec, make_plan(spec, 2, factor=2), data, schedule, rounds,
                              coarse=CoarseConfig(factor=2, iters=200, lr=0.2), eval_every=100)
print(f"coarse phase        {metrics['prediction_seconds']:.2f} s")
for rec in metrics["rounds"]:
    if "train_accuracy" in rec:
        eps = rec["epsilon"][0]
        eps_txt = "n/a" if eps is None else f"{eps:.2f}"
        print(f"round {rec['round'] + 1:4d}  accuracy {rec['train_accuracy']:.3f}  "
              f"fit_mse {rec['fit_mse'][0]:.2e}  epsilon {eps_txt}")
print(f"multilevel parallel accuracy {evaluate(spec, ctl, data)[1]:.3f}")
