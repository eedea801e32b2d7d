"""Backward solve of the adjoint equation is backpropagation.

Builds a small random Verlet network, runs the backward solve, and compares
each co-state with a finite-difference gradient of the terminal loss with
respect to the state at that layer.
"""
import numpy as np

from timepar.dynamics import ModelSpec, init_controls, terminal_loss
from timepar.trajectory import backward_solve, forward_solve

spec = ModelSpec(scheme="verlet", width=4, n_layers=6, horizon=2.0)
ctl = init_controls(spec, seed=1, smooth=False)
rng = np.random.default_rng(0)
X0, labels = rng.standard_normal((5, 4)), rng.integers(0, 2, 5)

traj = forward_solve(spec, ctl, X0, 0, spec.n_layers)
P_T = terminal_loss(ctl.head, traj.final, labels)[1]
costates = backward_solve(spec, ctl, traj, P_T, 0, spec.n_layers)


def loss_from(j, X):
    return terminal_loss(ctl.head, forward_solve(spec, ctl, X, j, spec.n_layers).final, labels)[0]


print("layer  max|P_j - finite difference|")
h = 1e-5
for j in range(spec.n_layers + 1):
    X = traj.at(j)
    fd = np.zeros_like(X)
    for idx in np.ndindex(*X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        fd[idx] = (loss_from(j, X + E) - loss_from(j, X - E)) / (2 * h)
    print(f"{j:5d}  {np.abs(costates.at(j) - fd).max():.2e}")
