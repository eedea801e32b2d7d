"""Forward and backward solves over layer ranges, and serial-in-time training.

One serial iteration is: forward solve from the opening map to the terminal
layer, terminal co-state ``P_T = dLoss/dX_T``, backward solve to layer 0, then
a gradient step on every control block.  With the co-state defined as the
state gradient this is exactly mini-batch SGD with backpropagation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import (Controls, ModelSpec, check_controls, head_logits, opening_forward,
                       opening_vjp, regularizer, step, step_vjp, terminal_loss)
from .errors import ContractError, NumericError


@dataclass
class StateTrajectory:
    """States ``X_j`` for ``j = j0 .. j1`` inclusive."""

    states: list
    j0: int
    j1: int
    batch_id: object = None

    def at(self, j: int) -> np.ndarray:
        if not self.j0 <= j <= self.j1:
            raise ContractError(f"layer {j} outside trajectory range [{self.j0}, {self.j1}]")
        return self.states[j - self.j0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class CostateTrajectory:
    """Co-states ``P_j = dLoss/dX_j`` for ``j = j0 .. j1`` inclusive."""

    costates: list
    j0: int
    j1: int
    batch_id: object = None

    def at(self, j: int) -> np.ndarray:
        if not self.j0 <= j <= self.j1:
            raise ContractError(f"layer {j} outside co-state range [{self.j0}, {self.j1}]")
        return self.costates[j - self.j0]


@dataclass(frozen=True)
class LearningRate:
    """Constant step size, or ``eta0 / (1 + k / decay)`` when ``decay`` is set.

    The decaying form has a divergent sum and a summable square.
    """

    eta0: float
    decay: float | None = None

    def __post_init__(self):
        if not self.eta0 >= 0:
            raise ContractError("learning rate must be nonnegative")
        if self.decay is not None and not self.decay > 0:
            raise ContractError("decay must be positive")

    def __call__(self, k: int) -> float:
        if self.decay is None:
            return self.eta0
        return self.eta0 / (1.0 + k / self.decay)


def _check_range(spec, j0, j1):
    if not 0 <= j0 <= j1 <= spec.n_layers:
        raise ContractError(f"layer range [{j0}, {j1}] invalid for {spec.n_layers} layers")


# -- kernels on relative block lists ----------------------------------------

def forward_blocks(spec: ModelSpec, blocks: Sequence[dict], X: np.ndarray) -> list:
    states = [X]
    for U in blocks:
        X = step(spec, X, U)
        states.append(X)
    return states


def backward_blocks(spec: ModelSpec, blocks: Sequence[dict], states: Sequence[np.ndarray],
                    P_end: np.ndarray):
    """Backward solve fused with per-layer gradients (dynamics term plus weight decay)."""
    n = len(blocks)
    costates = [None] * (n + 1)
    grads = [None] * n
    costates[n] = P = P_end
    for i in range(n - 1, -1, -1):
        P_prev, g = step_vjp(spec, states[i], blocks[i], P)
        _, r = regularizer(spec, blocks[i])
        grads[i] = {k: g[k] + r[k] for k in g}
        costates[i] = P = P_prev
    return costates, grads


def apply_update(blocks: Sequence[dict], grads: Sequence[dict], eta: float) -> None:
    """In-place ``U <- U - eta * g`` over matching blocks."""
    for U, g in zip(blocks, grads):
        for k in U:
            U[k] = U[k] - eta * g[k]


# -- public operations -------------------------------------------------------

def forward_solve(spec: ModelSpec, controls: Controls, X_start: np.ndarray, j0: int, j1: int,
                  batch_id=None) -> StateTrajectory:
    """Propagate ``X_start`` (the state at layer ``j0``) to layer ``j1``."""
    _check_range(spec, j0, j1)
    if X_start.ndim != 2 or X_start.shape[1] != spec.width:
        raise ContractError(f"X_start must be batch x {spec.width}, got {X_start.shape}")
    if not np.isfinite(X_start).all():
        raise NumericError("X_start contains non-finite values")
    states = forward_blocks(spec, controls.layers[j0:j1], X_start)
    if not np.isfinite(states[-1]).all():
        raise NumericError(f"forward solve produced non-finite states on layers [{j0}, {j1}]")
    return StateTrajectory(states, j0, j1, batch_id)


def backward_solve(spec: ModelSpec, controls: Controls, states: StateTrajectory,
                   P_end: np.ndarray, j0: int, j1: int) -> CostateTrajectory:
    """Propagate the co-state ``P_end`` at layer ``j1`` back to layer ``j0``."""
    _check_range(spec, j0, j1)
    if states.j0 > j0 or states.j1 < j1:
        raise ContractError(f"states cover [{states.j0}, {states.j1}], need [{j0}, {j1}]")
    if P_end.shape != states.at(j1).shape:
        raise ContractError("P_end must match the state shape")
    if not np.isfinite(P_end).all():
        raise NumericError("P_end contains non-finite values")
    P = P_end
    costates = [P]
    for j in range(j1 - 1, j0 - 1, -1):
        P = step_vjp(spec, states.at(j), controls.layers[j], P)[0]
        costates.append(P)
    costates.reverse()
    return CostateTrajectory(costates, j0, j1, states.batch_id)


def assemble_gradient(spec: ModelSpec, controls: Controls, states: StateTrajectory,
                      costates: CostateTrajectory, inputs: np.ndarray | None = None,
                      labels: np.ndarray | None = None) -> Controls:
    """Gradient of the objective with respect to every control block.

    Layers in the co-state range get ``<df/dU_j, P_{j+1}> + dR/dU_j``; layers
    outside it are zero.  The opening gradient is filled when the range starts
    at layer 0 and ``inputs`` is given; the head gradient when the range ends at
    the last layer and ``labels`` is given.
    """
    j0, j1 = costates.j0, costates.j1
    if states.batch_id != costates.batch_id:
        raise ContractError(f"batch mismatch: states {states.batch_id!r}, costates {costates.batch_id!r}")
    if states.j0 > j0 or states.j1 < j1:
        raise ContractError("states do not cover the co-state range")
    grad = controls.zeros_like()
    for j in range(j0, j1):
        g = step_vjp(spec, states.at(j), controls.layers[j], costates.at(j + 1))[1]
        _, r = regularizer(spec, controls.layers[j])
        grad.layers[j] = {k: g[k] + r[k] for k in g}
    if j0 == 0 and inputs is not None:
        grad.opening = opening_vjp(controls.opening, inputs, costates.at(0))[0]
    if j1 == spec.n_layers and labels is not None:
        grad.head = terminal_loss(controls.head, states.at(j1), labels)[2]
    return grad


def sgd_update(controls: Controls, gradient: Controls, eta: float) -> Controls:
    """Return ``controls - eta * gradient`` (all blocks)."""
    if not eta > 0:
        raise ContractError("learning rate must be positive")
    out = controls.copy()
    apply_update(out.layers, gradient.layers, eta)
    apply_update([out.opening, out.head], [gradient.opening, gradient.head], eta)
    return out


def objective(spec: ModelSpec, controls: Controls, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Mean terminal loss plus the summed layer regularizers."""
    states = forward_blocks(spec, controls.layers, opening_forward(controls.opening, inputs))
    loss = terminal_loss(controls.head, states[-1], labels)[0]
    return loss + sum(regularizer(spec, U)[0] for U in controls.layers)


def evaluate(spec: ModelSpec, controls: Controls, dataset) -> tuple[float, float]:
    """Mean loss and accuracy on a dataset; ties go to the lower class index."""
    X = forward_blocks(spec, controls.layers, opening_forward(controls.opening, dataset.inputs))[-1]
    loss = terminal_loss(controls.head, X, dataset.labels)[0]
    pred = np.argmax(head_logits(controls.head, X), axis=1)
    return loss, float(np.mean(pred == dataset.labels))


def serial_train(spec: ModelSpec, controls: Controls, dataset, stream, schedule,
                 n_iters: int, start: int = 0, eval_every: int = 0,
                 on_iteration: Callable | None = None):
    """Run ``n_iters`` iterations of serial-in-time SGD.

    ``stream[k]`` gives the sample indices of iteration ``k`` (offset by
    ``start``).  ``on_iteration(k, batch_id, states, costates)`` is called after
    each backward solve and before the update; ``states``/``costates`` are full
    lists over layers ``0 .. n_layers``.

    Returns ``(controls, metrics)`` where ``metrics`` holds one dict per
    iteration.
    """
    check_controls(spec, controls)
    ctl = controls.copy()
    metrics = []
    for it in range(n_iters):
        t0 = time.perf_counter()
        k = start + it
        idx = stream[k]
        inputs, labels = dataset.inputs[idx], dataset.labels[idx]
        X0 = opening_forward(ctl.opening, inputs)
        states = forward_blocks(spec, ctl.layers, X0)
        loss, P_T, dhead = terminal_loss(ctl.head, states[-1], labels)
        if not math.isfinite(loss):
            raise NumericError("non-finite loss", iteration=k)
        costates, grads = backward_blocks(spec, ctl.layers, states, P_T)
        dopen = opening_vjp(ctl.opening, inputs, costates[0])[0]
        if on_iteration is not None:
            on_iteration(k, k, states, costates)
        eta = schedule(k)
        apply_update(ctl.layers, grads, eta)
        apply_update([ctl.opening, ctl.head], [dopen, dhead], eta)
        rec = {"iteration": k, "loss": loss, "eta": eta, "seconds": time.perf_counter() - t0}
        if eval_every and (it + 1) % eval_every == 0:
            rec["train_loss"], rec["train_accuracy"] = evaluate(spec, ctl, dataset)
        metrics.append(rec)
    return ctl, metrics
