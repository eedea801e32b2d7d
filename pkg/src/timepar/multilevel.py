"""Coarse models, prolongation to the fine grid, and the global prediction phase."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BatchStream
from .dynamics import Controls, ModelSpec, init_controls, opening_forward
from .errors import ContractError
from .trajectory import LearningRate, forward_blocks, serial_train

DEFAULT_FACTOR = 2
DEFAULT_ITERS = 20


@dataclass(frozen=True)
class CoarseConfig:
    factor: int = DEFAULT_FACTOR
    iters: int = DEFAULT_ITERS
    lr: float = 0.05

    def __post_init__(self):
        if self.factor < 1:
            raise ContractError("coarsening factor must be positive")
        if self.iters < 0:
            raise ContractError("prediction iterations must be nonnegative")
        if not self.lr > 0:
            raise ContractError("coarse learning rate must be positive")


def coarsen_spec(fine: ModelSpec, factor: int) -> ModelSpec:
    """Same horizon and widths with ``n_layers / factor`` layers, i.e. step ``factor * delta``."""
    if factor < 1 or fine.n_layers % factor:
        raise ContractError(f"factor {factor} does not divide {fine.n_layers} layers")
    return fine.with_layers(fine.n_layers // factor)


def prolong_controls(coarse: Controls, fine_spec: ModelSpec, factor: int) -> Controls:
    """Piecewise-linear interpolation in time of coarse layer blocks.

    Fine layer ``j`` lies a fraction ``(j mod factor) / factor`` of the way from
    coarse node ``j // factor`` to the next one (clamped at the last node).
    Opening and head are copied.
    """
    n_coarse = len(coarse.layers)
    if n_coarse * factor != fine_spec.n_layers:
        raise ContractError(f"{n_coarse} coarse layers x factor {factor} != {fine_spec.n_layers} fine layers")
    layers = []
    for j in range(fine_spec.n_layers):
        n, r = divmod(j, factor)
        lo = coarse.layers[n]
        hi = coarse.layers[min(n + 1, n_coarse - 1)]
        w = r / factor
        if r == 0:
            layers.append({k: v.copy() for k, v in lo.items()})
        else:
            layers.append({k: lo[k] + w * (hi[k] - lo[k]) for k in lo})
    out = Controls(layers, {k: v.copy() for k, v in coarse.opening.items()},
                   {k: v.copy() for k, v in coarse.head.items()})
    return out


@dataclass
class Prediction:
    """Output of the global prediction phase.

    ``seed_pairs[i]`` holds one ``(states, costates)`` batch pair per coarse
    iteration, observed at split ``splits[i]``.  ``boundary_states[i]`` is the
    coarse state at that split for batch ``boundary_batch_id``.
    """

    fine_controls: Controls
    coarse_controls: Controls
    coarse_spec: ModelSpec
    factor: int
    splits: tuple
    boundary_states: list
    boundary_batch_id: int
    seed_pairs: list
    metrics: list = field(default_factory=list)

    def boundary(self, inputs: np.ndarray) -> list:
        """Coarse-model states at every split for the given raw inputs."""
        states = forward_blocks(self.coarse_spec, self.coarse_controls.layers,
                                opening_forward(self.coarse_controls.opening, inputs))
        return [states[s // self.factor] for s in self.splits]


def global_predict(fine_spec: ModelSpec, cfg: CoarseConfig, dataset, splits, seed: int = 0,
                   batch_size: int = 32, controls: Controls | None = None,
                   boundary_batch_id: int = 0, init_scale: float = 1.0) -> Prediction:
    """Run ``cfg.iters`` serial iterations on the coarse model and prolong the result.

    ``controls`` are initial *coarse* controls; by default they are drawn from
    ``seed``.  The coarse iterations consume batches ``0 .. iters - 1`` of the
    stream seeded with ``seed``.
    """
    splits = tuple(int(s) for s in splits)
    for s in splits:
        if s % cfg.factor:
            raise ContractError(f"split {s} is not on a coarse node (factor {cfg.factor})")
    coarse_spec = coarsen_spec(fine_spec, cfg.factor)
    if controls is None:
        controls = init_controls(coarse_spec, seed, init_scale)
    stream = BatchStream(len(dataset), batch_size, seed)
    nodes = [s // cfg.factor for s in splits]
    pairs = [[] for _ in splits]

    def record(k, batch_id, states, costates):
        for i, n in enumerate(nodes):
            pairs[i].append((states[n], costates[n]))

    coarse, metrics = serial_train(coarse_spec, controls, dataset, stream, LearningRate(cfg.lr),
                                   cfg.iters, on_iteration=record)
    pred = Prediction(prolong_controls(coarse, fine_spec, cfg.factor), coarse, coarse_spec,
                      cfg.factor, splits, [], boundary_batch_id, pairs, metrics)
    pred.boundary_states = pred.boundary(dataset.inputs[stream[boundary_batch_id]])
    return pred
