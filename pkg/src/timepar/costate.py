"""Affine regression of co-states on states at a split layer.

A segment that cannot wait for the true co-state at its right boundary
predicts it as ``P ~ A x + B`` from a sliding window of observed
``(state, co-state)`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RankDeficientError

DEFAULT_CAPACITY = 2048
DEFAULT_RIDGE = 1e-4


@dataclass(frozen=True)
class InfoSet:
    """FIFO window of observed (state, co-state) rows at one split layer."""

    xs: np.ndarray
    ps: np.ndarray
    capacity: int = DEFAULT_CAPACITY
    split_layer: int | None = None

    @classmethod
    def empty(cls, dim: int, capacity: int = DEFAULT_CAPACITY, split_layer=None) -> "InfoSet":
        if capacity < 1:
            raise ContractError("capacity must be positive")
        return cls(np.empty((0, dim)), np.empty((0, dim)), capacity, split_layer)

    def __len__(self):
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


def observe(info: InfoSet, states: np.ndarray, costates: np.ndarray) -> InfoSet:
    """Append the rows of a batch, evicting the oldest rows beyond capacity."""
    states = np.atleast_2d(states)
    costates = np.atleast_2d(costates)
    if states.shape != costates.shape or states.shape[1] != info.dim:
        raise ContractError(f"observation shapes {states.shape}/{costates.shape} "
                            f"do not match dimension {info.dim}")
    xs = np.concatenate([info.xs, states])[-info.capacity:]
    ps = np.concatenate([info.ps, costates])[-info.capacity:]
    return InfoSet(xs, ps, info.capacity, info.split_layer)


@dataclass(frozen=True)
class AffinePredictor:
    A: np.ndarray
    B: np.ndarray
    fit_mse: float | None = None
    n_fit: int = 0

    @classmethod
    def zero(cls, dim: int) -> "AffinePredictor":
        return cls(np.zeros((dim, dim)), np.zeros(dim))


def fit(info: InfoSet, ridge: float = DEFAULT_RIDGE) -> AffinePredictor:
    """Ridge least squares for ``min sum ||A x_i + B - p_i||^2 + ridge (||A||^2 + ||B||^2)``.

    Solved through the normal equations of the design ``[x_i, 1]``.
    """
    n = len(info)
    if n < 1:
        raise ContractError("cannot fit an empty information set")
    if ridge < 0:
        raise ContractError("ridge must be nonnegative")
    Z = np.hstack([info.xs, np.ones((n, 1))])
    G = Z.T @ Z
    if ridge == 0:
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise RankDeficientError(f"{n} rows do not determine an affine map in dimension {info.dim}")
    else:
        G[np.diag_indices_from(G)] += ridge
    try:
        theta = np.linalg.solve(G, Z.T @ info.ps)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(str(exc)) from exc
    resid = Z @ theta - info.ps
    mse = float(np.mean(np.sum(resid * resid, axis=1)))
    return AffinePredictor(theta[:-1].T.copy(), theta[-1].copy(), mse, n)


def predict(pred: AffinePredictor, states: np.ndarray) -> np.ndarray:
    if states.ndim != 2 or states.shape[1] != pred.A.shape[1]:
        raise ContractError(f"states shape {states.shape} does not match predictor dimension {pred.A.shape[1]}")
    return states @ pred.A.T + pred.B


def epsilon_diagnostic(P_hat: np.ndarray, P_true: np.ndarray, eta: float) -> float | None:
    """Relative prediction error ``||P_hat - P|| / (eta ||P_hat||)``.

    Returns ``None`` when ``P_hat`` is identically zero (ratio undefined).
    """
    if not eta > 0:
        raise ContractError("eta must be positive")
    if P_hat.shape != P_true.shape:
        raise ContractError("P_hat and P_true must have the same shape")
    denom = np.linalg.norm(P_hat)
    if denom == 0:
        return None
    return float(np.linalg.norm(P_hat - P_true) / (eta * denom))
