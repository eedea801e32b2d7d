"""Layer transition maps of a residual network viewed as a discretized ODE.

Each layer advances the state ``X`` (batch x width) by one step of size
``delta = horizon / n_layers``.  Two integrators are available:

* ``euler``:  ``X' = X + delta * tanh(X W + b)``
* ``verlet``: the state is split into halves ``(Y, Z)`` and updated as
  ``Y' = Y + delta * tanh(Z K^T + b)``, ``Z' = Z - delta * tanh(Y' Kt^T + bt)``.

Co-states follow the backpropagation sign convention: ``P_j`` is the gradient
of the terminal loss with respect to ``X_j``, so the backward recursion is a
plain vector-Jacobian product.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError

SCHEMES = ("euler", "verlet")

BLOCK_KEYS = {"euler": ("W", "b"), "verlet": ("K", "Kt", "b", "bt")}
AFFINE_KEYS = ("W", "b")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and discretization of a residual network."""

    scheme: str = "euler"
    width: int = 4
    input_dim: int = 2
    n_classes: int = 2
    horizon: float = 1.0
    n_layers: int = 8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.width < 2:
            raise ContractError("width must be at least 2")
        if self.scheme == "verlet" and self.width % 2:
            raise ContractError("verlet scheme needs an even width")
        if self.n_layers < 1:
            raise ContractError("n_layers must be at least 1")
        if self.input_dim < 1 or self.n_classes < 1:
            raise ContractError("input_dim and n_classes must be positive")
        if not self.horizon > 0:
            raise ContractError("horizon must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")

    @property
    def step(self) -> float:
        return self.horizon / self.n_layers

    @property
    def half(self) -> int:
        return self.width // 2

    def with_layers(self, n_layers: int) -> "ModelSpec":
        return replace(self, n_layers=n_layers)

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        d, h = self.width, self.half
        if self.scheme == "euler":
            return {"W": (d, d), "b": (d,)}
        return {"K": (h, h), "Kt": (h, h), "b": (h,), "bt": (h,)}


Block = dict  # str -> np.ndarray


def _copy_block(block: Block) -> Block:
    return {k: v.copy() for k, v in block.items()}


@dataclass
class Controls:
    """Trainable parameters: one block per layer plus opening and head maps.

    ``opening`` maps raw inputs to the dynamics width (``W``: input_dim x width),
    ``head`` maps the terminal state to class logits (``W``: width x n_classes).
    The same container holds gradients.
    """

    layers: list = field(default_factory=list)
    opening: Block = field(default_factory=dict)
    head: Block = field(default_factory=dict)

    def copy(self) -> "Controls":
        return Controls([_copy_block(b) for b in self.layers],
                        _copy_block(self.opening), _copy_block(self.head))

    def zeros_like(self) -> "Controls":
        z = lambda blk: {k: np.zeros_like(v) for k, v in blk.items()}  # noqa: E731
        return Controls([z(b) for b in self.layers], z(self.opening), z(self.head))

    def arrays(self):
        """Yield every parameter array in a fixed canonical order."""
        for blk in self.layers:
            yield from blk.values()
        yield from self.opening.values()
        yield from self.head.values()

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def load_vector(self, vec: np.ndarray) -> "Controls":
        """Return a copy whose entries are taken from ``vec`` (canonical order)."""
        out = self.copy()
        size = sum(a.size for a in out.arrays())
        if vec.shape != (size,):
            raise ContractError(f"vector has shape {vec.shape}, controls have {size} entries")
        pos = 0
        for a in out.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def check_controls(spec: ModelSpec, controls: Controls) -> None:
    if len(controls.layers) != spec.n_layers:
        raise ContractError(f"controls have {len(controls.layers)} layers, spec has {spec.n_layers}")
    shapes = spec.block_shapes()
    for j, blk in enumerate(controls.layers):
        _check_block(shapes, blk, j)
    _check_block({"W": (spec.input_dim, spec.width), "b": (spec.width,)}, controls.opening, "opening")
    _check_block({"W": (spec.width, spec.n_classes), "b": (spec.n_classes,)}, controls.head, "head")
    if not controls.is_finite():
        raise NumericError("controls contain non-finite entries")


def _check_block(shapes, blk, where):
    if set(blk) != set(shapes):
        raise ContractError(f"block {where} has keys {sorted(blk)}, expected {sorted(shapes)}")
    for k, shape in shapes.items():
        if blk[k].shape != shape:
            raise ContractError(f"block {where}[{k}] has shape {blk[k].shape}, expected {shape}")


def init_controls(spec: ModelSpec, seed=0, scale: float = 1.0, smooth: bool = True) -> Controls:
    """Random Gaussian initialization scaled by fan-in; biases start at zero.

    With ``smooth`` every layer starts from the same random block, so the
    controls are constant in time and stay smooth under training.  Coarse and
    fine discretizations of such controls describe nearly the same network,
    which prolongation relies on.
    """
    rng = np.random.default_rng(seed)
    d, h = spec.width, spec.half

    def draw():
        if spec.scheme == "euler":
            return {"W": scale * rng.standard_normal((d, d)) / np.sqrt(d), "b": np.zeros(d)}
        return {"K": scale * rng.standard_normal((h, h)) / np.sqrt(h),
                "Kt": scale * rng.standard_normal((h, h)) / np.sqrt(h),
                "b": np.zeros(h), "bt": np.zeros(h)}

    if smooth:
        block = draw()
        layers = [{k: v.copy() for k, v in block.items()} for _ in range(spec.n_layers)]
    else:
        layers = [draw() for _ in range(spec.n_layers)]
    opening = {"W": rng.standard_normal((spec.input_dim, d)) / np.sqrt(spec.input_dim),
               "b": np.zeros(d)}
    head = {"W": rng.standard_normal((d, spec.n_classes)) / np.sqrt(d),
            "b": np.zeros(spec.n_classes)}
    return Controls(layers, opening, head)


def zero_controls(spec: ModelSpec) -> Controls:
    shapes = spec.block_shapes()
    layers = [{k: np.zeros(s) for k, s in shapes.items()} for _ in range(spec.n_layers)]
    return Controls(layers,
                    {"W": np.zeros((spec.input_dim, spec.width)), "b": np.zeros(spec.width)},
                    {"W": np.zeros((spec.width, spec.n_classes)), "b": np.zeros(spec.n_classes)})


def _check_state(spec, X, name="X"):
    if X.ndim != 2 or X.shape[1] != spec.width:
        raise ContractError(f"{name} must be batch x {spec.width}, got {X.shape}")
    if not np.isfinite(X).all():
        raise NumericError(f"{name} contains non-finite values")


def _check_layer(spec, U, j):
    if not 0 <= j < spec.n_layers:
        raise ContractError(f"layer index {j} outside [0, {spec.n_layers})")
    _check_block(spec.block_shapes(), U, j)


# -- unchecked kernels (hot path) -------------------------------------------

def step(spec: ModelSpec, X: np.ndarray, U: Block) -> np.ndarray:
    delta = spec.step
    if spec.scheme == "euler":
        return X + delta * np.tanh(X @ U["W"] + U["b"])
    h = spec.half
    Y, Z = X[:, :h], X[:, h:]
    Y1 = Y + delta * np.tanh(Z @ U["K"].T + U["b"])
    Z1 = Z - delta * np.tanh(Y1 @ U["Kt"].T + U["bt"])
    return np.concatenate([Y1, Z1], axis=1)


def step_vjp(spec: ModelSpec, X: np.ndarray, U: Block, P_next: np.ndarray):
    """Return ``(J_X^T P_next, d<f(X,U), P_next>/dU)`` for the layer at input ``X``."""
    delta = spec.step
    if spec.scheme == "euler":
        g = delta * (1.0 - np.tanh(X @ U["W"] + U["b"]) ** 2) * P_next
        return P_next + g @ U["W"].T, {"W": X.T @ g, "b": g.sum(axis=0)}
    h = spec.half
    Y, Z = X[:, :h], X[:, h:]
    PY, PZ = P_next[:, :h], P_next[:, h:]
    t1 = np.tanh(Z @ U["K"].T + U["b"])
    Y1 = Y + delta * t1
    t2 = np.tanh(Y1 @ U["Kt"].T + U["bt"])
    g2 = -delta * (1.0 - t2 ** 2) * PZ
    PY = PY + g2 @ U["Kt"]
    g1 = delta * (1.0 - t1 ** 2) * PY
    PZ = PZ + g1 @ U["K"]
    grad = {"K": g1.T @ Z, "Kt": g2.T @ Y1, "b": g1.sum(axis=0), "bt": g2.sum(axis=0)}
    return np.concatenate([PY, PZ], axis=1), grad


# -- public, checked operations ---------------------------------------------

def layer_forward(spec: ModelSpec, X: np.ndarray, U: Block, j: int) -> np.ndarray:
    """Advance states ``X`` through layer ``j`` with parameters ``U``."""
    _check_state(spec, X)
    _check_layer(spec, U, j)
    return step(spec, X, U)


def vjp_state(spec: ModelSpec, X: np.ndarray, U: Block, P_next: np.ndarray, j: int) -> np.ndarray:
    """Pull the co-state at layer ``j + 1`` back to layer ``j``.

    ``X`` is the *input* state of layer ``j``.
    """
    _check_state(spec, X)
    _check_state(spec, P_next, "P_next")
    if P_next.shape != X.shape:
        raise ContractError("P_next and X must have the same shape")
    _check_layer(spec, U, j)
    return step_vjp(spec, X, U, P_next)[0]


def vjp_control(spec: ModelSpec, X: np.ndarray, U: Block, P_next: np.ndarray, j: int) -> Block:
    """Gradient of ``<f_j(X, U), P_next>`` with respect to ``U``, summed over the batch."""
    _check_state(spec, X)
    _check_state(spec, P_next, "P_next")
    if P_next.shape != X.shape:
        raise ContractError("P_next and X must have the same shape")
    _check_layer(spec, U, j)
    return step_vjp(spec, X, U, P_next)[1]


def regularizer(spec: ModelSpec, U: Block):
    """Weight decay on one layer block: ``delta * lam / 2 * ||U||^2`` and its gradient."""
    c = spec.step * spec.weight_decay
    value = 0.5 * c * sum(float(np.sum(v * v)) for v in U.values())
    return value, {k: c * v for k, v in U.items()}


def head_logits(head: Block, X_T: np.ndarray) -> np.ndarray:
    return X_T @ head["W"] + head["b"]


def terminal_loss(head: Block, X_T: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy of the head logits.

    Returns ``(value, dX, dHead)``; gradients are exact for the mean loss.
    """
    labels = np.asarray(labels)
    n_classes = head["W"].shape[1]
    if X_T.ndim != 2 or X_T.shape[1] != head["W"].shape[0]:
        raise ContractError(f"terminal state shape {X_T.shape} does not match head {head['W'].shape}")
    if labels.shape != (X_T.shape[0],):
        raise ContractError("need one label per terminal state row")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    logits = head_logits(head, X_T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.size)
    n = labels.size
    value = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    dlogits = probs / n
    dX = dlogits @ head["W"].T
    dhead = {"W": X_T.T @ dlogits, "b": dlogits.sum(axis=0)}
    return value, dX, dhead


def opening_forward(opening: Block, inputs: np.ndarray) -> np.ndarray:
    if inputs.ndim != 2 or inputs.shape[1] != opening["W"].shape[0]:
        raise ContractError(f"inputs shape {inputs.shape} does not match opening {opening['W'].shape}")
    return inputs @ opening["W"] + opening["b"]


def opening_vjp(opening: Block, inputs: np.ndarray, P0: np.ndarray):
    """Return ``(dOpening, dInputs)`` for the co-state ``P0`` at layer 0."""
    if P0.shape != (inputs.shape[0], opening["W"].shape[1]):
        raise ContractError(f"P0 shape {P0.shape} does not match opening output")
    return {"W": inputs.T @ P0, "b": P0.sum(axis=0)}, P0 @ opening["W"].T
