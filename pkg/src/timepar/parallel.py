"""Layer-parallel training with barrier-synchronized segment workers.

The layer range is cut at split layers ``s_1 < ... < s_{K-1}`` into ``K``
segments, one worker each.  In every round all workers run concurrently:

* segments ``0 .. K-2`` predict the co-state at their right split from an
  affine fit to past (state, co-state) pairs, run a backward solve over the
  trajectory stored last round, update their controls, then forward the next
  batch (the first segment from the raw inputs, the others from the boundary
  state received last round) and send the new state at the right split;
* the last segment forwards the boundary state received last round, starts
  the backward solve from the exact terminal co-state and updates.

Every segment except the first sends the co-state at its left split.  A
barrier ends the round; messages are routed only after all workers finished,
so the result does not depend on scheduling.  Boundary states travel with the
id of the batch they belong to and a returning co-state is joined with the
state that was sent for the same batch.

``lockstep`` mode instead runs the segments one after another with exact
co-states; it reproduces serial training bit for bit and serves as an oracle.
"""
from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass

import numpy as np

from .costate import (DEFAULT_CAPACITY, DEFAULT_RIDGE, AffinePredictor, InfoSet,
                      epsilon_diagnostic, fit, observe, predict)
from .data import BatchStream
from .dynamics import Controls, ModelSpec, check_controls, opening_forward, opening_vjp, terminal_loss
from .errors import ContractError, NumericError, PairingError, ProtocolError
from .multilevel import CoarseConfig, Prediction, global_predict
from .trajectory import apply_update, backward_blocks, evaluate, forward_blocks, objective

STATE_RIGHT = "state_right"
COSTATE_LEFT = "costate_left"
THREADS_ENV = "TIMEPAR_THREADS"


@dataclass(frozen=True)
class SegmentPlan:
    """Split layers of a ``K``-segment decomposition of ``n_layers`` layers.

    Segment ``i`` owns layers ``[s_i, s_{i+1})`` with ``s_0 = 0`` and
    ``s_K = n_layers``; the first segment also owns the opening map and the
    last one the classifier head.
    """

    n_layers: int
    splits: tuple

    @property
    def K(self) -> int:
        return len(self.splits) + 1

    @property
    def bounds(self) -> list:
        edges = (0,) + self.splits + (self.n_layers,)
        return list(zip(edges[:-1], edges[1:]))


def make_plan(spec: ModelSpec, K: int, splits=None, factor: int = 1) -> SegmentPlan:
    """Equally spaced splits unless ``splits`` is given; with ``factor > 1`` every
    split must also fall on a coarse node."""
    if K < 2:
        raise ContractError("a segment plan needs K >= 2; use serial training for one segment")
    T = spec.n_layers
    if splits is None:
        if T % K:
            raise ContractError(f"{T} layers cannot be split into {K} equal segments")
        splits = [T // K * i for i in range(1, K)]
    splits = tuple(int(s) for s in splits)
    if len(splits) != K - 1:
        raise ContractError(f"K={K} needs {K - 1} splits, got {len(splits)}")
    if any(b <= a for a, b in zip(splits, splits[1:])):
        raise ContractError(f"splits must be strictly increasing: {splits}")
    if splits[0] <= 0 or splits[-1] >= T:
        raise ContractError(f"splits must lie strictly inside (0, {T}): {splits}")
    if factor > 1 and any(s % factor for s in splits):
        raise ContractError(f"splits {splits} must be multiples of the coarsening factor {factor}")
    return SegmentPlan(T, splits)


@dataclass(frozen=True)
class Message:
    """Boundary value sent across split ``split`` (between segments ``split`` and ``split + 1``)."""

    round: int
    split: int
    direction: str
    batch_id: int
    payload: np.ndarray


class SegmentWorker:
    """State owned by one segment: its controls, stored trajectory and predictor."""

    def __init__(self, spec: ModelSpec, plan: SegmentPlan, index: int, controls: Controls,
                 dataset, stream: BatchStream, schedule, ridge: float = DEFAULT_RIDGE,
                 capacity: int = DEFAULT_CAPACITY):
        self.spec = spec
        self.index = index
        self.K = plan.K
        self.lo, self.hi = plan.bounds[index]
        self.first = index == 0
        self.last = index == plan.K - 1
        self.blocks = [{k: v.copy() for k, v in blk.items()} for blk in controls.layers[self.lo:self.hi]]
        self.opening = {k: v.copy() for k, v in controls.opening.items()} if self.first else None
        self.head = {k: v.copy() for k, v in controls.head.items()} if self.last else None
        self.dataset = dataset
        self.stream = stream
        self.schedule = schedule
        self.ridge = ridge
        self.info = None if self.last else InfoSet.empty(spec.width, capacity, self.hi)
        self.stored = None      # (batch_id, states) from the last forward solve
        self.inbox = None       # (batch_id, state at the left split)
        self.sent = {}          # batch_id -> state handed to the right neighbour
        self.predicted = {}     # batch_id -> (predicted co-state, eta)
        self.next_batch = None  # first segment only
        self.epsilon = None
        self.predictor = None

    # -- message handling --------------------------------------------------

    def receive(self, messages) -> None:
        self.epsilon = None
        for m in messages:
            if m.direction == STATE_RIGHT:
                if m.split != self.index - 1:
                    raise ProtocolError(f"segment {self.index} got a state for split {m.split}")
                self.inbox = (m.batch_id, m.payload)
            elif m.direction == COSTATE_LEFT:
                if m.split != self.index:
                    raise ProtocolError(f"segment {self.index} got a co-state for split {m.split}")
                X = self.sent.pop(m.batch_id, None)
                if X is None:
                    raise PairingError(f"segment {self.index}: co-state for batch {m.batch_id} "
                                       f"(round {m.round}) has no matching boundary state")
                if X.shape != m.payload.shape:
                    raise PairingError(f"segment {self.index}: batch {m.batch_id} state/co-state shapes differ")
                self.info = observe(self.info, X, m.payload)
                if m.batch_id in self.predicted:
                    P_hat, eta = self.predicted.pop(m.batch_id)
                    if eta > 0:
                        self.epsilon = epsilon_diagnostic(P_hat, m.payload, eta)
                for stale in [b for b in self.predicted if b < m.batch_id]:
                    del self.predicted[stale]
            else:
                raise ProtocolError(f"unknown message direction {m.direction!r}")

    def _take_inbox(self, k):
        if self.inbox is None:
            raise ProtocolError(f"round {k}: segment {self.index} has no boundary state "
                                f"at split {self.index - 1}")
        item, self.inbox = self.inbox, None
        return item

    def _batch(self, batch_id):
        idx = self.stream[batch_id]
        return self.dataset.inputs[idx], self.dataset.labels[idx]

    # -- one round ----------------------------------------------------------

    def run(self, k: int, inbound=()) -> tuple[list, dict]:
        """Absorb last round's messages, then do this round's work."""
        t0 = time.perf_counter()
        self.receive(inbound)
        eta = self.schedule(k)
        out = []
        rec = {"segment": self.index}
        if self.last:
            bid, X = self._take_inbox(k)
            states = forward_blocks(self.spec, self.blocks, X)
            loss, P_T, dhead = terminal_loss(self.head, states[-1], self._batch(bid)[1])
            if not math.isfinite(loss):
                raise NumericError(f"segment {self.index}: non-finite loss", iteration=k)
            costates, grads = backward_blocks(self.spec, self.blocks, states, P_T)
            apply_update(self.blocks, grads, eta)
            apply_update([self.head], [dhead], eta)
            rec.update(loss=loss, batch_id=int(bid))
        else:
            self.predictor = fit(self.info, self.ridge) if len(self.info) else AffinePredictor.zero(self.spec.width)
            bid, states = self.stored
            P_hat = predict(self.predictor, states[-1])
            self.predicted[bid] = (P_hat, eta)
            costates, grads = backward_blocks(self.spec, self.blocks, states, P_hat)
            if self.first:
                dopen = opening_vjp(self.opening, self._batch(bid)[0], costates[0])[0]
            apply_update(self.blocks, grads, eta)
            if self.first:
                apply_update([self.opening], [dopen], eta)
                nb = self.next_batch
                self.next_batch += 1
                X = opening_forward(self.opening, self._batch(nb)[0])
            else:
                nb, X = self._take_inbox(k)
            states = forward_blocks(self.spec, self.blocks, X)
            if not np.isfinite(states[-1]).all():
                raise NumericError(f"segment {self.index}: non-finite state at split {self.index}", iteration=k)
            self.stored = (nb, states)
            self.sent[nb] = states[-1]
            out.append(Message(k, self.index, STATE_RIGHT, nb, states[-1]))
            rec.update(fit_mse=self.predictor.fit_mse, n_fit=self.predictor.n_fit,
                       epsilon=self.epsilon, batch_id=int(bid))
        if not self.first:
            out.append(Message(k, self.index - 1, COSTATE_LEFT, bid, costates[0]))
        rec["seconds"] = time.perf_counter() - t0
        return out, rec

    # -- lockstep oracle ------------------------------------------------------

    def lockstep_forward(self, X, batch_id):
        if self.first:
            X = opening_forward(self.opening, self._batch(batch_id)[0])
        self.stored = (batch_id, forward_blocks(self.spec, self.blocks, X))
        return self.stored[1][-1]

    def lockstep_backward(self, P_end, eta):
        bid, states = self.stored
        rec = {"segment": self.index}
        if self.last:
            loss, P_end, dhead = terminal_loss(self.head, states[-1], self._batch(bid)[1])
            rec["loss"] = loss
        costates, grads = backward_blocks(self.spec, self.blocks, states, P_end)
        if self.first:
            dopen = opening_vjp(self.opening, self._batch(bid)[0], costates[0])[0]
        apply_update(self.blocks, grads, eta)
        if self.first:
            apply_update([self.opening], [dopen], eta)
        if self.last:
            apply_update([self.head], [dhead], eta)
        return costates[0], rec

    def snapshot(self):
        copy = lambda blk: None if blk is None else {k: v.copy() for k, v in blk.items()}  # noqa: E731
        return self.index, [copy(b) for b in self.blocks], copy(self.opening), copy(self.head)


def route(messages, K: int, k: int) -> list:
    """Check a round's messages and sort them into per-segment inboxes."""
    seen = {(m.direction, m.split) for m in messages}
    for s in range(K - 1):
        for direction in (STATE_RIGHT, COSTATE_LEFT):
            if (direction, s) not in seen:
                raise ProtocolError(f"round {k}: missing {direction} message at split {s}")
    if len(messages) != 2 * (K - 1):
        raise ProtocolError(f"round {k}: expected {2 * (K - 1)} messages, got {len(messages)}")
    inbound = [[] for _ in range(K)]
    for m in sorted(messages, key=lambda m: (m.split, m.direction)):
        inbound[m.split + 1 if m.direction == STATE_RIGHT else m.split].append(m)
    return inbound


# -- executors ---------------------------------------------------------------

class SequentialExecutor:
    """Runs every worker in the calling process, one after another."""

    def __init__(self, workers):
        self.workers = workers

    def run_round(self, k, inbound):
        return [w.run(k, inbound[w.index]) for w in self.workers]

    def snapshot(self):
        return [w.snapshot() for w in self.workers]

    def close(self):
        pass


def _serve(conn, workers):
    while True:
        cmd, args = conn.recv()
        try:
            if cmd == "round":
                k, inbound = args
                conn.send(("ok", [w.run(k, inbound[w.index]) for w in workers]))
            elif cmd == "snapshot":
                conn.send(("ok", [w.snapshot() for w in workers]))
            elif cmd == "stop":
                conn.send(("ok", None))
                return
        except Exception as exc:  # forwarded to the coordinator
            conn.send(("error", exc))


class ProcessExecutor:
    """One OS process per group of segments; the coordinator acts as the barrier."""

    def __init__(self, workers, n_procs: int):
        n_procs = max(1, min(n_procs, len(workers)))
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        groups = [workers[i::n_procs] for i in range(n_procs)]
        self.conns, self.procs = [], []
        for group in groups:
            parent, child = ctx.Pipe()
            p = ctx.Process(target=_serve, args=(child, group), daemon=True)
            p.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(p)

    def _gather(self):
        results = []
        for conn in self.conns:
            status, payload = conn.recv()
            if status == "error":
                self.close()
                raise payload
            results.extend(payload)
        return results

    def run_round(self, k, inbound):
        for conn in self.conns:
            conn.send(("round", (k, inbound)))
        return sorted(self._gather(), key=lambda r: r[1]["segment"])

    def snapshot(self):
        for conn in self.conns:
            conn.send(("snapshot", None))
        return sorted(self._gather(), key=lambda s: s[0])

    def close(self):
        for conn, p in zip(self.conns, self.procs):
            if p.is_alive():
                try:
                    conn.send(("stop", None))
                    conn.recv()
                except (BrokenPipeError, EOFError, OSError):
                    pass
            p.join(timeout=5)
        self.conns, self.procs = [], []


def worker_cap() -> int:
    """Worker processes allowed by ``TIMEPAR_THREADS`` (default: CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


# -- trainer -----------------------------------------------------------------

class ParallelTrainer:
    """Owns the segment workers of one run and drives synchronized rounds.

    ``prediction`` (from :func:`global_predict`) seeds boundary states, the
    co-state information sets and the controls; without it the boundary
    states come from one fine forward pass with ``controls`` and the first
    interior co-state predictions are zero.
    """

    def __init__(self, spec: ModelSpec, plan: SegmentPlan, dataset, schedule,
                 controls: Controls | None = None, prediction: Prediction | None = None,
                 batch_size: int = 32, seed: int = 0, ridge: float = DEFAULT_RIDGE,
                 capacity: int = DEFAULT_CAPACITY, executor: str = "sequential",
                 n_procs: int | None = None):
        if prediction is not None:
            controls = prediction.fine_controls
        if controls is None:
            raise ContractError("need initial controls or a prediction")
        check_controls(spec, controls)
        self.spec, self.plan, self.dataset, self.schedule = spec, plan, dataset, schedule
        self.stream = BatchStream(len(dataset), batch_size, seed)
        self.workers = [SegmentWorker(spec, plan, i, controls, dataset, self.stream, schedule, ridge, capacity)
                        for i in range(plan.K)]
        self._prime(controls, prediction)
        self.inbound = [[] for _ in range(plan.K)]
        self.lockstep_batch = 0
        if executor == "sequential":
            self.executor = SequentialExecutor(self.workers)
        elif executor == "process":
            self.executor = ProcessExecutor(self.workers, n_procs or worker_cap())
        else:
            raise ContractError(f"unknown executor {executor!r}")
        self.executor_kind = executor

    def _prime(self, controls, prediction):
        K = self.plan.K
        b0 = K - 2
        cache = {}

        def boundary(b):
            if b not in cache:
                inputs = self.dataset.inputs[self.stream[b]]
                if prediction is not None:
                    cache[b] = prediction.boundary(inputs)
                else:
                    states = forward_blocks(self.spec, controls.layers, opening_forward(controls.opening, inputs))
                    cache[b] = [states[s] for s in self.plan.splits]
            return cache[b]

        for j, w in enumerate(self.workers):
            if j < K - 1:
                b = b0 - j
                if j == 0:
                    X = opening_forward(w.opening, self.dataset.inputs[self.stream[b]])
                else:
                    X = boundary(b)[j - 1]
                w.stored = (b, forward_blocks(self.spec, w.blocks, X))
                w.sent[b] = boundary(b)[j]
                if j + 1 < K - 1:
                    w.sent[b - 1] = boundary(b - 1)[j]
                if prediction is not None:
                    for X_s, P_s in prediction.seed_pairs[j]:
                        w.info = observe(w.info, X_s, P_s)
            if j >= 1:
                b = b0 + 1 - j
                w.inbox = (b, boundary(b)[j - 1])
        self.workers[0].next_batch = b0 + 1

    def run_round(self, k: int) -> dict:
        """One barrier-synchronized round of all segments."""
        t0 = time.perf_counter()
        results = self.executor.run_round(k, self.inbound)
        messages = [m for msgs, _ in results for m in msgs]
        self.inbound = route(messages, self.plan.K, k)
        recs = [r for _, r in results]
        return {
            "round": k,
            "eta": self.schedule(k),
            "loss": recs[-1]["loss"],
            "fit_mse": [r["fit_mse"] for r in recs[:-1]],
            "epsilon": [r["epsilon"] for r in recs[:-1]],
            "segment_seconds": [r["seconds"] for r in recs],
            "round_seconds": time.perf_counter() - t0,
            "messages": {STATE_RIGHT: sum(m.direction == STATE_RIGHT for m in messages),
                         COSTATE_LEFT: sum(m.direction == COSTATE_LEFT for m in messages)},
        }

    def lockstep_round(self, k: int) -> dict:
        """Exact sequential round: full forward, then backward with true co-states."""
        if self.executor_kind != "sequential":
            raise ContractError("lockstep rounds need the sequential executor")
        t0 = time.perf_counter()
        bid = self.lockstep_batch
        self.lockstep_batch += 1
        X = None
        for w in self.workers:
            X = w.lockstep_forward(X, bid)
        eta = self.schedule(k)
        P = None
        recs = []
        seconds = []
        for w in reversed(self.workers):
            t = time.perf_counter()
            P, rec = w.lockstep_backward(P, eta)
            recs.append(rec)
            seconds.append(time.perf_counter() - t)
        return {"round": k, "eta": eta, "loss": recs[0]["loss"], "fit_mse": [], "epsilon": [],
                "segment_seconds": seconds[::-1], "round_seconds": time.perf_counter() - t0}

    def controls(self) -> Controls:
        layers, opening, head = [], None, None
        for _, blocks, op, hd in self.executor.snapshot():
            layers.extend(blocks)
            opening = op if op is not None else opening
            head = hd if hd is not None else head
        return Controls(layers, opening, head)

    def close(self):
        self.executor.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parallel_train(spec: ModelSpec, plan: SegmentPlan, dataset, schedule, n_rounds: int,
                   seed: int = 0, batch_size: int = 32, controls: Controls | None = None,
                   coarse: CoarseConfig | None = None, mode: str = "parallel",
                   ridge: float = DEFAULT_RIDGE, capacity: int = DEFAULT_CAPACITY,
                   executor: str = "sequential", n_procs: int | None = None,
                   eval_every: int = 0, eval_data=None, track_objective: bool = False,
                   init_scale: float = 1.0, on_round=None):
    """Train with the segmented algorithm; returns ``(controls, metrics)``.

    With ``coarse`` set, a global prediction phase on the coarsened model runs
    first (its wall-clock is included in ``metrics["total_seconds"]``) and
    ``controls``, if given, are initial *coarse* controls.  ``mode`` is
    ``"parallel"`` or ``"lockstep"``.  ``on_round(record)`` sees each round's
    metrics record as soon as it is complete.
    """
    if mode not in ("parallel", "lockstep"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "lockstep":
        executor = "sequential"
    t_start = time.perf_counter()
    prediction = None
    if coarse is not None:
        prediction = global_predict(spec, coarse, dataset, plan.splits, seed, batch_size,
                                    controls=controls, init_scale=init_scale)
    elif controls is None:
        raise ContractError("single-level training needs initial controls")
    t_pred = time.perf_counter() - t_start
    rounds = []
    with ParallelTrainer(spec, plan, dataset, schedule, controls=controls, prediction=prediction,
                         batch_size=batch_size, seed=seed, ridge=ridge, capacity=capacity,
                         executor=executor, n_procs=n_procs) as trainer:
        for k in range(n_rounds):
            try:
                rec = trainer.lockstep_round(k) if mode == "lockstep" else trainer.run_round(k)
            except NumericError:
                raise
            except FloatingPointError as exc:
                raise NumericError(str(exc), iteration=k) from exc
            checkpoint = eval_every and (k + 1) % eval_every == 0
            if track_objective or checkpoint:
                current = trainer.controls()
                if track_objective:
                    rec["objective"] = objective(spec, current, dataset.inputs, dataset.labels)
                if checkpoint:
                    rec["train_loss"], rec["train_accuracy"] = evaluate(spec, current, dataset)
                    if eval_data is not None:
                        rec["test_loss"], rec["test_accuracy"] = evaluate(spec, current, eval_data)
            rounds.append(rec)
            if on_round is not None:
                on_round(rec)
        final = trainer.controls()
    metrics = {"rounds": rounds, "prediction_seconds": t_pred,
               "total_seconds": time.perf_counter() - t_start,
               "prediction_metrics": prediction.metrics if prediction else []}
    return final, metrics
