import numpy as np
import pytest

from timepar.data import BatchStream, Dataset, gen_ellipse, gen_swissroll
from timepar.dynamics import (Controls, ModelSpec, init_controls, layer_forward, opening_forward,
                              terminal_loss, zero_controls)
from timepar.errors import ContractError, NumericError
from timepar.trajectory import (CostateTrajectory, LearningRate, assemble_gradient, backward_solve,
                                evaluate, forward_solve, objective, serial_train, sgd_update)

import oracle
from conftest import central_diff, random_controls, rel_err

SCHEMES = ["euler", "verlet"]


def tiny_data(n=16, seed=0):
    return gen_swissroll(n // 2, seed=seed)


# -- forward / backward solves ---------------------------------------------------

@pytest.mark.parametrize("scheme", SCHEMES)
def test_forward_zero_controls(scheme, rng):
    spec = ModelSpec(scheme=scheme, width=4, n_layers=5)
    X = rng.standard_normal((3, 4))
    traj = forward_solve(spec, zero_controls(spec), X, 0, 5)
    assert len(traj.states) == 6 and all(np.array_equal(S, X) for S in traj.states)


def test_forward_empty_range(rng):
    spec = ModelSpec(width=4, n_layers=5)
    X = rng.standard_normal((3, 4))
    traj = forward_solve(spec, init_controls(spec), X, 2, 2)
    assert traj.states == [X] or (len(traj.states) == 1 and np.array_equal(traj.states[0], X))


def test_forward_recomposition_exact(rng):
    spec = ModelSpec(width=4, n_layers=3)
    c = random_controls(spec, 5)
    X = rng.standard_normal((4, 4))
    manual = X
    for j in range(3):
        manual = layer_forward(spec, manual, c.layers[j], j)
    assert np.array_equal(forward_solve(spec, c, X, 0, 3).final, manual)


def test_forward_range_errors(rng):
    spec = ModelSpec(width=4, n_layers=3)
    with pytest.raises(ContractError):
        forward_solve(spec, init_controls(spec), rng.standard_normal((2, 4)), 2, 4)
    with pytest.raises(ContractError):
        forward_solve(spec, init_controls(spec), rng.standard_normal((2, 4)), 2, 1)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_backward_zero_controls_and_zero_end(scheme, rng):
    spec = ModelSpec(scheme=scheme, width=4, n_layers=4)
    X, P = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    z = zero_controls(spec)
    co = backward_solve(spec, z, forward_solve(spec, z, X, 0, 4), P, 0, 4)
    assert all(np.array_equal(Q, P) for Q in co.costates)
    c = random_controls(spec, 0)
    co = backward_solve(spec, c, forward_solve(spec, c, X, 0, 4), np.zeros((3, 4)), 0, 4)
    assert all(not Q.any() for Q in co.costates)


def test_backward_missing_states(rng):
    spec = ModelSpec(width=4, n_layers=4)
    c = init_controls(spec)
    traj = forward_solve(spec, c, rng.standard_normal((2, 4)), 1, 3)
    with pytest.raises(ContractError):
        backward_solve(spec, c, traj, np.zeros((2, 4)), 0, 3)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_costates_are_state_gradients_at_every_layer(scheme, rng):
    spec = ModelSpec(scheme=scheme, width=4, n_layers=8, horizon=2.0)
    c = random_controls(spec, 1)
    X0 = rng.standard_normal((3, 4))
    y = np.array([0, 1, 1])
    traj = forward_solve(spec, c, X0, 0, 8)
    P_T = terminal_loss(c.head, traj.final, y)[1]
    co = backward_solve(spec, c, traj, P_T, 0, 8)
    for j in range(9):
        Xj = traj.at(j).copy()
        phi = lambda: terminal_loss(c.head, forward_solve(spec, c, Xj, j, 8).final, y)[0]  # noqa: E731
        assert rel_err(co.at(j), central_diff(phi, Xj)) <= 1e-6, j


# -- gradient assembly ---------------------------------------------------------------

def _full(spec, c, inputs):
    return forward_solve(spec, c, opening_forward(c.opening, inputs), 0, spec.n_layers, batch_id=0)


def test_zero_costates_zero_gradient(rng):
    spec = ModelSpec(width=4, n_layers=3, weight_decay=0.0)
    c = random_controls(spec, 0)
    traj = _full(spec, c, rng.standard_normal((2, 2)))
    co = CostateTrajectory([np.zeros((2, 4))] * 4, 0, 3, 0)
    g = assemble_gradient(spec, c, traj, co)
    assert not g.to_vector().any()


def test_zero_costates_regularizer_only(rng):
    spec = ModelSpec(scheme="verlet", width=4, n_layers=3, weight_decay=0.5, horizon=1.5)
    c = random_controls(spec, 0)
    traj = _full(spec, c, rng.standard_normal((2, 2)))
    co = CostateTrajectory([np.zeros((2, 4))] * 4, 0, 3, 0)
    g = assemble_gradient(spec, c, traj, co)
    for gj, U in zip(g.layers, c.layers):
        for k in U:
            assert np.allclose(gj[k], spec.step * spec.weight_decay * U[k], rtol=1e-15, atol=0)


def test_batch_mismatch_rejected(rng):
    spec = ModelSpec(width=4, n_layers=2)
    c = init_controls(spec)
    traj = _full(spec, c, rng.standard_normal((2, 2)))
    co = CostateTrajectory([np.zeros((2, 4))] * 3, 0, 2, batch_id=7)
    with pytest.raises(ContractError):
        assemble_gradient(spec, c, traj, co)


def full_gradient(spec, c, inputs, labels):
    traj = _full(spec, c, inputs)
    P_T = terminal_loss(c.head, traj.final, labels)[1]
    co = backward_solve(spec, c, traj, P_T, 0, spec.n_layers)
    return assemble_gradient(spec, c, traj, co, inputs, labels)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_gradient_matches_finite_differences(scheme, rng):
    spec = ModelSpec(scheme=scheme, width=4, n_layers=4, horizon=2.0, weight_decay=0.1)
    c = random_controls(spec, 2)
    data = tiny_data(8)
    g = full_gradient(spec, c, data.inputs, data.labels).to_vector()
    v = c.to_vector()
    fd = central_diff(lambda: objective(spec, c.load_vector(v), data.inputs, data.labels), v)
    assert rel_err(g, fd) <= 1e-6


def test_sub_range_gradient_leaves_other_layers_zero(rng):
    spec = ModelSpec(width=4, n_layers=4)
    c = random_controls(spec, 0)
    traj = _full(spec, c, rng.standard_normal((2, 2)))
    co = backward_solve(spec, c, traj, rng.standard_normal((2, 4)), 1, 3)
    g = assemble_gradient(spec, c, traj, co)
    assert not any(a.any() for a in g.layers[0].values())
    assert not any(a.any() for a in g.layers[3].values())
    assert not g.opening["W"].any() and not g.head["W"].any()


# -- update rule ------------------------------------------------------------------------

def test_sgd_update_rules():
    spec = ModelSpec(width=4, n_layers=2)
    c = init_controls(spec, 0)
    assert sgd_update(c, c.zeros_like(), 0.3).checksum() == c.checksum()
    assert not sgd_update(c, c, 1.0).to_vector().any()
    g1, g2 = random_controls(spec, 1), random_controls(spec, 2)
    two = sgd_update(sgd_update(c, g1, 0.1), g2, 0.1).to_vector()
    assert np.allclose(two, c.to_vector() - 0.1 * (g1.to_vector() + g2.to_vector()), rtol=0, atol=1e-15)
    for eta in (0.0, -1.0):
        with pytest.raises(ContractError):
            sgd_update(c, g1, eta)


def test_learning_rate_schedules():
    assert LearningRate(0.5)(100) == 0.5
    s = LearningRate(1.0, decay=10.0)
    assert s(0) == 1.0 and s(10) == 0.5 and s(30) == 0.25
    with pytest.raises(ContractError):
        LearningRate(0.1, decay=0.0)


# -- serial training --------------------------------------------------------------------

def test_zero_iterations_unchanged():
    spec = ModelSpec(width=4, n_layers=4)
    data = tiny_data()
    c = init_controls(spec, 0)
    out, metrics = serial_train(spec, c, data, BatchStream(len(data), 4, 0), LearningRate(0.1), 0)
    assert out.checksum() == c.checksum() and metrics == []


def test_serial_train_deterministic():
    spec = ModelSpec(scheme="verlet", width=4, n_layers=6)
    data = tiny_data(32)
    runs = [serial_train(spec, init_controls(spec, 3), data, BatchStream(len(data), 8, 3),
                         LearningRate(0.2), 15) for _ in range(2)]
    assert runs[0][0].checksum() == runs[1][0].checksum()
    assert [m["loss"] for m in runs[0][1]] == [m["loss"] for m in runs[1][1]]


@pytest.mark.parametrize("scheme", SCHEMES)
def test_serial_train_matches_backprop_oracle(scheme):
    spec = ModelSpec(scheme=scheme, width=4, n_layers=5, horizon=3.0, weight_decay=1e-2)
    data = tiny_data(24, seed=4)
    stream = BatchStream(len(data), 6, 4)
    c0 = random_controls(spec, 4)
    ours = serial_train(spec, c0, data, stream, LearningRate(0.3), 10)[0]
    layers, opening, head = oracle.sgd(spec, c0, data, stream, 0.3, 10)
    assert rel_err(ours.to_vector(), Controls(layers, opening, head).to_vector()) <= 1e-12


def test_full_batch_descent_on_ellipse():
    spec = ModelSpec(width=4, n_layers=8, horizon=1.0, weight_decay=1e-4)
    data = gen_ellipse(50, seed=0)
    stream = BatchStream(len(data), len(data), 0)
    c = init_controls(spec, 0)
    seen = [objective(spec, c, data.inputs, data.labels)]
    for k in range(100):
        c, _ = serial_train(spec, c, data, stream, LearningRate(1e-3), 1, start=k)
        seen.append(objective(spec, c, data.inputs, data.labels))
    assert all(b <= a for a, b in zip(seen, seen[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_reports_iteration():
    spec = ModelSpec(width=4, n_layers=2)
    data = tiny_data()
    schedule = lambda k: 1.0 if k < 2 else float("inf")  # noqa: E731
    with pytest.raises(NumericError) as info:
        serial_train(spec, init_controls(spec, 0), data, BatchStream(len(data), 4, 0), schedule, 10)
    assert info.value.iteration == 3 and "iteration 3" in str(info.value)


def test_eval_every_adds_accuracy():
    spec = ModelSpec(width=4, n_layers=2)
    data = tiny_data()
    _, m = serial_train(spec, init_controls(spec), data, BatchStream(len(data), 4, 0), LearningRate(0.1), 4,
                        eval_every=2)
    assert "train_accuracy" in m[1] and "train_accuracy" not in m[0]


# -- evaluation --------------------------------------------------------------------------

def test_evaluate_single_correct_sample():
    spec = ModelSpec(width=2, input_dim=2, n_layers=1)
    c = zero_controls(spec)
    c.opening["W"] = np.eye(2)
    c.head["W"] = np.eye(2)
    data = Dataset(np.array([[0.0, 1.0]]), np.array([1]), "one", np.zeros(2), np.ones(2), 2)
    assert evaluate(spec, c, data)[1] == 1.0


def test_zero_controls_predict_first_class():
    spec = ModelSpec(width=4, n_layers=3)
    data = gen_ellipse(30, seed=1).subset(np.r_[0:30, 30:40])
    loss, acc = evaluate(spec, zero_controls(spec), data)
    assert acc == pytest.approx(np.mean(data.labels == 0)) and loss == pytest.approx(np.log(2))
