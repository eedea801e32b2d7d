import numpy as np
import pytest

from timepar.dynamics import Controls, ModelSpec, init_controls

H = 1e-5


def central_diff(fun, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fun`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fun()
        x[i] = old - h
        fm = fun()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def random_controls(spec: ModelSpec, seed: int, bias_scale: float = 0.3) -> Controls:
    """Rough random controls with nonzero biases (every path of the gradient is exercised)."""
    rng = np.random.default_rng(seed)
    ctl = init_controls(spec, seed, smooth=False)
    for a in ctl.arrays():
        a += bias_scale * rng.standard_normal(a.shape)
    return ctl


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(name: str, ok, detail: str = "", gating: bool = True) -> None:
    """Print and remember a PASS/FAIL line for the acceptance summary; ``ok=None`` means skipped."""
    if ok is None:
        tag = "SKIP"
    else:
        tag = ("PASS" if ok else "FAIL") if gating else ("INFO-PASS" if ok else "INFO-FAIL")
    line = f"{tag}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
