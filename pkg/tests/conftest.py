import numpy as np
import pytest

from fedscam.model import Batch, ModelSpec, _forward, loss_and_grad


def random_case(rng: np.random.Generator, max_width: int = 12):
    depth = int(rng.integers(2, 5))
    widths = [int(rng.integers(2, max_width)) for _ in range(depth - 1)]
    classes = int(rng.integers(2, 7))
    spec = ModelSpec(tuple(widths + [classes]), seed=int(rng.integers(2**31)))
    params = rng.normal(0, 0.7, spec.num_params)
    n = int(rng.integers(1, 9))
    x = rng.standard_normal((n, widths[0]))
    y = rng.integers(0, classes, n)
    return spec, params, Batch(x, y)


def activation_pattern(spec: ModelSpec, params: np.ndarray, batch: Batch) -> list[np.ndarray]:
    _, _, pres = _forward(spec, np.asarray(params, dtype=np.float64), batch.features)
    return [p > 0 for p in pres]


def finite_difference(fn, params: np.ndarray, index: int, step: float = 1e-4) -> float:
    up = params.copy()
    down = params.copy()
    up[index] += step
    down[index] -= step
    return (fn(up) - fn(down)) / (2 * step)


def fd_max_rel_error(spec, params, batch, rng, coords=20, step=1e-4):
    """Largest relative error between analytic and central-difference gradients.

    Coordinates whose +-step perturbation flips a ReLU are resampled: the
    loss is not differentiable across the kink.
    """
    _, grad = loss_and_grad(spec, params, batch)
    base = activation_pattern(spec, params, batch)
    worst = 0.0
    checked = 0
    tries = 0
    while checked < min(coords, spec.num_params) and tries < 50 * coords:
        tries += 1
        i = int(rng.integers(spec.num_params))
        up, down = params.copy(), params.copy()
        up[i] += step
        down[i] -= step
        if any((a != b).any() for a, b in zip(base, activation_pattern(spec, up, batch))) or any(
            (a != b).any() for a, b in zip(base, activation_pattern(spec, down, batch))
        ):
            continue
        fd = finite_difference(lambda w: loss_and_grad(spec, w, batch)[0], params, i, step)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-7))
        checked += 1
    assert checked > 0
    return worst


def brute_force_multipliers(labels, summaries, norms, lam):
    """Enumerate every 2-subset by bitmask; the loser of a conflicting pair is
    the member ranked second by (larger norm first, then lower id first)."""
    n = len(norms)
    offences = [0] * n
    for mask in range(1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        if len(members) != 2:
            continue
        a, b = members
        if labels[a] != labels[b]:
            continue
        za, zb = np.asarray(summaries[a], float), np.asarray(summaries[b], float)
        na, nb = np.sqrt(za @ za), np.sqrt(zb @ zb)
        if na < 1e-12 or nb < 1e-12 or (za @ zb) / (na * nb) >= 0:
            continue
        loser = sorted(members, key=lambda k: (-norms[k], k))[1]
        offences[loser] += 1
    return np.array([lam ** k for k in offences])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::test_criterion_")[1]
        _CRITERIA[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[name]
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(number):2d} {outcome}  {label}: {detail}")
