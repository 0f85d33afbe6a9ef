import numpy as np
import pytest

from mimscape.model import ViTConfig, ViTModel
from mimscape.params import ParameterSet

# <= 2k parameters so finite differences over every value stay cheap
TINY = ViTConfig(image_size=8, channels=1, patch_size=4, encoder_depth=1, decoder_depth=1,
                 embed_dim=8, decoder_dim=8, heads=2, decoder_heads=2, mlp_ratio=2.0, num_classes=3)

SMALL = ViTConfig(image_size=8, channels=1, patch_size=2, encoder_depth=1, decoder_depth=1,
                  embed_dim=16, decoder_dim=8, heads=2, decoder_heads=2, mlp_ratio=2.0, num_classes=4)


@pytest.fixture
def tiny_model():
    return ViTModel.create(TINY, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, params, h=1e-5, names=None):
    """Numerical gradient of scalar ``f(params)`` for every value of ``names``."""
    params = ParameterSet(params)
    out = {}
    for name in names or list(params):
        base = params[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            g[idx] = (f(ParameterSet(params, **{name: plus})) - f(ParameterSet(params, **{name: minus}))) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor=None):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries.

    Entries whose true gradient is exactly zero (e.g. a key bias, which
    softmax ignores) only carry finite-difference rounding noise of about
    ``ulp(loss) / 2h``. The default floor, 1e-3 of the largest gradient
    entry (at least 1e-6), keeps that noise from reading as an error.
    """
    if floor is None:
        scale = max(float(np.abs(np.asarray(analytic[k])).max(initial=0.0)) for k in numeric)
        floor = max(1e-6, 1e-3 * scale)
    worst = 0.0
    for name in numeric:
        a, n = np.asarray(analytic[name]), np.asarray(numeric[name])
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


# -- acceptance reporting --------------------------------------------------------

_acceptance: dict[str, object] = {}
_setup_seconds: dict[str, float] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "setup":
        _setup_seconds[report.nodeid] = report.duration  # module fixtures such as the reproduction run
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, rep in _acceptance.items():
        verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        terminalreporter.write_line(f"{verdict}  {nodeid.split('::')[-1]}  ({rep.duration + _setup_seconds.get(nodeid, 0.0):.1f} s)")
        for key, value in rep.user_properties:
            if key == "detail":
                for line in str(value).splitlines():
                    terminalreporter.write_line(f"      {line}")
