import numpy as np
import pytest

from mddformer.synth import SynthSpec, generate_synthetic_dataset


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert err.max() < rtol, f"max relative error {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_dataset(SynthSpec(n_samples=40, seq_len=8, d_audio=5, d_visual=6,
                                                separation_audio=5.0, separation_visual=5.0, seed=3))


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion-marked test
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if not rep.passed:
        detail = (detail + " | " if detail else "") + str(rep.longrepr).strip().splitlines()[-1][:200]
    _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title} :: {detail}")
