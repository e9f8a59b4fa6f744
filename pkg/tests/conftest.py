import numpy as np
import pytest

from quad2lin.mixers import AttentionWeights, Mamba2Weights, init_attention
from quad2lin.tensor import Tensor


def random_attention(rng, d=8, H=4, G=2, dh=3, dtype=np.float64, std=0.5, scale=True) -> AttentionWeights:
    return init_attention(d, H, G, dh, rng, std=std, dtype=dtype, scale_scores=scale)


def random_mamba(rng, d=8, H=4, G=2, dh=3, w=4, dtype=np.float64, std=0.4) -> Mamba2Weights:
    C = (H + 2 * G) * dh

    def t(*shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dtype))

    return Mamba2Weights(
        W_Q=t(d, H * dh),
        W_K=t(d, G * dh),
        W_V=t(d, G * dh),
        W_O=t(H * dh, d),
        a=Tensor(rng.uniform(-3.0, 0.5, size=G).astype(dtype)),
        W_gamma=t(d, G),
        conv_kernel=t(w, C, s=0.6),
        conv_bias=t(C, s=0.2),
        W_G=t(d, H * dh),
        gate_bias=t(H * dh),
        n_heads=H,
        n_groups=G,
        head_dim=dh,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report ------------------------------------------------------
#
# Tests marked ``@pytest.mark.criterion(n, title)`` get one PASS/FAIL line in
# the terminal summary. A test may attach a detail string with
# ``record_property("detail", ...)``.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": [], "n": 0})
    entry["ok"] &= rep.passed
    entry["n"] += 1
    detail = dict(item.user_properties).get("detail")
    if detail:
        entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n} {'PASS' if e['ok'] else 'FAIL'}: {e['title']} ({e['n']} tests)"
        if e["details"]:
            line += " [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
