import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def suite():
    from viewbench.objects import synthetic_suite
    return synthetic_suite()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def linear_scan(origins, dirs, corners):
    """Independent brute-force Moller-Trumbore over every triangle (double-sided)."""
    v0 = corners[:, 0]
    e1 = corners[:, 1] - v0
    e2 = corners[:, 2] - v0
    best_t = np.full(len(dirs), np.inf)
    best_k = np.full(len(dirs), -1)
    for k in range(len(corners)):
        p = np.cross(dirs, e2[k])
        det = p @ e1[k]
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origins - v0[k]
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1[k])
        v = np.einsum("ij,ij->i", dirs, q) * inv
        t = q @ e2[k] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < best_t)
        best_t[hit] = t[hit]
        best_k[hit] = k
    return best_t, best_k


@pytest.fixture(scope="session")
def annotations(suite):
    """Canonical-protocol annotations of the synthetic suite, shared by every test that needs them."""
    from viewbench.difficulty import annotate_object
    return {oid: annotate_object(suite.get(oid)) for oid in suite.ids()}


# one verdict line per acceptance criterion, printed after the run

_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "measured")
    prev = _VERDICTS.get(number)
    ok = rep.passed and (prev is None or prev[1])
    _VERDICTS[number] = (title, ok, "; ".join(d for d in (prev[2] if prev else "", detail) if d))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:>2}  {title}" + (f"  [{detail}]" if detail else ""))
