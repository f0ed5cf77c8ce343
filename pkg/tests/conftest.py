import numpy as np
import pytest

from shiftshare.data import PanelDataset


def make_panel(rng, n=30, T=2, p=4, d=2, n_clusters=6, intercept=True, weights=True,
               with_x_shares=False, codes=None, beta=1.0):
    """Random balanced panel with an endogenous regressor."""
    s = rng.dirichlet(np.ones(p), size=(n, T)) * rng.uniform(0.5, 1.0, size=(n, T, 1))
    shock = rng.standard_normal((T, p))
    Z = np.einsum("itp,tp->it", s, shock)
    cols = []
    if intercept and d > 0:
        cols.append(np.ones((n, T)))
    while len(cols) < d:
        cols.append(rng.standard_normal((n, T)))
    w = np.stack(cols, axis=2) if cols else np.zeros((n, T, 0))
    u = rng.standard_normal((n, T))
    x = Z + 0.5 * u + 0.3 * rng.standard_normal((n, T))
    y = beta * x + (w @ np.linspace(0.5, -0.5, d) if d else 0.0) + u
    clusters = np.array([f"c{k % n_clusters}" for k in range(n)], dtype=object)
    codes = codes or [f"{3000 + 7 * j}" for j in range(p)]
    names = [f"c{k}" for k in range(d)]
    if intercept and d > 0:
        names[0] = "intercept"
    kw = {"control_names": tuple(names)}
    if with_x_shares:
        kw |= {"s_x": s, "shock_x": shock + 0.5 * rng.standard_normal((T, p))}
    return PanelDataset(
        y=y, x=x, w=w, s_z=s, shock_z=shock,
        reg_weight=rng.uniform(0.5, 2.0, size=(n, T)) if weights else np.ones((n, T)),
        obs_cluster=np.repeat(clusters[:, None], T, axis=1),
        sector_code=np.array(codes, dtype=object),
        sector_cluster=np.array([c[:3] for c in codes], dtype=object),
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def panel(rng):
    return make_panel(rng)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``check(number, title, ok, detail)``.

    ``ok=None`` records a SKIP line and skips the test.
    """

    def check(number, title, ok, detail=""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        request.config.stash[_CRITERIA].append((number, f"criterion {number:>2} {status}  {title}  {detail}".rstrip()))
        if ok is None:
            pytest.skip(detail)
        assert ok, f"criterion {number} failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
