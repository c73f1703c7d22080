import math

import numpy as np
import pytest


def brute_det(a):
    """Determinant by Gaussian elimination with partial pivoting, pure Python."""
    m = [list(map(float, row)) for row in a]
    n = len(m)
    det = 1.0
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(m[r][c]))
        if m[p][c] == 0.0:
            return 0.0
        if p != c:
            m[c], m[p] = m[p], m[c]
            det = -det
        det *= m[c][c]
        for r in range(c + 1, n):
            f = m[r][c] / m[c][c]
            for k in range(c, n):
                m[r][k] -= f * m[c][k]
    return det


def dense_rates(z, labels, k, eps_sq=0.5, d=None):
    """R and R_c with explicit N x N diagonal membership matrices and slogdet."""
    z = np.asarray(z, float)
    dz, n = z.shape
    d = dz if d is None else d
    eye = np.eye(dz)
    r = 0.5 * np.linalg.slogdet(eye + d / (eps_sq * n) * z @ z.T)[1] / math.log(2)
    rc = 0.0
    for j in range(k):
        pi = np.diag((np.asarray(labels) == j).astype(float))
        tr = np.trace(pi)
        if tr == 0:
            continue
        rc += tr / (2 * n) * np.linalg.slogdet(eye + d / (eps_sq * tr) * z @ pi @ z.T)[1] / math.log(2)
    return r, rc


def central_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x (x is restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(approx, exact):
    scale = max(np.max(np.abs(exact)), 1e-12)
    return float(np.max(np.abs(approx - exact)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CLI_VERBS = ("screen", "train", "truncate", "sweep", "distort", "stdreport", "plot")

SMALL_CLI_CONFIG = """\
# small run for tests
n_per_class=60
n_test_per_class=30
e1_enc=2
e1_dec=2
e2_enc=2
e2_dec=2
e3=3
ce_epochs=4
screening_epochs=2
screening_dims=4,8
"""


def run_all_verbs(out, config_text=SMALL_CLI_CONFIG, seed=0, extra=()):
    """Run every CLI verb into ``out``; returns the exit codes."""
    from ldrsplit.cli import main

    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "bench.cfg"
    cfg.write_text(config_text)
    common = ["--config", str(cfg), "--seed", str(seed), "--dy", "8", "--s-grid", "0.2:1.0:0.4",
              "--out", str(out), *extra]
    return [main([verb, *common]) for verb in CLI_VERBS]


def artifact_bytes(out):
    """Every CSV, SVG and model/profile file under ``out`` keyed by name."""
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.suffix in (".csv", ".svg", ".ldrm", ".ldrp")}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
