"""Independent reference implementations used as test oracles."""
import numpy as np
import pytest


def direct_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0), groups=1):
    """Six nested loops in float64, no im2col, no BLAS."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    cog = co // groups
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            g = o // cog
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cig):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, g * cig + ci, i * sh + u, j * sw + v] * w[o, ci, u, v]
                    out[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / (np.max(np.abs(b)) + 1e-6))


def numeric_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f`` w.r.t. every entry of float64 ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def directional_check(f, arrays, grads, rng, eps=1e-2):
    """Compare <grad, d> with (f(x + eps d) - f(x - eps d)) / 2 eps for a random unit direction d.

    ``arrays`` are float32 arrays mutated in place; returns (analytic, numeric).
    """
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [(d / norm).astype(np.float32) for d in dirs]
    analytic = sum(float(np.sum(g.astype(np.float64) * d)) for g, d in zip(grads, dirs))
    saved = [a.copy() for a in arrays]
    for a, s, d in zip(arrays, saved, dirs):
        a[...] = s + eps * d
    fp = f()
    for a, s, d in zip(arrays, saved, dirs):
        a[...] = s - eps * d
    fm = f()
    for a, s in zip(arrays, saved):
        a[...] = s
    return analytic, (fp - fm) / (2 * eps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []     # (criterion, passed, detail) appended by test_acceptance.py


def report(criterion: str, passed: bool, detail: str):
    ACCEPTANCE.append((criterion, passed, detail))
    print(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")
