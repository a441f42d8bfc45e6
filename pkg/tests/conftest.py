import numpy as np
import pytest

from veloreg.fields import Grid3

TOL_SCALE = {np.float64: 1.0, np.float32: 1e4}


def scaled_tol(base, dtype):
    """64-bit tolerance scaled for ``dtype``, floored at a few units of round-off."""
    return max(base * TOL_SCALE[dtype], 16 * float(np.finfo(dtype).eps))


def band_limited(rng, dims, ncomp=None, kmax=3, zero_mean=False):
    """Random real field whose Fourier modes satisfy ``|k_i| <= kmax``."""
    shape = dims if ncomp is None else (ncomp,) + tuple(dims)
    f = rng.standard_normal(shape)
    F = np.fft.fftn(f, axes=(-3, -2, -1))
    for ax, n in zip((-3, -2, -1), dims):
        k = np.abs(np.fft.fftfreq(n, 1.0 / n))
        sl = [None] * F.ndim
        sl[ax] = slice(None)
        F = F * (k <= kmax)[tuple(sl)]
    if zero_mean:
        F[..., 0, 0, 0] = 0.0
    return np.fft.ifftn(F, axes=(-3, -2, -1)).real


def smooth_velocity(rng, grid, amp=0.3, kmax=2):
    v = band_limited(rng, grid.dims, ncomp=3, kmax=kmax)
    return amp * v / np.abs(v).max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid16():
    return Grid3.cube(16)


@pytest.fixture(scope="session")
def grid32():
    return Grid3.cube(32)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (report.when == "call" or not report.passed):
        n, title = mark.args
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        ok, _, prev = _CRITERIA.get(n, (True, title, []))
        _CRITERIA[n] = (ok and report.passed, title, prev + details)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        line = f"C{n:<2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(detail)}]" if detail else ""))
