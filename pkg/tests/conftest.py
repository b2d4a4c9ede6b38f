import numpy as np
import pytest
import torch

from mitbench.dataset import Dataset, Sample
from mitbench.forward import MaterialMap, forward
from mitbench.geometry import Phantom, rasterize_phantom_to_tri

torch.set_num_threads(1)

SMALL_POSITIONS = [(0, 0), (30, 0), (-30, 20), (0, -50), (40, 40), (-50, -30), (60, 0), (0, 60)]


@pytest.fixture(scope="session")
def small_split():
    """Eight noiseless 35 mm cylinder frames for overfit checks."""
    f_bg = forward(MaterialMap.uniform())
    samples = []
    for pos in SMALL_POSITIONS:
        ph = Phantom("cylinder", 35, 3.0, pos)
        d = (forward(MaterialMap.with_phantom(ph)) - f_bg).astype(np.complex64)
        samples.append(Sample(d, rasterize_phantom_to_tri(ph).astype(np.float32), ph))
    return Dataset(samples)


# --- acceptance verdicts ------------------------------------------------------

_VERDICTS: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "slow: trains the full desk-scale experiment")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _VERDICTS.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        runs = _VERDICTS[n]
        ok = all(passed for _, passed, _ in runs)
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")
