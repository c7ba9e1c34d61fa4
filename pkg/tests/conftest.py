import numpy as np
import pytest

from ecgunlearn.dataset import SegmentSet
from ecgunlearn.model import ModelConfig, build_model

# small enough for per-test training in well under a second
TINY = ModelConfig(stage_blocks=(1, 1), stage_channels=(4, 8), stem_kernel=5, block_kernel=3,
                   n_classes=2, in_leads=2, input_length=64)


def toy_set(n=24, leads=2, length=64, seed=0, task="binary", patients=4, shift=1.5) -> SegmentSet:
    """Two linearly separable classes: class 1 carries a constant offset on lead 0."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = rng.standard_normal((n, leads, length))
    x[:, 0, :] += shift * (2 * labels[:, None] - 1)
    pids = [f"P{i % patients:02d}" for i in range(n)]
    rids = [f"{p}_r{i // patients:02d}" for i, p in enumerate(pids)]
    ids = [f"{r}#{i}" for i, r in enumerate(rids)]
    return SegmentSet(x, labels, ids, pids, rids, task)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=7)


@pytest.fixture
def toy_data():
    return toy_set()


# acceptance verdicts ----------------------------------------------------------------

_VERDICTS: dict = {}


class _Recorder:
    def record(self, n: int, checks: dict, detail: str = "") -> bool:
        ok = all(bool(v) for v in checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        if failed:
            line += f"  [failed: {', '.join(failed)}]"
        _VERDICTS[n] = line
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
