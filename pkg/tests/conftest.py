import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from resdistill.data import make_dataset  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk dataset: 64 px base, two levels, every split populated."""
    root = tmp_path_factory.mktemp("tiny_ds")
    return make_dataset(root, 12, seed=0, base_size=64, mags=(1.0, 0.5), aux_v1_patients=3, aux_v2_patients=6,
                        dev_patients=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        ok, title, detail, seconds = mod.RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({seconds:.1f} s)")
        if detail:
            terminalreporter.write_line(f"        {detail}")
