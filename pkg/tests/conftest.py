import numpy as np
import pytest

from floodcast.inundation_threshold import EventCatalog, FloodEvent
from floodcast.synthdata import flat_fill_extent, make_valley_dem

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_RESULTS = {}

BATHTUB_TRAIN_STAGES = np.linspace(100.2, 102.4, 12)


@pytest.fixture(scope="session")
def valley_dem():
    return make_valley_dem(128, 128, channel_depth=2.0, bank_slope=0.05, base=100.0)


@pytest.fixture(scope="session")
def bathtub_catalog(valley_dem):
    events = [FloodEvent(float(s), flat_fill_extent(valley_dem, float(s))) for s in BATHTUB_TRAIN_STAGES]
    return EventCatalog("G1", events)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
