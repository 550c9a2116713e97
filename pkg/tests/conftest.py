from __future__ import annotations

from pathlib import Path

import pytest

from metrochoice.delays import parse_structured_delays_file
from metrochoice.network import load_network

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "metrochoice" / "data"
FIXTURES = Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session")
def shenzhen_network():
    return load_network(DATA_DIR / "shenzhen_network.json")


@pytest.fixture(scope="session")
def shenzhen_events(shenzhen_network):
    events, rejects = parse_structured_delays_file(
        DATA_DIR / "shenzhen_delay_events_2019.csv", shenzhen_network
    )
    assert not rejects
    return events
