import json
from fractions import Fraction

import pytest

from mkteq.model import market_from_dict


def linear_market(values, endowments=None, names=None):
    """Market of linear agents; ``values[i]`` lists agent i's rates per good."""
    m = len(values[0])
    goods = [f"g{j + 1}" for j in range(m)]
    if endowments is None:
        endowments = [[1 if j == i else 0 for j in range(m)] for i in range(len(values))]
    agents = []
    for i, (vals, w) in enumerate(zip(values, endowments)):
        agents.append({"name": (names or [f"a{k + 1}" for k in range(len(values))])[i],
                       "endowment": [str(x) for x in w],
                       "utility": {"type": "linear", "values": list(vals)}})
    return market_from_dict({"goods": goods, "agents": agents})


CROSS = {"goods": ["g1", "g2"], "agents": [
    {"name": "a1", "endowment": {"g1": "1"}, "utility": {"type": "linear", "values": {"g2": 1}}},
    {"name": "a2", "endowment": {"g2": "1"}, "utility": {"type": "linear", "values": {"g1": 1, "g2": 2}}},
]}

SYMMETRIC = {"goods": ["g1", "g2"], "agents": [
    {"name": "a1", "endowment": {"g1": "1"}, "utility": {"type": "linear", "values": {"g2": 1}}},
    {"name": "a2", "endowment": {"g2": "1"}, "utility": {"type": "linear", "values": {"g1": 1}}},
]}


@pytest.fixture
def cross():
    return market_from_dict(CROSS)


@pytest.fixture
def symmetric():
    return market_from_dict(SYMMETRIC)


@pytest.fixture
def cross_file(tmp_path):
    path = tmp_path / "cross.json"
    path.write_text(json.dumps(CROSS))
    return path


@pytest.fixture
def symmetric_file(tmp_path):
    path = tmp_path / "symmetric.json"
    path.write_text(json.dumps(SYMMETRIC))
    return path


F = Fraction


# one summary line per acceptance criterion, filled by test_acceptance
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
