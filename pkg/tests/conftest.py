from __future__ import annotations

import json
import logging
import random
from pathlib import Path

import pytest

from atelier.agents import PlannerProposal, ScriptedPlanner, mock_bundle
from atelier.backends import SimProfile, SimulatedBackend
from atelier.graph import parse_workflow
from atelier.swi import SwiCall, fixture_library

FIXTURES = Path(__file__).resolve().parent.parent / "src" / "atelier" / "fixtures"
SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(autouse=True)
def _quiet_sim_logs(caplog):
    caplog.set_level(logging.ERROR, logger="atelier.backends.simulator")


@pytest.fixture(scope="session")
def library():
    return fixture_library()


@pytest.fixture
def sim():
    return SimulatedBackend(SimProfile.uniform(1.0, 0.9, seed=1))


def t2i(prompt="$task"):
    return SwiCall("t2i_sd15", {"prompt": prompt})


def upscale():
    return SwiCall("upscale_esrgan", {"image": "$latest_image"})


def chain(*calls):
    return PlannerProposal.of(*calls)


def bundle(*proposals, evaluator=None):
    return mock_bundle(ScriptedPlanner(list(proposals)), evaluator)


def random_document(rng: random.Random, n: int, p_edge: float) -> dict:
    """API-format document with n nodes and random links (self-loops and back edges allowed)."""
    doc = {}
    for i in range(1, n + 1):
        inputs = {"seed": rng.randrange(1000)}
        for j in range(1, n + 1):
            if rng.random() < p_edge:
                inputs[f"in_{j}"] = [str(j), 0]
        doc[str(i)] = {"class_type": f"Node{i % 4}", "inputs": inputs}
    return doc


def random_graph(rng: random.Random, n: int | None = None, p_edge: float | None = None):
    n = n if n is not None else rng.randint(1, 25)
    p = p_edge if p_edge is not None else rng.choice([0.02, 0.05, 0.1, 0.2])
    doc = random_document(rng, n, p)
    return parse_workflow(json.dumps(doc)), doc


def has_cycle_oracle(doc: dict) -> bool:
    """Recursive three-colour DFS looking for a back edge; independent of the library code."""
    succ = {nid: [] for nid in doc}
    for nid, node in doc.items():
        for v in node["inputs"].values():
            if isinstance(v, list):
                succ[str(v[0])].append(nid)
    colour = {nid: 0 for nid in doc}

    def visit(u):
        colour[u] = 1
        for w in succ[u]:
            if colour[w] == 1 or (colour[w] == 0 and visit(w)):
                return True
        colour[u] = 2
        return False

    return any(colour[u] == 0 and visit(u) for u in doc)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary --

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        first = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
        detail = f"{detail}; {first}" if detail else first
    _CRITERIA[n] = ("FAIL" if rep.failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
