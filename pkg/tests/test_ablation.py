import json
import math

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from atelier.ablation import (
    AblationReport,
    PolicyStats,
    SuitePlanner,
    SyntheticTask,
    SyntheticTaskSuite,
    TaskStep,
    run_ablation,
    two_proportion_test,
    wilson_interval,
)
from atelier.planning import Policy
from atelier.swi import TaskKind
from atelier.workspace import Workspace

from .conftest import SCENARIOS
from .oracles import normalized


def wilson_by_quadratic(x, n, z=1.959963984540054):
    # roots of (phat - p)^2 = z^2 p (1 - p) / n, solved as a plain quadratic in p
    phat = x / n
    a = 1 + z * z / n
    b = -(2 * phat + z * z / n)
    c = phat * phat
    disc = math.sqrt(b * b - 4 * a * c)
    return (-b - disc) / (2 * a), (-b + disc) / (2 * a)


class TestStatistics:
    @pytest.mark.parametrize("x, n", [(8, 10), (0, 20), (20, 20), (413, 500), (1, 3)])
    def test_wilson_matches_quadratic(self, x, n):
        assert wilson_interval(x, n) == pytest.approx(wilson_by_quadratic(x, n), abs=1e-12)

    def test_wilson_frozen(self):
        # 8/10 at 95%: computed by hand from the closed form, frozen
        lo, hi = wilson_interval(8, 10)
        assert lo == pytest.approx(0.49016, abs=1e-5) and hi == pytest.approx(0.94332, abs=1e-5)

    def test_two_proportion_frozen(self):
        # 60/100 vs 40/100: pooled 0.5, se = sqrt(0.25 * 0.02), z = 2*sqrt(2), p = erfc(2) / 2
        z, p = two_proportion_test(60, 100, 40, 100)
        assert z == pytest.approx(2 * math.sqrt(2))
        assert p == pytest.approx(0.0023388674905236, rel=1e-9)

    def test_two_proportion_degenerate(self):
        assert two_proportion_test(10, 10, 10, 10) == (0.0, 1.0)
        assert two_proportion_test(10, 10, 0, 10)[1] < 1e-3

    def test_stats_json(self):
        s = PolicyStats(runs=4, resolved=3, clean=4, expansions=10)
        out = s.to_json()
        assert out["resolve_rate"] == 0.75 and out["pass_rate"] == 1.0 and out["mean_expansions"] == 2.5
        assert set(out) == {"resolve_rate", "pass_rate", "mean_expansions", "ci95"}


@given(st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_split_recovers_step_success(success, share):
    suite = SyntheticTaskSuite([SyntheticTask((TaskStep("t2i_sd15", success),))], semantic_share=share)
    p_exec, confusion = suite.split(success)
    assert 0 <= confusion <= 1 and success - 1e-12 <= p_exec <= 1
    assert p_exec * (1 - confusion) == pytest.approx(success)


class TestSuite:
    def test_generate_shape(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=5, steps=3, seed=1)
        assert len(suite.tasks) == 5
        for task in suite.tasks:
            kinds = [library[s.workflow].descriptor.task_kind for s in task.steps]
            assert kinds == [TaskKind.TEXT_TO_IMAGE, TaskKind.IMAGE_TO_IMAGE, TaskKind.IMAGE_TO_VIDEO]
            required = {s.workflow for s in task.steps}
            for s in task.steps:
                assert not required & set(s.distractors) and "prompt_enhance" not in s.distractors

    def test_generate_deterministic(self, library):
        a = SyntheticTaskSuite.generate(library, seed=3).to_json()
        assert a == SyntheticTaskSuite.generate(library, seed=3).to_json()

    def test_from_yaml_file(self, library):
        suite = SyntheticTaskSuite.from_json(yaml.safe_load((SCENARIOS / "suite.yaml").read_text()), library)
        assert len(suite.tasks) == 20 and suite.semantic_share == 0.5

    def test_explicit_round_trip(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=2)
        again = SyntheticTaskSuite.from_json(json.loads(json.dumps(suite.to_json())), library)
        assert again.to_json() == suite.to_json()

    def test_unknown_workflow_rejected(self, library):
        with pytest.raises(ValueError):
            SyntheticTaskSuite.from_json({"tasks": [{"steps": [{"workflow": "nope"}]}]}, library)

    @pytest.mark.parametrize("share", [-0.1, 1.5])
    def test_bad_share(self, share):
        with pytest.raises(ValueError):
            SyntheticTaskSuite([SyntheticTask((TaskStep("t2i_sd15", 0.5),))], semantic_share=share)


class TestSuitePlanner:
    def test_pure_function_of_context(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=1, success=0.3)
        task = suite.tasks[0]
        ws = Workspace(task.instruction).snapshot()
        answers = [SuitePlanner(task, library, suite, 11).propose(ws, "", ["x"]).to_json() for _ in range(5)]
        assert all(a == answers[0] for a in answers)

    def test_rejected_distractor_excluded(self, library):
        step = TaskStep("t2i_sd15", 0.5, ("t2i_flux",))
        suite = SyntheticTaskSuite([SyntheticTask((step,))], semantic_share=1.0)  # confusion 0.5
        ws = Workspace("x").snapshot()
        fresh = {SuitePlanner(suite.tasks[0], library, suite, seed).propose(ws, "", []).head.workflow_name
                 for seed in range(40)}
        assert fresh == {"t2i_sd15", "t2i_flux"}
        after = {SuitePlanner(suite.tasks[0], library, suite, seed)
                 .propose(ws, "", ["t2i_flux result rejected: meh"]).head.workflow_name for seed in range(40)}
        assert after == {"t2i_sd15"}


class TestRunAblation:
    def test_minimum_repetitions(self, library):
        with pytest.raises(ValueError):
            run_ablation(SyntheticTaskSuite.generate(library, n_tasks=2), repetitions=99)

    def test_certain_steps_always_resolve(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=3, success=1.0)
        report = run_ablation(suite, repetitions=100, library=library)
        for name in ("full", "no-tree", "no-feedback"):
            s = report.stats[name]
            assert s.resolve_rate == 1.0 and s.pass_rate == 1.0 and s.mean_expansions == 3.0

    def test_deterministic(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=4, seed=2)
        a = run_ablation(suite, [Policy.FULL, Policy.NO_TREE], 100, seed=5, library=library, keep_traces=True)
        b = run_ablation(suite, [Policy.FULL, Policy.NO_TREE], 100, seed=5, library=library, keep_traces=True)
        assert a.dumps() == b.dumps()
        for name in a.traces:
            assert [normalized(t) for t in a.traces[name]] == [normalized(t) for t in b.traces[name]]

    def test_report_shape(self, library):
        suite = SyntheticTaskSuite.generate(library, n_tasks=4)
        report = run_ablation(suite, repetitions=100, library=library)
        assert isinstance(report, AblationReport)
        data = json.loads(report.dumps())
        assert set(data) == {"full", "no-tree", "no-feedback"}
        assert all(0 <= v["resolve_rate"] <= 1 for v in data.values())
        z, p = report.compare("full", "no-feedback")
        assert 0 <= p <= 1
