import json
import socket
from pathlib import Path

import pytest

from atelier.agents import (
    AdapterFailure,
    AppendingPreprocessor,
    EvalVerdict,
    FailingPreprocessor,
    FixedPlanner,
    PlannerProposal,
    ScriptedEvaluator,
    ScriptedPlanner,
    mock_bundle,
)
from atelier.backends import BackendUnreachable, RemoteBackend, SimProfile, SimulatedBackend, WorkflowProfile
from atelier.planning import (
    NO_WORKFLOW,
    Action,
    AttemptRecord,
    NodeStatus,
    PlanConfig,
    PlanNode,
    Policy,
    TaskRunner,
    handle_result,
    preprocess,
    run_task,
)
from atelier.swi import Library, SwiCall
from atelier.trace import RunTrace, read_trace
from atelier.workspace import Workspace

from .conftest import bundle, chain, t2i, upscale
from .oracles import confinement_violations, executed_jobs, reopen_violations

PASS = EvalVerdict(True)


def fail(text="not good enough"):
    return EvalVerdict(False, text)


def sim(p=1.0, seed=1, quality=0.9, **per):
    return SimulatedBackend(SimProfile({k: WorkflowProfile(*v) for k, v in per.items()},
                                       WorkflowProfile(p, quality, 0.02), seed))


class BrokenPlanner:
    def propose(self, workspace, library_context, feedback_history):
        raise AdapterFailure("model returned prose", raw="use t2i please")


class RecordingPlanner:
    """Wraps a planner and keeps every feedback list it was shown."""

    def __init__(self, inner):
        self.inner = inner
        self.seen = []

    def propose(self, workspace, library_context, feedback_history):
        self.seen.append(list(feedback_history))
        return self.inner.propose(workspace, library_context, feedback_history)


class TestHandleResult:
    def node(self, n_attempts):
        node = PlanNode(0, None, 0, Workspace("t").snapshot())
        node.attempts = [AttemptRecord(None) for _ in range(n_attempts)]
        return node

    def test_table(self):
        term, step = AttemptRecord(None, terminal=True), AttemptRecord(None)
        assert handle_result(self.node(1), term, PASS, 3) is Action.SUCCESS
        assert handle_result(self.node(1), step, PASS, 3) is Action.DESCEND
        assert handle_result(self.node(1), step, fail(), 3) is Action.RETRY
        assert handle_result(self.node(3), step, fail(), 3) is Action.PROPAGATE


class TestPreprocess:
    def test_identity(self):
        assert preprocess("a cat", mock_bundle(FixedPlanner(chain(t2i())))) == "a cat"

    def test_appending_keeps_prefix(self):
        b = mock_bundle(FixedPlanner(chain(t2i())), preprocessor=AppendingPreprocessor("8k"))
        assert preprocess("a cat", b).startswith("a cat")

    def test_failure_falls_back_with_one_warning(self, library):
        b = mock_bundle(FixedPlanner(chain(t2i())), preprocessor=FailingPreprocessor())
        trace = RunTrace()
        assert preprocess("a cat", b, trace) == "a cat"
        assert trace.count("warning") == 1
        result = run_task("a cat", [], library, b, sim())
        assert result.resolved and result.trace.count("warning") == 1


class TestRunTask:
    def test_happy_path_one_expansion(self, library):
        r = run_task("a red cube", [], library, bundle(chain(t2i())), sim())
        assert r.status == "resolved" and r.expansions == 1 and len(r.artifacts) == 1

    def test_bounded_failure(self, library):
        # max_children=2, max_depth=2, nothing ever succeeds: the root spends its 2 attempts
        # and no child is ever opened. Hand enumeration of the bound: 2 + 2*2 = 6.
        be = sim(p=0.0)
        r = run_task("x", [], library, bundle(chain(t2i(), upscale())), be,
                     PlanConfig(max_depth=2, max_children_per_node=2))
        assert r.status == "unresolved-exhausted"
        assert be.jobs == r.expansions == 2 <= 2 + 2 * 2

    def test_bounded_failure_deeper(self, library):
        # every job succeeds but every terminal evaluation fails, so the tree fills out fully:
        # root 2 attempts -> 2 children x 2 attempts = 6 jobs, depth 2 stops further descent
        be = sim()
        r = run_task("x", [], library,
                     bundle(chain(t2i(), upscale()), chain(upscale(), upscale()), chain(upscale()),
                            evaluator=ScriptedEvaluator([fail()])),
                     be, PlanConfig(max_depth=2, max_children_per_node=2))
        assert r.status == "unresolved-exhausted" and be.jobs <= 6

    def test_empty_library(self):
        be = sim()
        r = run_task("x", [], Library(), bundle(chain(t2i())), be)
        assert r.status == "unresolved-exhausted" and be.jobs == 0
        (fb,) = r.trace.of("feedback-recorded")
        assert fb["detail"]["text"] == NO_WORKFLOW

    def test_chain_head_only(self, library):
        be = sim()
        runner = TaskRunner(library, bundle(chain(t2i(), upscale()), chain(upscale())), be)
        r = runner.run("a cube")
        assert r.resolved and be.jobs == 2 == r.expansions == executed_jobs(r.trace.events)
        first_child = runner.nodes[1]
        assert len(first_child.workspace_snapshot.artifacts) == 1
        assert [c.workflow_name for c in runner.nodes[0].proposed_chain] == ["t2i_sd15", "upscale_esrgan"]
        assert [e["detail"]["workflow"] for e in r.trace.of("call-executed")] == ["t2i_sd15", "upscale_esrgan"]

    def test_unknown_workflow(self, library):
        be = sim()
        runner = TaskRunner(library, bundle(chain(SwiCall("does-not-exist")), chain(t2i())), be)
        r = runner.run("x")
        assert r.resolved and be.jobs == 1
        bad = runner.nodes[0].attempts[0]
        assert "unknown workflow" in bad.feedback and bad.outcome is None

    def test_bad_arguments_cost_no_job(self, library):
        be = sim()
        runner = TaskRunner(library, bundle(chain(SwiCall("t2i_sd15", {"prompt": 5})), chain(t2i())), be)
        assert runner.run("x").resolved and be.jobs == 1
        assert "type-mismatch" in runner.nodes[0].attempts[0].feedback

    def test_planner_failure_is_feedback(self, library):
        be = sim()
        r = run_task("x", [], library, mock_bundle(BrokenPlanner()), be, PlanConfig(max_children_per_node=2))
        assert r.status == "unresolved-exhausted" and be.jobs == 0
        texts = [e["detail"]["text"] for e in r.trace.of("feedback-recorded")]
        assert len(texts) == 2 and all("use t2i please" in t for t in texts)

    def test_retry_then_success(self, library):
        planner = RecordingPlanner(ScriptedPlanner([chain(t2i())]))
        runner = TaskRunner(library, mock_bundle(planner, ScriptedEvaluator([fail("too dark"), PASS])), sim())
        r = runner.run("x")
        assert r.resolved and r.expansions == 2
        assert planner.seen == [[], ["t2i_sd15 result rejected: too dark"]]
        root = runner.nodes[0]
        assert root.status is NodeStatus.SUCCEEDED and len(root.attempts) == 2
        assert root.attempts[0].feedback and root.attempts[1].feedback is None

    def test_propagate_up_gives_parent_feedback(self, library):
        # child fails twice, parent retries with the child's summary in its record
        planner = RecordingPlanner(ScriptedPlanner([
            chain(t2i(), upscale()), chain(upscale()), chain(upscale()), chain(t2i(), upscale()), chain(upscale()),
        ]))
        ev = ScriptedEvaluator([fail("ringing"), fail("ringing again"), PASS])
        runner = TaskRunner(library, mock_bundle(planner, ev), sim(), PlanConfig(max_children_per_node=2))
        r = runner.run("x")
        assert r.resolved
        root, child = runner.nodes[0], runner.nodes[1]
        assert child.status is NodeStatus.FAILED_EXHAUSTED
        assert root.attempts[0].child == 1 and "node 1" in root.attempts[0].feedback
        # the root's retry sees the summary; the child's own texts never reach the root
        root_view = planner.seen[3]
        assert len(root_view) == 1 and "ringing again" in root_view[0] and "ringing again" not in json.dumps(root_view[1:])
        assert not confinement_violations(r.trace.events) and not reopen_violations(r.trace.events)
        (bt,) = r.trace.of("backtracked")
        assert bt["node"] == 1 and bt["detail"]["to"] == 0

    def test_summary_carries_only_own_failures(self, library):
        # root -> child 1 -> grandchild 2; only the grandchild's edge is rejected.
        # child 1 hears about it, the root only learns that child 1 ran out of options.
        planner = ScriptedPlanner([chain(t2i(), upscale(), upscale()), chain(upscale(), upscale())])
        ev = ScriptedEvaluator([PASS, PASS, fail("SECRET-GRANDCHILD")])
        runner = TaskRunner(library, mock_bundle(planner, ev), sim(),
                            PlanConfig(max_children_per_node=1, max_depth=6, evaluate_intermediate=True))
        r = runner.run("x")
        assert r.status == "unresolved-exhausted" and len(runner.nodes) == 3
        by_node = {}
        for e in r.trace.of("feedback-recorded"):
            by_node.setdefault(e["node"], []).append(e["detail"])
        assert any("SECRET" in d["text"] for d in by_node[1]) and by_node[1][0]["origin"] == 2
        (root_fb,) = by_node[0]
        assert root_fb["origin"] == 1 and "SECRET" not in root_fb["text"]
        assert "failed further down" in root_fb["text"]
        assert not confinement_violations(r.trace.events) and not reopen_violations(r.trace.events)

    def test_terminate_evaluates_current_edge(self, library):
        be = sim()
        r = run_task("x", [], library, bundle(chain(t2i(), upscale()), PlannerProposal.stop()), be)
        assert r.resolved and be.jobs == 1
        (ev,) = [e for e in r.trace.of("evaluated") if e["detail"]["terminal"]]
        assert ev["node"] == 1 and ev["detail"]["workflow"] is None

    def test_terminate_at_root_fails(self, library):
        r = run_task("x", [], library, bundle(PlannerProposal.stop()), sim(), PlanConfig(max_children_per_node=2))
        assert r.status == "unresolved-exhausted" and r.expansions == 0

    def test_budget(self, library):
        be = sim()
        r = run_task("x", [], library, bundle(chain(t2i(), upscale()), evaluator=ScriptedEvaluator([fail()])), be,
                     PlanConfig(max_total_expansions=3, max_children_per_node=10, max_depth=10,
                                evaluate_intermediate=True))
        assert r.status == "unresolved-budget" and be.jobs == 3

    def test_depth_limit(self, library):
        # intermediate edges keep passing, so only the depth bound stops descent
        be = sim()
        r = run_task("x", [], library, bundle(chain(t2i(), upscale())), be,
                     PlanConfig(max_depth=3, max_children_per_node=1))
        assert r.status == "unresolved-exhausted" and be.jobs == 3
        assert any("depth limit" in e["detail"]["text"] for e in r.trace.of("feedback-recorded"))

    def test_execution_fault_diagnostics_reach_planner(self, library):
        planner = RecordingPlanner(ScriptedPlanner([chain(t2i())]))
        be = SimulatedBackend(SimProfile({"t2i_sd15": WorkflowProfile(0.5, 0.9, 0.0)}, seed=3))
        r = run_task("x", [], library, mock_bundle(planner), be, PlanConfig(max_children_per_node=3))
        for seen in planner.seen[1:]:
            assert all("simulated fault" in s for s in seen)
        assert not confinement_violations(r.trace.events)

    def test_clamp_warning_traced(self, library):
        call = SwiCall("t2i_sd15", {"prompt": "$task"}, {"steps": 500})
        r = run_task("x", [], library, bundle(chain(call)), sim())
        (w,) = r.trace.of("warning")
        assert "clamped" in w["detail"]["message"]

    def test_context_budget_warning(self, library):
        small = Library(list(library.values()), context_budget=10)
        r = run_task("x", [], small, bundle(chain(t2i())), sim())
        (w,) = r.trace.of("warning")
        assert "over the budget of 10" in w["detail"]["message"] and r.resolved
        assert run_task("x", [], library, bundle(chain(t2i())), sim()).trace.count("warning") == 0

    def test_intermediate_evaluation_flag(self, library):
        ev = ScriptedEvaluator([PASS])
        run_task("x", [], library, bundle(chain(t2i(), upscale()), chain(upscale()), evaluator=ev), sim())
        assert ev.calls == 1
        ev2 = ScriptedEvaluator([PASS])
        run_task("x", [], library, bundle(chain(t2i(), upscale()), chain(upscale()), evaluator=ev2), sim(),
                 PlanConfig(evaluate_intermediate=True))
        assert ev2.calls == 2

    def test_unreachable_backend_raises(self, library):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        be = RemoteBackend(f"http://127.0.0.1:{port}", timeout=2)
        with pytest.raises(BackendUnreachable):
            run_task("x", [], library, bundle(chain(t2i())), be)

    def test_inputs_feed_arguments(self, library, tmp_path):
        img = tmp_path / "photo.png"
        img.write_bytes(b"pixels")
        runner = TaskRunner(library, bundle(chain(upscale())), sim())
        r = runner.run("upscale this", [img])
        assert r.resolved
        root = runner.nodes[0]
        assert root.workspace_snapshot.latest("image").path == str(img)

    def test_partial_results_persist(self, library):
        runner = TaskRunner(library, bundle(chain(t2i(), upscale()), chain(upscale())), sim())
        r = runner.run("x")
        assert [a.origin[1] for a in r.workspace.artifacts] == ["t2i_sd15", "upscale_esrgan"]


class TestArtifactsOnDisk:
    def test_run_dir_contents(self, library, tmp_path):
        r = run_task("a red cube", [], library, bundle(chain(t2i(), upscale()), chain(upscale())), sim(),
                     run_dir=tmp_path / "run")
        events = read_trace(tmp_path / "run" / "trace.jsonl")
        assert [e["seq"] for e in events] == list(range(len(events)))
        assert all({"seq", "event", "node", "detail"} <= set(e) for e in events)
        last_exec = [e for e in events if e["event"] == "call-executed"][-1]
        assert [str(Path(a).relative_to(tmp_path / "run")) for a in r.artifacts] == last_exec["detail"]["artifacts"]
        ws = json.loads((tmp_path / "run" / "workspace.json").read_text())
        assert len(ws["artifacts"]) == 2
        assert all(Path(a).is_file() for a in r.artifacts)

    def test_failed_subtree_artifacts_kept_on_disk_not_in_sibling(self, library, tmp_path):
        runner = TaskRunner(library, mock_bundle(
            ScriptedPlanner([chain(t2i(), upscale()), chain(upscale()), chain(t2i(), upscale()), chain(upscale())]),
            ScriptedEvaluator([fail(), PASS])), sim(), PlanConfig(max_children_per_node=1), run_dir=tmp_path)
        # max_children=1: the child fails once and exhausts, root also has only one attempt
        r = runner.run("x")
        assert not r.resolved
        assert len(list((tmp_path / "artifacts").iterdir())) == 2

    def test_sibling_workspace_excludes_failed_subtree(self, library):
        # child 1 fails twice and exhausts, the root retries and the new child succeeds
        runner = TaskRunner(library, mock_bundle(
            ScriptedPlanner([chain(t2i(), upscale()), chain(upscale()), chain(upscale()),
                             chain(t2i(), upscale()), chain(upscale())]),
            ScriptedEvaluator([fail(), fail(), PASS])), sim(), PlanConfig(max_children_per_node=2))
        r = runner.run("x")
        assert r.resolved
        first, failed_child_edge = runner.nodes[1], runner.nodes[0].attempts[0]
        retry_child = runner.nodes[runner.nodes[0].attempts[1].child]
        failed_paths = {a.path for a in failed_child_edge.artifacts} | {
            a.path for att in first.attempts for a in att.artifacts}
        assert failed_paths and not failed_paths & {a.path for a in retry_child.workspace_snapshot.artifacts}


class TestPolicies:
    def test_no_feedback_hides_diagnostics(self, library):
        planner = RecordingPlanner(ScriptedPlanner([chain(t2i())]))
        r = run_task("x", [], library, mock_bundle(planner, ScriptedEvaluator([fail(), fail(), PASS])), sim(),
                     policy=Policy.NO_FEEDBACK)
        assert r.resolved and planner.seen == [[], [], []]
        assert all(e["detail"]["feedback_ids"] == [] for e in r.trace.of("call-proposed"))

    def test_no_tree_restarts_from_root(self, library):
        planner = RecordingPlanner(ScriptedPlanner([chain(t2i(), upscale()), chain(upscale())] * 2))
        runner = TaskRunner(library, mock_bundle(planner, ScriptedEvaluator([fail(), PASS])), sim(),
                            policy=Policy.NO_TREE)
        r = runner.run("x")
        assert r.resolved and r.expansions == 4
        assert all(seen == [] for seen in planner.seen)
        roots = [e for e in r.trace.of("node-opened") if e["detail"]["parent"] is None]
        assert len(roots) == 2

    def test_no_tree_respects_budget(self, library):
        be = sim(p=0.0)
        r = run_task("x", [], library, bundle(chain(t2i())), be, PlanConfig(max_total_expansions=5),
                     policy=Policy.NO_TREE)
        assert r.status == "unresolved-budget" and be.jobs == 5


def test_determinism(library, tmp_path):
    def once(d):
        planner = ScriptedPlanner([chain(t2i(), upscale()), chain(upscale())] * 3)
        be = SimulatedBackend(SimProfile.uniform(0.6, 0.7, seed=5, quality_std=0.2))
        r = run_task("x", [], library, mock_bundle(planner), be, PlanConfig(), run_dir=tmp_path / d)
        return r.trace.canonical()

    assert once("a") == once("b")


@pytest.mark.parametrize("bad", [dict(max_depth=0), dict(max_children_per_node=0), dict(max_total_expansions=0),
                                 dict(evaluation_threshold="harsh")])
def test_config_bounds(bad):
    with pytest.raises(ValueError):
        PlanConfig(**bad)
