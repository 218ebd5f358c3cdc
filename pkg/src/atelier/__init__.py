"""Hierarchical planning over a library of atomic ComfyUI workflows."""

from .graph import WorkflowGraph, parse_workflow, serialize_workflow, validate_dag
from .planning import PlanConfig, Policy, TaskResult, run_task
from .swi import Library, SwiCall, fixture_library, instantiate

__version__ = "0.1.0"

__all__ = [
    "Library",
    "PlanConfig",
    "Policy",
    "SwiCall",
    "TaskResult",
    "WorkflowGraph",
    "fixture_library",
    "instantiate",
    "parse_workflow",
    "run_task",
    "serialize_workflow",
    "validate_dag",
]
