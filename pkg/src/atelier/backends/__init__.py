from .base import (
    DEFAULT_TIMEOUT,
    OUTPUT_NODES,
    Backend,
    BackendUnreachable,
    ExecutionOutcome,
    JobHandle,
    ProgressEvent,
)
from .remote import RemoteBackend, prompt_body
from .simulator import SimProfile, SimulatedBackend, WorkflowProfile, read_payload, simulate

__all__ = [
    "DEFAULT_TIMEOUT",
    "OUTPUT_NODES",
    "Backend",
    "BackendUnreachable",
    "ExecutionOutcome",
    "JobHandle",
    "ProgressEvent",
    "RemoteBackend",
    "SimProfile",
    "SimulatedBackend",
    "WorkflowProfile",
    "prompt_body",
    "read_payload",
    "simulate",
]
