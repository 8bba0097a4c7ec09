from .jobs import (
    Continuous,
    ExecutionJob,
    JobLog,
    JobStatus,
    OneOff,
    TERMINAL_STATUSES,
    Trigger,
    mode_from_config,
    mode_from_dict,
    mode_to_dict,
)
from .manager import JobManager, ManagerHooks, Worker
from .targets import MockTarget, ProcessTarget, pick_target

__all__ = [
    "Continuous",
    "ExecutionJob",
    "JobLog",
    "JobManager",
    "JobStatus",
    "ManagerHooks",
    "MockTarget",
    "OneOff",
    "ProcessTarget",
    "TERMINAL_STATUSES",
    "Trigger",
    "Worker",
    "mode_from_config",
    "mode_from_dict",
    "mode_to_dict",
    "pick_target",
]
