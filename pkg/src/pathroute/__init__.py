"""Path-conditioned routing toolkit: coordination paths, executor losses, a
path planner with per-bucket calibration, and a routing evaluation harness."""

from .paths import N_PATHS, PATHS, Path, Role, Segment, Trajectory
from .records import PathOutcomeRecord, read_records, write_records

__version__ = "0.1.0"

__all__ = [
    "N_PATHS", "PATHS", "Path", "Role", "Segment", "Trajectory",
    "PathOutcomeRecord", "read_records", "write_records", "__version__",
]
