"""Out-of-process driving advisor speaking newline-delimited JSON."""

from .rules import (ACTION_NAMES, OBS_SIZE, Recommendation, bucket_of,
                    check_obs, lane_change_safe, recommend)
from .server import StubAdvisor, handle_request, serve_stdio, serve_tcp
from .store import FeedbackStore

__version__ = "0.1.0"

__all__ = [
    "ACTION_NAMES",
    "OBS_SIZE",
    "Recommendation",
    "bucket_of",
    "check_obs",
    "lane_change_safe",
    "recommend",
    "StubAdvisor",
    "handle_request",
    "serve_stdio",
    "serve_tcp",
    "FeedbackStore",
    "__version__",
]
