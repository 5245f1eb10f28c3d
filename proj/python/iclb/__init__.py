"""In-context backdoor laboratory: toy four-panel MIM transformer, tasks, poisoning and metrics."""

from ._core import *  # noqa: F401,F403
