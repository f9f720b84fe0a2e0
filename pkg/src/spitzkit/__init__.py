"""Spitz tumor classification toolkit.

Attention-based MIL classification over tile-feature bags, the statistics used
to score it, and a Monte Carlo simulation of ancillary-test ordering in a
pathology workflow.
"""

__version__ = "0.1.0"


class SpitzkitError(Exception):
    """Base class for package errors."""


class ConfigError(SpitzkitError, ValueError):
    """Invalid configuration or input value.

    ``field`` names the offending config key when one applies.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
