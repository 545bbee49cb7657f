"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Operation received data that violates its precondition."""


class ConfigError(ValueError):
    """A configuration value or combination is not allowed."""


class FormatError(ValueError):
    """A binary or manifest file is malformed; message names the byte offset."""


class ScenarioError(ValueError):
    """Scenario construction violated a task-partition constraint."""


class StateError(RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. frozen codebooks)."""


class RoutingError(KeyError):
    """Task-ID routing failed: unknown task or task-ID supplied in single-head mode."""


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. BWT with one task)."""
