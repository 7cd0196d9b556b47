"""Error taxonomy shared across modules.

The CLI maps these onto exit codes: config/argument problems exit 2,
capability gaps exit 3, numeric failures exit 4. Plain ValueError is used
for garden-variety argument errors and maps to exit 2 as well.
"""


class ConfigError(ValueError):
    """Bad run configuration: unknown keys, malformed values, bad flags."""


class FormatError(ValueError):
    """Malformed persisted artifact (checkpoint, config file); carries location info."""


class DataError(ValueError):
    """Dataset content violates the attribute spec (label out of domain)."""


class CapabilityError(Exception):
    """Operation is well-formed but unsupported for this input class."""


class NumericError(ArithmeticError):
    """NaN/Inf, divergence, step-size underflow, or infeasible acceptance."""
