from __future__ import annotations


class RegionMoeError(Exception):
    """Base class; ``code`` is a short machine-parsable tag used by the CLI."""

    code = "error"


class DimensionError(RegionMoeError, ValueError):
    code = "dimension_mismatch"

    def __init__(self, what: str, expected=None, actual=None):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(RegionMoeError, ValueError):
    code = "non_finite"


class SerializationError(RegionMoeError, ValueError):
    code = "serialization"


class SchemaError(RegionMoeError, ValueError):
    code = "schema"


class CohortError(RegionMoeError, ValueError):
    code = "cohort"


class NoAvailableExpertsError(RegionMoeError, ValueError):
    code = "no_available_experts"

    def __init__(self, msg: str = "no available experts"):
        super().__init__(msg)


class StratificationError(RegionMoeError, ValueError):
    code = "stratification"


class ConfigError(RegionMoeError, ValueError):
    code = "config"
