"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the command line can
print ``error[<code>]: <message>`` on standard error.
"""

from __future__ import annotations


class VariError(ValueError):
    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"{base} ({extra})"


class DataError(VariError):
    code = "data"


class DimensionError(VariError):
    code = "dimension"


class NonFiniteError(VariError):
    code = "nonfinite"


class DegenerateDataError(VariError):
    code = "degenerate"


class ConfigError(VariError):
    code = "config"


class CollinearityError(VariError):
    code = "collinear"


class SamplerError(VariError):
    code = "sampler"
