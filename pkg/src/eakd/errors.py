"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new failure modes should
subclass one of them rather than raising bare built-ins.
"""

from __future__ import annotations


class EakdError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EakdError, ValueError):
    """Invalid hyperparameter, missing setting, or bad precondition."""


class DimensionError(EakdError, ValueError):
    """Operand shapes do not agree."""


class InputError(EakdError, ValueError):
    """Input data outside the accepted domain (non-finite logits, bad labels)."""


class ContractError(EakdError, RuntimeError):
    """A caller broke an API contract (e.g. backward on a non-scalar)."""


class FormatError(EakdError):
    """Malformed file. ``offset`` is the byte offset (or record number) at fault."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DivergenceError(EakdError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")
