"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import math
from numbers import Real

import numpy as np

from .exceptions import ContractError, DomainError

ROW_SUM_ATOL = 1e-12


def check_finite_scalar(value, name: str) -> float:
    if not isinstance(value, (Real, np.floating, np.integer)):
        raise DomainError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value}")
    return value


def check_positive(value, name: str) -> float:
    value = check_finite_scalar(value, name)
    if value <= 0:
        raise DomainError(f"{name} must be > 0, got {value}")
    return value


def check_probability(value, name: str, *, open_left: bool = False) -> float:
    value = check_finite_scalar(value, name)
    lo_ok = value > 0 if open_left else value >= 0
    if not (lo_ok and value <= 1):
        bracket = "(0, 1]" if open_left else "[0, 1]"
        raise DomainError(f"{name} must lie in {bracket}, got {value}")
    return value


def check_rows(rows, name: str, *, min_len: int = 1) -> tuple[np.ndarray, ...]:
    """Convert a 2-D array or a sequence of 1-D sequences into read-only float rows."""
    if isinstance(rows, np.ndarray) and rows.ndim == 1:
        rows = [rows]
    if isinstance(rows, np.ndarray) and rows.ndim != 2:
        raise ContractError(f"{name} must be 2-D or a list of rows, got ndim={rows.ndim}")
    out = []
    for x, row in enumerate(rows):
        arr = np.array(row, dtype=float)
        if arr.ndim != 1:
            raise ContractError(f"{name}[{x}] must be 1-D")
        if arr.size < min_len:
            raise ContractError(f"{name}[{x}] has {arr.size} entries, need >= {min_len}")
        arr.setflags(write=False)
        out.append(arr)
    if not out:
        raise ContractError(f"{name} must contain at least one row")
    return tuple(out)


def check_index(index, size: int, name: str) -> int:
    if isinstance(index, bool) or not isinstance(index, (int, np.integer)):
        raise ContractError(f"{name} must be an integer index")
    if not 0 <= index < size:
        raise ContractError(f"{name}={index} out of range [0, {size})")
    return int(index)


def check_same_shape(a, b, name_a: str, name_b: str) -> None:
    if a.num_prompts != b.num_prompts:
        raise ContractError(f"{name_a} has {a.num_prompts} prompts, {name_b} has {b.num_prompts}")
    if a.responses_per_prompt != b.responses_per_prompt:
        raise ContractError(
            f"response counts differ: {name_a}={a.responses_per_prompt}, {name_b}={b.responses_per_prompt}"
        )
