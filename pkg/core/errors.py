from __future__ import annotations

from typing import Optional

import numpy as np


class CertifiedRLError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(CertifiedRLError, ValueError):
    pass


class ConfigError(CertifiedRLError, ValueError):
    pass


class SingularSystemError(CertifiedRLError):
    pass


class InfeasibleSafeSetError(CertifiedRLError):
    """
    No input in the box satisfies every certified margin.

    witness is the input with the largest minimum margin, violation is the
    amount by which that margin is still negative.
    """

    def __init__(self, message: str, witness: Optional[np.ndarray] = None, violation: float = float("nan")):
        super().__init__(message)
        self.witness = witness
        self.violation = violation
