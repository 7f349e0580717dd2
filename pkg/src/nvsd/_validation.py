"""Input validation helpers shared by the estimators."""

import numpy as np

from .exceptions import DomainError


def check_signal_arrays(tau, values, require_uniform=True, rtol=1e-6):
    """Return float arrays after checking shape, finiteness and ordering.

    Raises
    ------
    DomainError
        On mismatched lengths, non-finite values, a non-increasing grid, or
        (with ``require_uniform``) a grid whose spacing varies by more than
        ``rtol`` of the step.
    """
    tau = np.asarray(tau, dtype=float).ravel()
    values = np.asarray(values, dtype=float).ravel()
    if tau.shape != values.shape:
        raise DomainError(f"tau has {tau.size} samples but values have {values.size}")
    if tau.size == 0:
        raise DomainError("empty signal")
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(values))):
        raise DomainError("signal contains non-finite values")
    if tau.size > 1:
        d = np.diff(tau)
        if np.any(d <= 0):
            raise DomainError("tau must be strictly increasing")
        if require_uniform and np.max(np.abs(d - d[0])) > rtol * d[0]:
            raise DomainError("tau grid is not uniform")
    return tau, values
