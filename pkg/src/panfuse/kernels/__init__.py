"""Kernel backend selection.

Two interchangeable implementations exist: ``reference`` (pure numpy, also
handles float64) and ``fast`` (numba @njit, float32). The active default is
chosen at import time from the PANFUSE_BACKEND environment variable:

    PANFUSE_BACKEND=numba   require the numba backend (error if unavailable)
    PANFUSE_BACKEND=numpy   force the pure-numpy fallback
    unset / auto            numba when importable, else numpy

float64 tensors always run on the reference path regardless of the flag;
that is the oracle-precision route used by the finite-difference checks.
"""

import importlib
import os

import numpy as np

from . import reference

_choice = os.environ.get("PANFUSE_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"PANFUSE_BACKEND must be 'numba', 'numpy' or 'auto', got {_choice!r}")

fast = None
if _choice in ("auto", "numba"):
    try:
        fast = importlib.import_module(".fast", __package__)
    except ImportError:
        if _choice == "numba":
            raise
        fast = None

active = fast if fast is not None else reference
BACKEND = active.NAME


def impl_for(dtype):
    """Kernel module for a dtype: float32 uses the active backend,
    float64 always the reference implementation."""
    if np.dtype(dtype) == np.float32:
        return active
    return reference


def by_name(name):
    """Explicit backend lookup (used by the benchmark command)."""
    if name == "numpy":
        return reference
    if name == "numba":
        if fast is None:
            return importlib.import_module(".fast", __package__)
        return fast
    raise ValueError(f"unknown backend {name!r}")
