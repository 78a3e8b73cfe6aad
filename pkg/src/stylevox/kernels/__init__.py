"""Kernel backend selection.

The compiled Cython kernels (ck) and the NumPy fallback (npk) implement
the same functions with the same semantics. The compiled backend is used
when the extension imported cleanly; S2RF_KERNEL=python or
S2RF_KERNEL=compiled forces the choice (forcing an unavailable compiled
backend is an error, silence would hide a broken build).

Grid accumulation order is fixed within a backend, so repeated runs with
the same backend and seed are bitwise reproducible. Across backends
results agree to float tolerance only.
"""

import importlib
import os

from . import npk

_FORCE = os.environ.get("S2RF_KERNEL", "auto").strip().lower()
if _FORCE not in ("auto", "compiled", "python"):
    raise RuntimeError(f"S2RF_KERNEL must be auto, compiled or python, got {_FORCE!r}")

ck = None
if _FORCE in ("auto", "compiled"):
    try:
        ck = importlib.import_module(".ck", __name__)
    except ImportError:
        if _FORCE == "compiled":
            raise RuntimeError("S2RF_KERNEL=compiled but the extension is not built")

HAS_COMPILED = ck is not None
active = ck if HAS_COMPILED else npk
BACKEND_NAME = "compiled" if HAS_COMPILED else "python"

K_MAX = npk.K_MAX
sigmoid = npk.sigmoid


def backends():
    """(name, module) pairs of every importable backend, for parity tests."""
    out = [("python", npk)]
    if HAS_COMPILED:
        out.append(("compiled", ck))
    return out


def __getattr__(name):
    # dispatch kernel lookups to the active backend
    return getattr(active, name)
