"""Linear-time doubly-stochastic attention via pivot-mediated entropic transport.

Submodules are imported lazily so the CLI can configure BLAS thread counts
before numpy is first loaded.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "ot",
    "coupling",
    "heads",
    "autograd",
    "training",
    "estimators",
    "bench",
    "config",
    "verify",
    "validation",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
