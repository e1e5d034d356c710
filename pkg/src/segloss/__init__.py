"""Locally adaptive segmentation loss library and experiment harness.

Submodules are imported lazily so the command-line entry point can apply
the SEGLOSS_THREADS cap before any numeric library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "config",
    "filters",
    "gradcheck",
    "grid",
    "losses",
    "net",
    "synthdata",
    "trainer",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
