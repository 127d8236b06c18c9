"""Surface diffusion flow of closed curves and surfaces.

Each time step minimizes perimeter plus a squared geometric H^-1 distance
to the previous shape inside a tubular-neighborhood constraint; iterating
the steps produces the discrete-in-time flow together with a full ledger
of per-step diagnostics.

Submodules are imported lazily so that the command line entry point can
configure threading before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "laplace_beltrami",
    "normal_graph",
    "mm_step",
    "flow_driver",
    "oracles",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
