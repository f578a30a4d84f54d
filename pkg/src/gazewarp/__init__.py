"""Gaze redirection by learned coarse-to-fine warping with lightness correction.

Kept import-light on purpose: the CLI entry point applies the
WARPNET_THREADS cap to the BLAS thread pools before numpy is loaded,
so submodules are imported lazily here.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "sampler",
    "encoding",
    "model",
    "lcm",
    "weightio",
    "data",
    "training",
    "evaluate",
    "gradcheck",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
