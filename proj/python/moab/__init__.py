"""Outer-arithmetic multi-modal fusion: Python surface over the C++ core."""

try:
    from moab._moab import *  # noqa: F401,F403  (installed layout)
    from moab._moab import __version__  # noqa: F401
except ImportError:  # in-tree build: extension next to the build dir on sys.path
    from _moab import *  # noqa: F401,F403
    from _moab import __version__  # noqa: F401
