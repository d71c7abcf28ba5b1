"""Backdoor scanning toolkit: forge model zoos, reverse-engineer triggers,
and score detection quality. The heavy lifting lives in the _karm extension."""

try:
    from ._karm import *  # noqa: F401,F403  (installed package layout)
except ImportError:
    from _karm import *  # noqa: F401,F403  (in-tree build, extension on sys.path)
