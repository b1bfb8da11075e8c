"""Test-time adaptation benchmark engine."""

from ttabench._core import *  # noqa: F401,F403
from ttabench._core import __version__  # noqa: F401
