"""Workbench for measuring attention-head development in tiny transformers."""

from ._headlab import *  # noqa: F401,F403
from ._headlab import __version__  # noqa: F401
