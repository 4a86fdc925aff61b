"""Python access to the nmtforge translation toolkit."""

from ._nmtforge import *  # noqa: F401,F403
from ._nmtforge import __doc__  # noqa: F401

__version__ = "0.1.0"
