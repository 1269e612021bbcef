"""Reference implementation of the engine's runner protocol v1."""

__version__ = "0.1.0"

from .adapter import wrap_external_model  # noqa: F401
from .serve import serve  # noqa: F401
