"""Out-of-process patch scorer speaking the binary stdio protocol.

The heatmap pipeline scores 256x256 RGB patches through a child process so
that the actual model — a trained network, or a deterministic stub — never
links into the pipeline. This package is that child: it answers each request
frame with one float32 probability per patch, in order.
"""

from .protocol import MAGIC, PATCH_SIZE, ProtocolError
from .server import AdapterConfig, BadConfig, serve

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "BadConfig",
    "MAGIC",
    "PATCH_SIZE",
    "ProtocolError",
    "serve",
]
