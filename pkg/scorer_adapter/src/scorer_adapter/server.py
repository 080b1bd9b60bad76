"""Serve loop: handshake, then answer request frames until EOF.

One request is in flight at a time. Large frames are scored in
``batch_size`` chunks internally, strictly in order, so the response is
independent of both the parent's framing and the chunk size.
"""

from dataclasses import dataclass

import numpy as np

from . import protocol
from .scorers import CheckerboardStub, ConstantStub, LinearModel

DEFAULT_BATCH_SIZE = 32


class BadConfig(Exception):
    """Adapter configuration is contradictory or incomplete."""


@dataclass
class AdapterConfig:
    """What to serve: exactly one of a model file or a stub kind."""

    model_path: str | None = None
    stub: str = "none"
    stub_value: float = 0.5
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.stub not in ("none", "constant", "checkerboard"):
            raise BadConfig(f"unknown stub kind {self.stub!r}")
        has_model = self.model_path is not None
        has_stub = self.stub != "none"
        if has_model == has_stub:
            raise BadConfig("exactly one of a model path or a stub must be set")
        if self.stub == "constant" and not 0.0 <= self.stub_value <= 1.0:
            raise BadConfig(f"constant stub value {self.stub_value} "
                            "outside [0, 1]")
        if self.batch_size < 1:
            raise BadConfig(f"batch size {self.batch_size} must be positive")


def make_scorer(config: AdapterConfig):
    if config.model_path is not None:
        return LinearModel(config.model_path)
    if config.stub == "constant":
        return ConstantStub(config.stub_value)
    return CheckerboardStub()


def serve(config: AdapterConfig, stdin, stdout) -> int:
    """Run the protocol loop over binary streams; 0 on clean shutdown."""
    scorer = make_scorer(config)
    magic = stdin.read(len(protocol.MAGIC))
    if magic != protocol.MAGIC:
        raise protocol.ProtocolError(
            f"handshake {magic!r}, expected {protocol.MAGIC!r}")
    stdout.write(protocol.MAGIC)
    stdout.flush()

    while True:
        frame_len = protocol.read_frame_len(stdin)
        if frame_len is None:
            return 0
        body = protocol.read_exact(stdin, frame_len)
        request_id, patches = protocol.parse_request(body)
        probs = np.empty(len(patches))
        for start in range(0, len(patches), config.batch_size):
            chunk = patches[start:start + config.batch_size]
            probs[start:start + len(chunk)] = scorer.score(chunk)
        if len(patches) and (not np.all(np.isfinite(probs))
                             or probs.min() < 0.0 or probs.max() > 1.0):
            raise protocol.ProtocolError(
                f"request {request_id}: scorer produced probabilities "
                "outside [0, 1]")
        stdout.write(protocol.build_response(request_id, probs))
        stdout.flush()
