"""Wire protocol framing, child side.

All integers little-endian:

    handshake: parent sends magic b"PNS1", child echoes it back
    request:   u32 frame_len | u64 request_id | u32 count |
               count * (u32 w=256 | u32 h=256 | w*h*3 raw RGB bytes)
    response:  u32 frame_len | u64 request_id | u32 count | count * f32 prob

``frame_len`` counts every byte after the frame_len field itself. The
parent keeps one request in flight and expects responses in request order.
"""

import struct

import numpy as np

MAGIC = b"PNS1"
PATCH_SIZE = 256

_RECORD_HEADER = struct.Struct("<II")
_FRAME_HEADER = struct.Struct("<QI")
_PATCH_BYTES = PATCH_SIZE * PATCH_SIZE * 3


class ProtocolError(Exception):
    """The byte stream violates the framing rules."""


def read_exact(stream, n: int) -> bytes:
    """Read exactly ``n`` bytes or raise ProtocolError on early EOF."""
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ProtocolError(f"stream ended {n - got} bytes short")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame_len(stream) -> int | None:
    """Next frame's length, or None on a clean EOF at a frame boundary."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        head += stream.read(4 - len(head)) or b""
    if len(head) < 4:
        raise ProtocolError("stream ended inside a frame length")
    return struct.unpack("<I", head)[0]


def parse_request(body: bytes) -> tuple[int, np.ndarray]:
    """Decode a request body into (request_id, patches).

    Patches come back as one uint8 array of shape (count, 256, 256, 3).
    Every record must declare the protocol's fixed 256x256 patch size and
    the body must hold exactly the bytes the header promises.
    """
    if len(body) < _FRAME_HEADER.size:
        raise ProtocolError(f"request body {len(body)} bytes, header needs "
                            f"{_FRAME_HEADER.size}")
    request_id, count = _FRAME_HEADER.unpack_from(body, 0)
    expected = _FRAME_HEADER.size + count * (_RECORD_HEADER.size + _PATCH_BYTES)
    if len(body) != expected:
        raise ProtocolError(f"request {request_id}: body {len(body)} bytes, "
                            f"{count} patches need {expected}")
    patches = np.empty((count, PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    offset = _FRAME_HEADER.size
    for i in range(count):
        w, h = _RECORD_HEADER.unpack_from(body, offset)
        offset += _RECORD_HEADER.size
        if w != PATCH_SIZE or h != PATCH_SIZE:
            raise ProtocolError(f"request {request_id}: patch {i} declares "
                                f"{w}x{h}, protocol fixes {PATCH_SIZE}x{PATCH_SIZE}")
        patches[i] = np.frombuffer(
            body, dtype=np.uint8, count=_PATCH_BYTES, offset=offset,
        ).reshape(PATCH_SIZE, PATCH_SIZE, 3)
        offset += _PATCH_BYTES
    return request_id, patches


def build_response(request_id: int, probs: np.ndarray) -> bytes:
    """Encode one response frame; ``probs`` must already be in [0, 1]."""
    payload = np.asarray(probs, dtype="<f4")
    body = _FRAME_HEADER.pack(request_id, len(payload)) + payload.tobytes()
    return struct.pack("<I", len(body)) + body
