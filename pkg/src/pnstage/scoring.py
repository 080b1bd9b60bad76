"""Patch scorers: the pluggable contract that stands in for the CNN.

Built-in scorers (constant, ground-truth oracle) keep the pipeline fully
testable in-process; ``ExternalScorer`` drives a child process over a
little-endian binary stdio protocol so real models can be plugged in
without linking them.

Wire protocol (all integers little-endian):
  handshake  parent sends ``PNS1``; child replies ``PNS1``
  request    u32 frame_len | u64 request_id | u32 count |
             count x { u32 w | u32 h | w*h*3 RGB bytes }
  response   u32 frame_len | u64 request_id | u32 count | count x f32
``frame_len`` counts the bytes after the length field itself. The child
answers frames in order, one response per request.
"""

from __future__ import annotations

import os
import select
import shlex
import struct
import subprocess
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .patches import PATCH_SIZE

PROTOCOL_MAGIC = b"PNS1"
DEFAULT_TIMEOUT = 60.0
DEFAULT_BATCH_SIZE = 32


class ScorerError(Exception):
    """Base for scorer failures."""


class ScorerCrashed(ScorerError):
    """External scorer exited or closed its pipe mid-conversation."""


class ProtocolViolation(ScorerError):
    """External scorer sent a malformed or out-of-contract response."""


class Timeout(ScorerError):
    """External scorer did not answer within the deadline."""


class SpawnFailed(ScorerError):
    """External scorer command could not be started."""


class HandshakeMismatch(ScorerError):
    """External scorer answered the handshake with the wrong magic."""


@dataclass(frozen=True)
class PatchScore:
    slide_id: str
    x: int
    y: int
    prob: float


@dataclass(frozen=True)
class ScoreItem:
    """One patch to score; ``raster`` may be None for scorers that work
    from coordinates alone (see ``needs_pixels``)."""

    slide_id: str
    x: int
    y: int
    raster: np.ndarray | None = None


@dataclass
class ScorerSpec:
    kind: str  # constant | oracle | external
    constant_value: float | None = None
    oracle_noise_sigma: float | None = None
    oracle_seed: int | None = None
    external_cmd: str | list | None = None

    def __post_init__(self):
        fields = {
            "constant": self.constant_value is not None
                        and self.oracle_noise_sigma is None
                        and self.oracle_seed is None
                        and self.external_cmd is None,
            "oracle": self.constant_value is None and self.external_cmd is None,
            "external": self.external_cmd is not None
                        and self.constant_value is None
                        and self.oracle_noise_sigma is None
                        and self.oracle_seed is None,
        }
        if self.kind not in fields:
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if not fields[self.kind]:
            raise ValueError(f"fields inconsistent with scorer kind {self.kind!r}")


class ConstantScorer:
    """Returns one fixed probability for every patch."""

    needs_pixels = False

    def __init__(self, value: float):
        if not 0.0 <= value <= 1.0 or not np.isfinite(value):
            raise ValueError(f"constant probability {value} outside [0, 1]")
        self.value = float(value)

    def score_batch(self, items: list) -> list[PatchScore]:
        return [PatchScore(it.slide_id, it.x, it.y, self.value) for it in items]

    def close(self):
        pass


class OracleScorer:
    """Scores a patch as its ground-truth tumor fraction plus optional
    Gaussian noise, clamped to [0, 1].

    Noise is seeded per (seed, slide, x, y), so scores are independent of
    how patches are batched. Slides absent from ``masks`` count as
    tumor-free. With sigma=0 the score equals the exact tumor fraction.
    """

    needs_pixels = False

    def __init__(self, masks: dict, sigma: float = 0.0, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.masks = masks
        self.sigma = float(sigma)
        self.seed = int(seed)

    def _fraction(self, slide_id: str, x: int, y: int) -> float:
        mask = self.masks.get(slide_id)
        if mask is None:
            return 0.0
        window = mask[max(y, 0):y + PATCH_SIZE, max(x, 0):x + PATCH_SIZE]
        return int(np.count_nonzero(window)) / float(PATCH_SIZE * PATCH_SIZE)

    def score_batch(self, items: list) -> list[PatchScore]:
        out = []
        for it in items:
            prob = self._fraction(it.slide_id, it.x, it.y)
            if self.sigma > 0.0:
                ss = np.random.SeedSequence(
                    [self.seed, zlib.crc32(it.slide_id.encode()), it.x, it.y])
                noise = np.random.default_rng(ss).standard_normal() * self.sigma
                prob = min(max(prob + noise, 0.0), 1.0)
            out.append(PatchScore(it.slide_id, it.x, it.y, prob))
        return out

    def close(self):
        pass


class ExternalScorer:
    """Client for a scorer child process speaking the stdio protocol."""

    needs_pixels = True

    def __init__(self, proc: subprocess.Popen, timeout: float = DEFAULT_TIMEOUT,
                 batch_size: int = DEFAULT_BATCH_SIZE):
        self.proc = proc
        self.timeout = timeout
        self.batch_size = batch_size
        self._next_id = 1
        self._lock = threading.Lock()  # one request in flight per handle

    def _read_exact(self, n: int, deadline: float) -> bytes:
        fd = self.proc.stdout.fileno()
        chunks = []
        got = 0
        while got < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.close()
                raise Timeout(f"scorer did not answer within {self.timeout}s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, n - got)
            if not chunk:
                raise ScorerCrashed(
                    f"scorer closed its pipe (exit={self.proc.poll()})")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _score_frame(self, items: list) -> list[float]:
        payload = [struct.pack("<QI", self._next_id, len(items))]
        for it in items:
            raster = np.ascontiguousarray(it.raster, dtype=np.uint8)
            if raster.shape != (PATCH_SIZE, PATCH_SIZE, 3):
                raise ValueError(f"patch raster shape {raster.shape}, "
                                 f"expected ({PATCH_SIZE}, {PATCH_SIZE}, 3)")
            payload.append(struct.pack("<II", PATCH_SIZE, PATCH_SIZE))
            payload.append(raster.tobytes())
        body = b"".join(payload)
        try:
            self.proc.stdin.write(struct.pack("<I", len(body)) + body)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerCrashed(f"scorer stdin closed: {exc}") from exc

        deadline = time.monotonic() + self.timeout
        frame_len, = struct.unpack("<I", self._read_exact(4, deadline))
        if frame_len != 12 + 4 * len(items):
            raise ProtocolViolation(
                f"response frame length {frame_len}, "
                f"expected {12 + 4 * len(items)}")
        frame = self._read_exact(frame_len, deadline)
        rid, count = struct.unpack_from("<QI", frame, 0)
        if rid != self._next_id:
            raise ProtocolViolation(f"response id {rid} != request {self._next_id}")
        if count != len(items):
            raise ProtocolViolation(f"response count {count} != {len(items)}")
        self._next_id += 1
        probs = np.frombuffer(frame, dtype="<f4", offset=12, count=count)
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < 0.0 \
                or probs.max(initial=0.0) > 1.0:
            raise ProtocolViolation("scorer returned probabilities outside [0, 1]")
        return [float(p) for p in probs]

    def score_batch(self, items: list) -> list[PatchScore]:
        out = []
        with self._lock:
            for start in range(0, len(items), self.batch_size):
                chunk = items[start:start + self.batch_size]
                for it, prob in zip(chunk, self._score_frame(chunk)):
                    out.append(PatchScore(it.slide_id, it.x, it.y, prob))
        return out

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_external(cmd, timeout: float = DEFAULT_TIMEOUT,
                   batch_size: int = DEFAULT_BATCH_SIZE) -> ExternalScorer:
    """Start a scorer child process and complete the handshake."""
    argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
    try:
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, bufsize=0)
    except OSError as exc:
        raise SpawnFailed(f"cannot start {argv!r}: {exc}") from exc
    scorer = ExternalScorer(proc, timeout=timeout, batch_size=batch_size)
    try:
        proc.stdin.write(PROTOCOL_MAGIC)
        proc.stdin.flush()
        reply = scorer._read_exact(4, time.monotonic() + timeout)
    except ScorerCrashed as exc:
        scorer.close()
        raise HandshakeMismatch(f"no handshake reply: {exc}") from exc
    except (BrokenPipeError, OSError) as exc:
        scorer.close()
        raise SpawnFailed(f"cannot reach {argv!r}: {exc}") from exc
    if reply != PROTOCOL_MAGIC:
        scorer.close()
        raise HandshakeMismatch(f"scorer answered {reply!r}, expected {PROTOCOL_MAGIC!r}")
    return scorer


def make_scorer(spec: ScorerSpec, masks: dict | None = None):
    """Instantiate a scorer from its spec; oracle kinds receive ``masks``
    mapping slide_id to a level-0 boolean tumor raster."""
    if spec.kind == "constant":
        return ConstantScorer(spec.constant_value)
    if spec.kind == "oracle":
        return OracleScorer(masks or {},
                            sigma=spec.oracle_noise_sigma or 0.0,
                            seed=spec.oracle_seed or 0)
    return spawn_external(spec.external_cmd)


def score_batch(scorer, items: list) -> list[PatchScore]:
    """Score patches in order; one PatchScore per input item."""
    return scorer.score_batch(items)
