"""Patch scorers served by the adapter.

Each scorer maps a uint8 batch of shape (n, 256, 256, 3) to ``n`` float
probabilities in [0, 1], one per patch, in order. The adapter is transport
only: apart from the byte->float scaling documented on LinearModel there is
no preprocessing, so model semantics live entirely in the model file.
"""

from pathlib import Path

import numpy as np


class BadModel(Exception):
    """Model file missing, unreadable, or the wrong shape."""


class ConstantStub:
    """Answers every patch with the same probability."""

    def __init__(self, value: float):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"constant stub value {value} outside [0, 1]")
        self.value = value

    def score(self, patches: np.ndarray) -> np.ndarray:
        return np.full(len(patches), self.value)


class CheckerboardStub:
    """1.0 iff the patch's mean green channel is below its mean red channel.

    Red-dominant pixels mark tumor in the synthetic slides while tissue
    stays green-dominant and background gray, so this stub is a pixel-level
    tumor detector for them — useful for exercising the full pipeline
    without any model.
    """

    def score(self, patches: np.ndarray) -> np.ndarray:
        sums = patches.sum(axis=(1, 2), dtype=np.int64)
        return (sums[:, 1] < sums[:, 0]).astype(np.float64)


class LinearModel:
    """One affine layer plus a sigmoid over the scaled raw patch.

    The model file is an .npz with ``weights`` (flat, 256*256*3 entries,
    RGB pixel order) and scalar ``bias``. Pixels are scaled to [0, 1] by
    dividing by 255; the probability is sigmoid(weights . pixels + bias).
    Patches are scored one at a time, so results never depend on how the
    parent batched them.
    """

    def __init__(self, path):
        path = Path(path)
        try:
            with np.load(path) as data:
                self.weights = np.asarray(data["weights"], dtype=np.float64)
                self.bias = float(data["bias"])
        except (OSError, KeyError, ValueError) as exc:
            raise BadModel(f"cannot load model {path}: {exc}") from exc
        self.weights = self.weights.reshape(-1)
        if self.weights.size != 256 * 256 * 3:
            raise BadModel(f"model {path}: {self.weights.size} weights, "
                           f"expected {256 * 256 * 3}")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise BadModel(f"model {path}: non-finite parameters")

    def score(self, patches: np.ndarray) -> np.ndarray:
        out = np.empty(len(patches))
        for i, patch in enumerate(patches):
            z = np.dot(patch.reshape(-1) / 255.0, self.weights) + self.bias
            out[i] = _sigmoid(z)
        return out


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return ez / (1.0 + ez)
