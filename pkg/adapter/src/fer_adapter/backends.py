"""Inference backends that sit behind the fer-oracle/1 serve loop.

Two backends are provided.  StubBackend answers every frame with the
uniform distribution and exists so the protocol plumbing can be exercised
without any model runtime installed.  TorchScriptBackend loads an exported
TorchScript graph and runs it on CPU; torch is imported lazily so the stub
path stays numpy-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fer_adapter.protocol import CLASSES


class AdapterError(RuntimeError):
    """The backend cannot be constructed (bad model path, missing runtime)."""


class StubBackend:
    """Constant uniform classifier used for protocol testing."""

    def probs(self, image: np.ndarray) -> np.ndarray:
        del image
        return np.full(len(CLASSES), 1.0 / len(CLASSES))


def resize_bilinear(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Resize a 2-d float image with bilinear interpolation (align-corners)."""
    img = np.asarray(image, dtype=np.float64)
    in_height, in_width = img.shape
    if (in_height, in_width) == (out_height, out_width):
        return img.copy()

    def axis_coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.linspace(0.0, n_in - 1.0, n_out)

    ys = axis_coords(in_height, out_height)
    xs = axis_coords(in_width, out_width)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(in_height - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(in_width - 2, 0))
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, in_height - 1)
    x1 = np.minimum(x0 + 1, in_width - 1)
    top = img[np.ix_(y0, x0)] * (1.0 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1.0 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bottom * wy


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


class TorchScriptBackend:
    """Wraps an exported TorchScript graph as a six-class classifier.

    The graph is fed a float tensor of shape (1, C, R, R) with values in
    [0, 1], where R is the configured input resolution and C is 1 for
    grayscale models or 3 for models trained on replicated-channel input.
    The flattened six-element output is passed through a softmax unless the
    graph is declared to emit probabilities already (raw_probs=True).
    """

    def __init__(
        self,
        model_path: str,
        resolution: int = 48,
        grayscale: bool = True,
        raw_probs: bool = False,
    ) -> None:
        if resolution <= 0:
            raise AdapterError("input resolution must be a positive integer")
        if not Path(model_path).is_file():
            raise AdapterError(f"model graph not found: {model_path}")
        try:
            import torch
        except ImportError as exc:
            raise AdapterError(
                "torch is not installed; install the [model] extra to serve "
                "exported graphs"
            ) from exc
        try:
            self._model = torch.jit.load(model_path, map_location="cpu")
        except (OSError, RuntimeError, ValueError) as exc:
            raise AdapterError(f"cannot load model graph {model_path!r}: {exc}") from exc
        self._model.eval()
        self._torch = torch
        self._resolution = int(resolution)
        self._grayscale = bool(grayscale)
        self._raw_probs = bool(raw_probs)

    def probs(self, image: np.ndarray) -> np.ndarray:
        resized = resize_bilinear(image, self._resolution, self._resolution)
        tensor = self._torch.from_numpy(resized).float()[None, None]
        if not self._grayscale:
            tensor = tensor.repeat(1, 3, 1, 1)
        with self._torch.inference_mode():
            output = self._model(tensor)
        vec = output.detach().cpu().numpy().ravel().astype(np.float64)
        if vec.size != len(CLASSES):
            raise ValueError(
                f"model produced {vec.size} outputs, expected {len(CLASSES)}"
            )
        if self._raw_probs:
            return vec
        return softmax(vec)


@dataclass
class AdapterConfig:
    """Resolved serve-mode options; exactly one of stub/model must be set."""

    stub: bool = False
    model: str | None = None
    resolution: int = 48
    grayscale: bool = True
    raw_probs: bool = False

    def build(self):
        if self.stub == (self.model is not None):
            raise AdapterError("exactly one of --stub and --model must be given")
        if self.stub:
            return StubBackend()
        return TorchScriptBackend(
            self.model,
            resolution=self.resolution,
            grayscale=self.grayscale,
            raw_probs=self.raw_probs,
        )
